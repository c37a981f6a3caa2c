"""Dense feedforward forecasters: construction, Adam training, evaluation.

Two production heads: ``sigmoid_classifier`` (exceedance probability) and
``capacity_scaled`` (sigmoid times plant capacity, bounding regression
output to (0, capacity)). A third ``linear`` head exists for affine
models used in diagnostics and attribution sanity checks.

Training runs on hand-derived vectorized backprop (numpy); the scalar
autodiff graph backs single-sample gradient queries and serves as the
cross-check route in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Graph
from .errors import DataError, DivergenceError, UsageError

__all__ = [
    "LayerSpec",
    "Network",
    "TrainConfig",
    "ClassifierMetrics",
    "build_network",
    "train",
    "predict",
    "evaluate_classifier",
    "evaluate_regressor",
    "exceedance_from_regression",
    "save_network",
    "load_network",
    "network_to_dict",
    "network_from_dict",
]

HEAD_KINDS = ("sigmoid_classifier", "capacity_scaled", "linear")
ACTIVATIONS = ("relu", "sigmoid", "identity")


@dataclass(frozen=True)
class LayerSpec:
    width: int
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.width < 1:
            raise UsageError(f"layer width must be >= 1, got {self.width}")
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")


@dataclass
class Layer:
    weights: np.ndarray  # (out_width, in_width)
    bias: np.ndarray  # (out_width,)
    activation: str


@dataclass
class Network:
    layers: list[Layer]
    head: str
    input_width: int
    capacity: float | None = None
    feature_names: list[str] | None = None
    normalization: dict | None = None

    def __post_init__(self) -> None:
        if self.head not in HEAD_KINDS:
            raise UsageError(f"unknown head kind {self.head!r}")
        if self.head == "capacity_scaled":
            if self.capacity is None or self.capacity <= 0:
                raise UsageError("capacity_scaled head needs capacity > 0")
        width = self.input_width
        for i, layer in enumerate(self.layers):
            if layer.weights.shape != (layer.bias.shape[0], width):
                raise UsageError(
                    f"layer {i} weights {layer.weights.shape} do not accept width-{width} input"
                )
            width = layer.weights.shape[0]
        if width != 1:
            raise UsageError(f"network must end in a single output unit, got {width}")

    def num_params(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def copy(self) -> "Network":
        return Network(
            layers=[Layer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers],
            head=self.head,
            input_width=self.input_width,
            capacity=self.capacity,
            feature_names=list(self.feature_names) if self.feature_names else None,
            normalization=dict(self.normalization) if self.normalization else None,
        )

    # ----- forward --------------------------------------------------------

    def _head_scale(self) -> float:
        return self.capacity if self.head == "capacity_scaled" else 1.0

    def forward_trace(self, X: np.ndarray):
        """Per-layer pre-activations and activations for a (N, d) batch."""
        A = np.asarray(X, dtype=np.float64)
        pre, act = [], [A]
        for layer in self.layers:
            Z = A @ layer.weights.T + layer.bias
            A = _activate(layer.activation, Z)
            pre.append(Z)
            act.append(A)
        return pre, act

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_width:
            raise DataError(
                f"expected (n, {self.input_width}) features, got {X.shape}"
            )
        if not np.all(np.isfinite(X)):
            raise DataError("non-finite feature values")
        _, act = self.forward_trace(X)
        return act[-1][:, 0] * self._head_scale()

    def input_gradients(self, X: np.ndarray) -> np.ndarray:
        """d(output)/d(input) rows for a (N, d) batch, via vectorized backprop."""
        X = np.asarray(X, dtype=np.float64)
        pre, _ = self.forward_trace(X)
        G = np.full((X.shape[0], 1), self._head_scale())
        for layer, Z in zip(reversed(self.layers), reversed(pre)):
            G = (G * _activation_grad(layer.activation, Z)) @ layer.weights
        return G

    def input_gradient(self, x) -> np.ndarray:
        """Single-sample input gradient computed on the scalar autodiff graph."""
        graph, x_idx, out = self.build_graph(x)
        graph.forward()
        adjoints = graph.backward(out)
        return np.array([adjoints[i] for i in x_idx])

    def build_graph(self, x, params_as_inputs: bool = False):
        """Unrolled scalar graph of the network at input ``x``.

        Returns (graph, input node indices, output node index). With
        ``params_as_inputs`` weights and biases become input nodes so the
        adjoint pass also yields parameter gradients (used by the
        cross-route tests); the parameter indices are then appended to the
        returned tuple, mirroring layer order.
        """
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.input_width:
            raise DataError(f"expected {self.input_width} features, got {x.shape[0]}")
        g = Graph()
        param_idx = _param_nodes(g, self, as_inputs=params_as_inputs)
        x_idx = [g.input(v) for v in x]
        out_idx = _graph_stack(g, self, x_idx, param_idx)
        if params_as_inputs:
            return g, x_idx, out_idx, param_idx
        return g, x_idx, out_idx


def _param_nodes(g: Graph, net: Network, as_inputs: bool):
    make = g.input if as_inputs else g.constant
    return [
        ([[make(w) for w in row] for row in layer.weights], [make(b) for b in layer.bias])
        for layer in net.layers
    ]


def _graph_stack(g: Graph, net: Network, x_idx, param_idx) -> int:
    current = x_idx
    for (rows, bias), layer in zip(param_idx, net.layers):
        z = [g.add(m, b) for m, b in zip(g.matvec(rows, current), bias)]
        if layer.activation == "relu":
            current = [g.relu(i) for i in z]
        elif layer.activation == "sigmoid":
            current = [g.sigmoid(i) for i in z]
        else:
            current = z
    out = current[0]
    if net.head == "capacity_scaled":
        out = g.scale(out, net.capacity)
    return out


def build_loss_graph(net: Network, X, targets, loss: str):
    """Whole-batch loss as one scalar graph with parameters as input nodes.

    Gradient reference for the vectorized training route: the adjoint of
    each parameter node equals d(mean loss)/d(parameter). Returns
    (graph, per-layer (weight rows, bias) node indices, loss node).
    """
    X = np.asarray(X, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    g = Graph()
    param_idx = _param_nodes(g, net, as_inputs=True)
    terms = []
    for x, t in zip(X, targets):
        out = _graph_stack(g, net, [g.constant(v) for v in x], param_idx)
        if loss == "binary_cross_entropy":
            one_minus = g.add(g.constant(1.0), g.scale(out, -1.0))
            terms.append(
                g.add(g.scale(g.log(out), -t), g.scale(g.log(one_minus), -(1.0 - t)))
            )
        else:
            terms.append(g.square(g.add(out, g.constant(-t))))
    loss_node = g.scale(g.sum(terms), 1.0 / X.shape[0])
    return g, param_idx, loss_node


def _activate(kind: str, Z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(Z, 0.0)
    if kind == "sigmoid":
        return _sigmoid(Z)
    return Z


def _activation_grad(kind: str, Z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (Z > 0.0).astype(np.float64)
    if kind == "sigmoid":
        s = _sigmoid(Z)
        return s * (1.0 - s)
    return np.ones_like(Z)


def _sigmoid(Z: np.ndarray) -> np.ndarray:
    out = np.empty_like(Z, dtype=np.float64)
    pos = Z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-Z[pos]))
    ez = np.exp(Z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ----- construction ---------------------------------------------------------


def build_network(
    input_width: int,
    hidden: list[LayerSpec],
    head: str = "sigmoid_classifier",
    capacity: float | None = None,
    rng_seed: int = 0,
) -> Network:
    """Glorot-initialized stack of hidden layers plus a single-unit head layer."""
    if input_width < 1:
        raise UsageError(f"input_width must be >= 1, got {input_width}")
    if not hidden:
        raise UsageError("hidden layer list must not be empty")
    rng = np.random.default_rng(rng_seed)
    layers: list[Layer] = []
    fan_in = input_width
    for spec in hidden:
        layers.append(Layer(_glorot(rng, spec.width, fan_in), np.zeros(spec.width), spec.activation))
        fan_in = spec.width
    final_act = "identity" if head == "linear" else "sigmoid"
    layers.append(Layer(_glorot(rng, 1, fan_in), np.zeros(1), final_act))
    return Network(layers=layers, head=head, input_width=input_width, capacity=capacity)


def _glorot(rng: np.random.Generator, out_width: int, in_width: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (in_width + out_width))
    return rng.uniform(-bound, bound, size=(out_width, in_width))


def predict(net: Network, x) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(net.predict_batch(x)[0])


# ----- training -------------------------------------------------------------


@dataclass
class TrainConfig:
    loss: str = "binary_cross_entropy"
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.loss not in ("binary_cross_entropy", "mse"):
            raise UsageError(f"unknown loss {self.loss!r}")
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise UsageError("Adam betas must lie in (0, 1)")


class Adam:
    """Standard Adam with bias correction over a list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], lr: float, beta1: float, beta2: float, eps: float):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # counter-based stream: reshuffling epoch k never depends on epochs < k
    return np.random.Generator(np.random.Philox(key=[seed, epoch]))


def batch_loss_and_grads(net: Network, X: np.ndarray, t: np.ndarray, loss: str):
    """Mean loss over the batch and gradients for every weight/bias array."""
    pre, act = net.forward_trace(X)
    n = X.shape[0]
    out = act[-1][:, 0] * net._head_scale()
    if loss == "binary_cross_entropy":
        p = np.clip(out, 1e-12, 1.0 - 1e-12)
        value = float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))))
        # gradient of BCE(sigmoid(z)) taken jointly; clamp guards the value only
        dZ = ((out - t) / n)[:, None]
    else:
        err = out - t
        value = float(np.mean(err * err))
        dA = (2.0 * err / n * net._head_scale())[:, None]
        dZ = dA * _activation_grad(net.layers[-1].activation, pre[-1])
    grads: list[np.ndarray] = []
    G = dZ
    for i in range(len(net.layers) - 1, -1, -1):
        grads.append(np.sum(G, axis=0))  # bias
        grads.append(G.T @ act[i])  # weights
        if i > 0:
            G = (G @ net.layers[i].weights) * _activation_grad(
                net.layers[i - 1].activation, pre[i - 1]
            )
    grads.reverse()
    return value, grads


def train(net: Network, data, cfg: TrainConfig):
    """Mini-batch Adam training; returns (trained copy, per-epoch loss trace)."""
    X = np.asarray(data.features, dtype=np.float64)
    t = np.asarray(data.targets, dtype=np.float64)
    if X.shape[0] == 0:
        raise DataError("training dataset is empty")
    if cfg.batch_size > X.shape[0]:
        raise UsageError(
            f"batch_size {cfg.batch_size} exceeds dataset size {X.shape[0]}"
        )
    if cfg.loss == "binary_cross_entropy" and net.head != "sigmoid_classifier":
        raise UsageError("binary_cross_entropy requires a sigmoid_classifier head")
    if cfg.loss == "mse" and net.head == "sigmoid_classifier":
        raise UsageError("mse loss does not match a sigmoid_classifier head")

    out = net.copy()
    params: list[np.ndarray] = []
    for layer in out.layers:
        params.extend([layer.weights, layer.bias])
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    n = X.shape[0]
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        order = _epoch_rng(cfg.rng_seed, epoch).permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            # overflow surfaces as a non-finite loss, not a warning
            with np.errstate(over="ignore", invalid="ignore"):
                value, grads = batch_loss_and_grads(out, X[idx], t[idx], cfg.loss)
            if not math.isfinite(value):
                raise DivergenceError(f"divergence: non-finite loss at epoch {epoch}")
            opt.step(params, grads)
            epoch_losses.append(value)
        trace.append(float(np.mean(epoch_losses)))
    return out, trace


# ----- evaluation -----------------------------------------------------------


@dataclass(frozen=True)
class ClassifierMetrics:
    accuracy: float
    tp: int
    tn: int
    fp: int
    fn: int


def evaluate_classifier(net: Network, data) -> ClassifierMetrics:
    X = np.asarray(data.features, dtype=np.float64)
    t = np.asarray(data.targets)
    if X.shape[0] == 0:
        raise DataError("cannot evaluate on an empty dataset")
    if not np.all(np.isin(t, (0, 1))):
        raise DataError("classifier targets must be 0 or 1")
    # strict threshold: output exactly 0.5 classifies as 0
    pred = (net.predict_batch(X) > 0.5).astype(int)
    t = t.astype(int)
    tp = int(np.sum((pred == 1) & (t == 1)))
    tn = int(np.sum((pred == 0) & (t == 0)))
    fp = int(np.sum((pred == 1) & (t == 0)))
    fn = int(np.sum((pred == 0) & (t == 1)))
    return ClassifierMetrics((tp + tn) / X.shape[0], tp, tn, fp, fn)


def evaluate_regressor(net: Network, data) -> float:
    X = np.asarray(data.features, dtype=np.float64)
    t = np.asarray(data.targets, dtype=np.float64)
    if X.shape[0] == 0:
        raise DataError("cannot evaluate on an empty dataset")
    err = net.predict_batch(X) - t
    return float(np.sqrt(np.mean(err * err)))


def exceedance_from_regression(predicted_pv: float, predicted_load: float) -> int:
    """1 iff predicted generation strictly exceeds the predicted load."""
    for name, v in (("predicted_pv", predicted_pv), ("predicted_load", predicted_load)):
        if not math.isfinite(v) or v < 0.0:
            raise DataError(f"{name} must be finite and >= 0, got {v}")
    return 1 if predicted_pv > predicted_load else 0


# ----- persistence -----------------------------------------------------------


def network_to_dict(net: Network) -> dict:
    head: dict = {"kind": net.head}
    if net.head == "capacity_scaled":
        head["capacity"] = net.capacity
    return {
        "schema_version": 1,
        "model": "dense",
        "input_width": net.input_width,
        "head": head,
        "layers": [
            {
                "activation": l.activation,
                "weights": l.weights.tolist(),
                "bias": l.bias.tolist(),
            }
            for l in net.layers
        ],
        "feature_names": net.feature_names,
        "normalization": net.normalization,
    }


def network_from_dict(doc: dict) -> Network:
    if doc.get("schema_version") != 1:
        raise DataError(f"unsupported schema_version {doc.get('schema_version')!r}")
    head = doc["head"]
    return Network(
        layers=[
            Layer(
                np.asarray(l["weights"], dtype=np.float64),
                np.asarray(l["bias"], dtype=np.float64),
                l["activation"],
            )
            for l in doc["layers"]
        ],
        head=head["kind"],
        input_width=doc["input_width"],
        capacity=head.get("capacity"),
        feature_names=doc.get("feature_names"),
        normalization=doc.get("normalization"),
    )


def save_network(net: Network, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(network_to_dict(net), fh, indent=1)
        fh.write("\n")


def load_network(path) -> Network:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    if doc.get("model") == "variational":
        raise DataError(
            f"{path} holds a variational model; load it with bayesian.load_vnetwork"
        )
    return network_from_dict(doc)
