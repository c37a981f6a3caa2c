"""Variational Bayesian regression network and uncertainty decomposition.

Every weight carries a mean and a rho parameter (std = softplus(rho) > 0),
trained by minimizing sum-of-batch Gaussian NLL plus kl_weight times the
closed-form KL between the mean-field posterior and a N(0, prior_std)
prior, with reparameterized weight samples.

The network outputs two heads from its final layer: mu through the same
capacity-scaled sigmoid as the deterministic regressor, and a predictive
std through a softplus. Internally everything runs in capacity units
(targets divided by capacity) so both heads live on comparable scales;
the public surface speaks kWh.

Prediction draws mc_samples weight samples: the spread of the mu draws is
the epistemic std, the RMS of the sigma draws is the aleatoric std, and
their quadrature sum defines the 95% band (mean +/- 1.96 * total).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DivergenceError, UsageError

__all__ = [
    "VariationalLayer",
    "VariationalNetwork",
    "BnnTrainConfig",
    "UncertaintyEstimate",
    "ForecastPoint",
    "build_vnetwork",
    "train_bnn",
    "predict_uncertainty",
    "forecast_series",
    "coverage",
    "write_forecast_csv",
    "save_vnetwork",
    "load_vnetwork",
    "vnetwork_to_dict",
    "vnetwork_from_dict",
]

_SIGMA_FLOOR = 1e-9  # unit-space floor keeps log(sigma) finite


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class VariationalLayer:
    weight_mean: np.ndarray  # (out, in)
    weight_rho: np.ndarray
    bias_mean: np.ndarray  # (out,)
    bias_rho: np.ndarray
    activation: str  # "relu" | "identity"

    def stds(self) -> tuple[np.ndarray, np.ndarray]:
        return _softplus(self.weight_rho), _softplus(self.bias_rho)


@dataclass
class VariationalNetwork:
    layers: list[VariationalLayer]  # final layer has 2 outputs: mu logit, sigma logit
    capacity: float
    prior_std: float
    input_width: int
    feature_names: list[str] | None = None
    normalization: dict | None = None

    def params(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out.extend([l.weight_mean, l.weight_rho, l.bias_mean, l.bias_rho])
        return out

    def sample_eps(self, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
        return [
            (rng.standard_normal(l.weight_mean.shape), rng.standard_normal(l.bias_mean.shape))
            for l in self.layers
        ]

    def realize(self, eps) -> list[tuple[np.ndarray, np.ndarray]]:
        """Concrete weight draw: mean + softplus(rho) * eps."""
        out = []
        for l, (ew, eb) in zip(self.layers, eps):
            sw, sb = l.stds()
            out.append((l.weight_mean + sw * ew, l.bias_mean + sb * eb))
        return out

    def forward_unit(self, weights, X: np.ndarray):
        """(mu, sigma) in capacity units plus the trace used by backprop."""
        A = X
        pre, act = [], [A]
        for (W, b), layer in zip(weights, self.layers):
            Z = A @ W.T + b
            A = np.maximum(Z, 0.0) if layer.activation == "relu" else Z
            pre.append(Z)
            act.append(A)
        mu = _sigmoid(pre[-1][:, 0])
        sigma = _softplus(pre[-1][:, 1]) + _SIGMA_FLOOR
        return mu, sigma, pre, act


def build_vnetwork(
    input_width: int,
    hidden: tuple[int, ...] = (50, 30, 10),
    capacity: float = 2000.0,
    prior_std: float = 1.0,
    rng_seed: int = 0,
) -> VariationalNetwork:
    """Glorot means, rho = -5 (stds ~ 0.0067); sigma-head bias starts at -3."""
    if input_width < 1:
        raise UsageError("input_width must be >= 1")
    if not hidden:
        raise UsageError("hidden layer list must not be empty")
    if capacity <= 0 or prior_std <= 0:
        raise UsageError("capacity and prior_std must be positive")
    rng = np.random.default_rng(rng_seed)
    widths = [input_width, *hidden]
    layers = []
    for fan_in, fan_out in zip(widths, widths[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        layers.append(
            VariationalLayer(
                weight_mean=rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                weight_rho=np.full((fan_out, fan_in), -5.0),
                bias_mean=np.zeros(fan_out),
                bias_rho=np.full(fan_out, -5.0),
                activation="relu",
            )
        )
    bound = math.sqrt(6.0 / (widths[-1] + 2))
    head = VariationalLayer(
        weight_mean=rng.uniform(-bound, bound, size=(2, widths[-1])),
        weight_rho=np.full((2, widths[-1]), -5.0),
        bias_mean=np.array([0.0, -3.0]),
        bias_rho=np.full(2, -5.0),
        activation="identity",
    )
    layers.append(head)
    return VariationalNetwork(
        layers=layers, capacity=capacity, prior_std=prior_std, input_width=input_width
    )


# ----- training -------------------------------------------------------------------


@dataclass
class BnnTrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    rng_seed: int = 0
    prior_std: float = 1.0
    kl_weight: float | None = None  # default 1 / num_batches
    mc_train_samples: int = 1
    freeze_sigma: bool = False  # pin the sigma head (diagnostic reductions)

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.mc_train_samples < 1:
            raise UsageError("mc_train_samples must be >= 1")
        if self.prior_std <= 0:
            raise UsageError("prior_std must be positive")


def kl_to_prior(bnn: VariationalNetwork, prior_std: float) -> float:
    """Closed-form KL(q || N(0, prior_std^2)) summed over all weights."""
    total = 0.0
    for l in bnn.layers:
        for mean, rho in ((l.weight_mean, l.weight_rho), (l.bias_mean, l.bias_rho)):
            s = _softplus(rho)
            total += float(
                np.sum(
                    np.log(prior_std / s)
                    + (s * s + mean * mean) / (2.0 * prior_std**2)
                    - 0.5
                )
            )
    return total


def elbo_terms(
    bnn: VariationalNetwork,
    X: np.ndarray,
    y_unit: np.ndarray,
    eps_draws: list,
    prior_std: float,
    kl_weight: float,
):
    """Batch objective (sum NLL averaged over draws + kl_weight * KL) and
    gradients ordered as ``bnn.params()``. Epsilon draws are explicit so
    the gradients are checkable by finite differences."""
    n_params = len(bnn.layers) * 4
    grads = [np.zeros_like(p) for p in bnn.params()]
    nll_total = 0.0
    for eps in eps_draws:
        weights = bnn.realize(eps)
        mu, sigma, pre, act = bnn.forward_unit(weights, X)
        resid = mu - y_unit
        nll = np.sum(0.5 * math.log(2.0 * math.pi) + np.log(sigma) + resid**2 / (2.0 * sigma**2))
        nll_total += float(nll)
        # head gradients in unit space
        d_mu = resid / sigma**2
        d_sigma = 1.0 / sigma - resid**2 / sigma**3
        dZ = np.empty((X.shape[0], 2))
        dZ[:, 0] = d_mu * mu * (1.0 - mu)  # sigmoid head
        dZ[:, 1] = d_sigma * _sigmoid(pre[-1][:, 1])  # softplus head
        G = dZ
        for i in range(len(bnn.layers) - 1, -1, -1):
            layer = bnn.layers[i]
            W, _ = weights[i]
            dW = G.T @ act[i]
            db = np.sum(G, axis=0)
            sw, sb = layer.stds()
            ew, eb = eps[i]
            grads[4 * i + 0] += dW
            grads[4 * i + 1] += dW * ew * _sigmoid(layer.weight_rho)
            grads[4 * i + 2] += db
            grads[4 * i + 3] += db * eb * _sigmoid(layer.bias_rho)
            if i > 0:
                G = G @ W
                if bnn.layers[i - 1].activation == "relu":
                    G = G * (pre[i - 1] > 0.0)
    scale = 1.0 / len(eps_draws)
    for g in grads:
        g *= scale
    loss = nll_total * scale
    if kl_weight != 0.0:
        loss += kl_weight * kl_to_prior(bnn, prior_std)
        for i, l in enumerate(bnn.layers):
            p2 = prior_std**2
            for k, (mean, rho) in enumerate(((l.weight_mean, l.weight_rho), (l.bias_mean, l.bias_rho))):
                s = _softplus(rho)
                d_s = -1.0 / s + s / p2
                grads[4 * i + 2 * k] += kl_weight * mean / p2
                grads[4 * i + 2 * k + 1] += kl_weight * d_s * _sigmoid(rho)
    assert len(grads) == n_params
    return loss, grads


def train_bnn(data, cfg: BnnTrainConfig, hidden: tuple[int, ...] = (50, 30, 10), capacity: float = 2000.0):
    """Train a fresh variational network; returns (network, per-epoch loss trace).

    The trace entry for an epoch is the summed batch objective, i.e. the
    negative ELBO estimate for one pass over the data.
    """
    X = np.asarray(data.features, dtype=np.float64)
    y = np.asarray(data.targets, dtype=np.float64)
    if X.shape[0] == 0:
        raise DataError("training dataset is empty")
    if cfg.batch_size > X.shape[0]:
        raise UsageError(f"batch_size {cfg.batch_size} exceeds dataset size {X.shape[0]}")
    if np.any(y < 0.0) or np.any(y > capacity):
        raise DataError("regression targets must lie in [0, capacity]")
    bnn = build_vnetwork(
        X.shape[1], hidden=hidden, capacity=capacity, prior_std=cfg.prior_std, rng_seed=cfg.rng_seed
    )
    y_unit = y / capacity
    n = X.shape[0]
    num_batches = math.ceil(n / cfg.batch_size)
    kl_weight = cfg.kl_weight if cfg.kl_weight is not None else 1.0 / num_batches

    from .network import Adam  # shared optimizer

    params = bnn.params()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    eps_rng = np.random.default_rng([cfg.rng_seed, 0xB17])
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        order = np.random.Generator(np.random.Philox(key=[cfg.rng_seed, epoch])).permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            draws = [bnn.sample_eps(eps_rng) for _ in range(cfg.mc_train_samples)]
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                loss, grads = elbo_terms(bnn, X[idx], y_unit[idx], draws, cfg.prior_std, kl_weight)
            if not math.isfinite(loss):
                raise DivergenceError(f"divergence: non-finite ELBO at epoch {epoch}")
            if cfg.freeze_sigma:
                _zero_sigma_grads(bnn, grads)
            opt.step(params, grads)
            epoch_loss += loss
        trace.append(epoch_loss)
    return bnn, trace


def _zero_sigma_grads(bnn: VariationalNetwork, grads: list[np.ndarray]) -> None:
    # sigma head = row 1 of the final layer (weights and bias, mean and rho)
    i = len(bnn.layers) - 1
    for k in (0, 1):
        grads[4 * i + k][1, :] = 0.0
    for k in (2, 3):
        grads[4 * i + k][1] = 0.0


# ----- prediction -----------------------------------------------------------------


@dataclass(frozen=True)
class UncertaintyEstimate:
    mean: float
    aleatoric_std: float
    epistemic_std: float
    total_std: float
    lower95: float
    upper95: float

    @staticmethod
    def from_components(mean: float, aleatoric: float, epistemic: float) -> "UncertaintyEstimate":
        total = math.sqrt(aleatoric**2 + epistemic**2)
        return UncertaintyEstimate(
            mean=mean,
            aleatoric_std=aleatoric,
            epistemic_std=epistemic,
            total_std=total,
            lower95=mean - 1.96 * total,
            upper95=mean + 1.96 * total,
        )


def _draw_rng(rng_seed: int, draw: int) -> np.random.Generator:
    # per-draw stream: draw k's weights never depend on draws < k
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=rng_seed, spawn_key=(draw,))))


def mc_predictions(bnn: VariationalNetwork, X: np.ndarray, mc_samples: int, rng_seed: int):
    """Per-draw (mu, sigma) arrays in kWh, shape (mc_samples, n)."""
    if mc_samples < 2:
        raise UsageError("mc_samples must be >= 2 (std undefined below that)")
    X = np.asarray(X, dtype=np.float64)
    mus = np.empty((mc_samples, X.shape[0]))
    sigmas = np.empty((mc_samples, X.shape[0]))
    for s in range(mc_samples):
        eps = bnn.sample_eps(_draw_rng(rng_seed, s))
        mu, sigma, _, _ = bnn.forward_unit(bnn.realize(eps), X)
        mus[s] = mu * bnn.capacity
        sigmas[s] = sigma * bnn.capacity
    return mus, sigmas


def _estimates_from_draws(mus: np.ndarray, sigmas: np.ndarray) -> list[UncertaintyEstimate]:
    means = mus.mean(axis=0)
    epistemic = mus.std(axis=0, ddof=1)
    aleatoric = np.sqrt(np.mean(sigmas**2, axis=0))
    return [
        UncertaintyEstimate.from_components(float(m), float(a), float(e))
        for m, a, e in zip(means, aleatoric, epistemic)
    ]


def predict_uncertainty(bnn: VariationalNetwork, x, mc_samples: int = 200, rng_seed: int = 0) -> UncertaintyEstimate:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != bnn.input_width:
        raise DataError(f"expected {bnn.input_width} features, got {x.shape[1]}")
    mus, sigmas = mc_predictions(bnn, x, mc_samples, rng_seed)
    return _estimates_from_draws(mus, sigmas)[0]


@dataclass(frozen=True)
class ForecastPoint:
    timestamp: str
    estimate: UncertaintyEstimate
    actual: float
    high_uncertainty: bool


def forecast_series(
    bnn: VariationalNetwork,
    samples,
    mc_samples: int = 200,
    rng_seed: int = 0,
    high_quantile: float = 0.9,
) -> list[ForecastPoint]:
    """Per-hour uncertainty estimates for a time-ordered dataset.

    Flags the hours whose total std exceeds the series' ``high_quantile``
    quantile (default: top decile).
    """
    X = np.asarray(samples.features, dtype=np.float64)
    if X.shape[0] == 0:
        return []
    mus, sigmas = mc_predictions(bnn, X, mc_samples, rng_seed)
    estimates = _estimates_from_draws(mus, sigmas)
    totals = np.array([e.total_std for e in estimates])
    threshold = float(np.quantile(totals, high_quantile))
    return [
        ForecastPoint(
            timestamp=samples.timestamps[i],
            estimate=estimates[i],
            actual=float(samples.targets[i]),
            high_uncertainty=bool(totals[i] > threshold),
        )
        for i in range(X.shape[0])
    ]


def coverage(points: list[ForecastPoint]) -> float:
    """Fraction of actuals inside the 95% band."""
    if not points:
        raise DataError("empty forecast series")
    inside = sum(1 for p in points if p.estimate.lower95 <= p.actual <= p.estimate.upper95)
    return inside / len(points)


def write_forecast_csv(points: list[ForecastPoint], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "timestamp",
                "mean",
                "aleatoric_std",
                "epistemic_std",
                "total_std",
                "lower95",
                "upper95",
                "actual",
                "high_uncertainty_flag",
            ]
        )
        for p in points:
            e = p.estimate
            writer.writerow(
                [
                    p.timestamp,
                    repr(e.mean),
                    repr(e.aleatoric_std),
                    repr(e.epistemic_std),
                    repr(e.total_std),
                    repr(e.lower95),
                    repr(e.upper95),
                    repr(p.actual),
                    int(p.high_uncertainty),
                ]
            )


# ----- persistence ------------------------------------------------------------------


def vnetwork_to_dict(bnn: VariationalNetwork) -> dict:
    return {
        "schema_version": 1,
        "model": "variational",
        "input_width": bnn.input_width,
        "capacity": bnn.capacity,
        "prior_std": bnn.prior_std,
        "layers": [
            {
                "activation": l.activation,
                "weight_mean": l.weight_mean.tolist(),
                "weight_rho": l.weight_rho.tolist(),
                "bias_mean": l.bias_mean.tolist(),
                "bias_rho": l.bias_rho.tolist(),
            }
            for l in bnn.layers
        ],
        "feature_names": bnn.feature_names,
        "normalization": bnn.normalization,
    }


def vnetwork_from_dict(doc: dict) -> VariationalNetwork:
    if doc.get("schema_version") != 1:
        raise DataError(f"unsupported schema_version {doc.get('schema_version')!r}")
    return VariationalNetwork(
        layers=[
            VariationalLayer(
                weight_mean=np.asarray(l["weight_mean"], dtype=np.float64),
                weight_rho=np.asarray(l["weight_rho"], dtype=np.float64),
                bias_mean=np.asarray(l["bias_mean"], dtype=np.float64),
                bias_rho=np.asarray(l["bias_rho"], dtype=np.float64),
                activation=l["activation"],
            )
            for l in doc["layers"]
        ],
        capacity=doc["capacity"],
        prior_std=doc["prior_std"],
        input_width=doc["input_width"],
        feature_names=doc.get("feature_names"),
        normalization=doc.get("normalization"),
    )


def save_vnetwork(bnn: VariationalNetwork, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(vnetwork_to_dict(bnn), fh, indent=1)
        fh.write("\n")


def load_vnetwork(path) -> VariationalNetwork:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    if doc.get("model") != "variational":
        raise DataError("model has no weight distributions (expected a variational model file)")
    return vnetwork_from_dict(doc)
