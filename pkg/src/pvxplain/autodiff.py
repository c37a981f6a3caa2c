"""Minimal reverse-mode automatic differentiation over a scalar node graph.

A :class:`Graph` is an append-only list of scalar nodes. Builder methods
return node indices, so parent indices are always strictly smaller than the
node's own index and a plain left-to-right sweep is a valid topological
order. ``forward`` caches every node value, ``backward`` seeds one scalar
output with adjoint 1.0 and accumulates d(output)/d(node) into every node.

The engine covers exactly what dense networks, their losses, and
input-gradient queries need: add, mul, matvec, relu, sigmoid, softplus,
log, exp, square, sum, scale. Everything is float64; no broadcasting, no
higher-order derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import NumericError

__all__ = ["Graph", "Node", "TensorRef", "grad_check", "sigmoid", "softplus"]


def sigmoid(z: float) -> float:
    """Numerically stable logistic function."""
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def softplus(z: float) -> float:
    """log(1 + exp(z)) without overflow for large |z|."""
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


@dataclass(slots=True)
class Node:
    kind: str
    parents: tuple[int, ...] = ()
    value: float | None = None
    adjoint: float = 0.0
    # op-specific payload: scale factor for "scale", split point for "matvec"
    aux: float | int | None = None


@dataclass
class TensorRef:
    """Ordered view of graph nodes as a (rows, cols) tensor; cols=1 for vectors."""

    graph: "Graph"
    indices: list[int]
    shape: tuple[int, int]

    def __post_init__(self) -> None:
        rows, cols = self.shape
        if len(self.indices) != rows * cols:
            raise ValueError(
                f"tensor of shape {self.shape} needs {rows * cols} nodes, got {len(self.indices)}"
            )

    def __len__(self) -> int:
        return len(self.indices)

    def values(self) -> list[float]:
        return [self.graph.nodes[i].value for i in self.indices]


class Graph:
    """Append-only scalar computation graph."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    # ----- construction ---------------------------------------------------

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def input(self, value: float | None = None) -> int:
        return self._append(Node("input", value=None if value is None else float(value)))

    def constant(self, value: float) -> int:
        return self._append(Node("constant", value=float(value)))

    def add(self, a: int, b: int) -> int:
        return self._append(Node("add", (a, b)))

    def mul(self, a: int, b: int) -> int:
        return self._append(Node("mul", (a, b)))

    def relu(self, a: int) -> int:
        return self._append(Node("relu", (a,)))

    def sigmoid(self, a: int) -> int:
        return self._append(Node("sigmoid", (a,)))

    def softplus(self, a: int) -> int:
        return self._append(Node("softplus", (a,)))

    def log(self, a: int) -> int:
        return self._append(Node("log", (a,)))

    def exp(self, a: int) -> int:
        return self._append(Node("exp", (a,)))

    def square(self, a: int) -> int:
        return self._append(Node("square", (a,)))

    def sum(self, terms: list[int]) -> int:
        return self._append(Node("sum", tuple(terms)))

    def scale(self, a: int, factor: float) -> int:
        return self._append(Node("scale", (a,), aux=float(factor)))

    def matvec(self, rows: list[list[int]], vec: list[int]) -> list[int]:
        """Dot product of each weight row with ``vec``; one node per row.

        Parents are stored as (row weights..., vec...) with aux = len(vec).
        """
        out = []
        k = len(vec)
        for row in rows:
            if len(row) != k:
                raise ValueError("matvec row length must match vector length")
            out.append(self._append(Node("matvec", tuple(row) + tuple(vec), aux=k)))
        return out

    def vector_input(self, values) -> TensorRef:
        idx = [self.input(v) for v in values]
        return TensorRef(self, idx, (len(idx), 1))

    def set_input(self, index: int, value: float) -> None:
        node = self.nodes[index]
        if node.kind != "input":
            raise ValueError(f"node {index} is {node.kind!r}, not an input")
        node.value = float(value)

    # ----- evaluation -----------------------------------------------------

    def forward(self) -> None:
        """Compute every node value in topological (index) order."""
        nodes = self.nodes
        for i, n in enumerate(nodes):
            kind = n.kind
            if kind == "input":
                if n.value is None:
                    raise NumericError(f"uninitialized input node {i}")
            elif kind == "constant":
                pass
            elif kind == "add":
                n.value = nodes[n.parents[0]].value + nodes[n.parents[1]].value
            elif kind == "mul":
                n.value = nodes[n.parents[0]].value * nodes[n.parents[1]].value
            elif kind == "matvec":
                k = n.aux
                p = n.parents
                acc = 0.0
                for j in range(k):
                    acc += nodes[p[j]].value * nodes[p[k + j]].value
                n.value = acc
            elif kind == "relu":
                v = nodes[n.parents[0]].value
                n.value = v if v > 0.0 else 0.0
            elif kind == "sigmoid":
                n.value = sigmoid(nodes[n.parents[0]].value)
            elif kind == "softplus":
                n.value = softplus(nodes[n.parents[0]].value)
            elif kind == "log":
                n.value = math.log(nodes[n.parents[0]].value)
            elif kind == "exp":
                n.value = math.exp(nodes[n.parents[0]].value)
            elif kind == "square":
                v = nodes[n.parents[0]].value
                n.value = v * v
            elif kind == "sum":
                n.value = math.fsum(nodes[p].value for p in n.parents)
            elif kind == "scale":
                n.value = nodes[n.parents[0]].value * n.aux
            else:  # pragma: no cover - construction guards the kind set
                raise ValueError(f"unknown op kind {kind!r}")

    def backward(self, output: int | TensorRef) -> dict[int, float]:
        """Adjoint pass from a scalar output node.

        Returns d(output)/d(input) for every input node. ``forward`` must
        have run first. ReLU's derivative at exactly 0 is taken as 0.
        """
        if isinstance(output, TensorRef):
            if len(output.indices) != 1:
                raise ValueError("backward needs a scalar output, got a tensor")
            output = output.indices[0]
        nodes = self.nodes
        if nodes[output].value is None:
            raise NumericError("run forward before backward")
        for n in nodes:
            n.adjoint = 0.0
        nodes[output].adjoint = 1.0
        for i in range(output, -1, -1):
            n = nodes[i]
            a = n.adjoint
            if a == 0.0:
                continue
            kind = n.kind
            if kind in ("input", "constant"):
                continue
            p = n.parents
            if kind == "add":
                nodes[p[0]].adjoint += a
                nodes[p[1]].adjoint += a
            elif kind == "mul":
                nodes[p[0]].adjoint += a * nodes[p[1]].value
                nodes[p[1]].adjoint += a * nodes[p[0]].value
            elif kind == "matvec":
                k = n.aux
                for j in range(k):
                    nodes[p[j]].adjoint += a * nodes[p[k + j]].value
                    nodes[p[k + j]].adjoint += a * nodes[p[j]].value
            elif kind == "relu":
                if nodes[p[0]].value > 0.0:
                    nodes[p[0]].adjoint += a
            elif kind == "sigmoid":
                s = n.value
                nodes[p[0]].adjoint += a * s * (1.0 - s)
            elif kind == "softplus":
                nodes[p[0]].adjoint += a * sigmoid(nodes[p[0]].value)
            elif kind == "log":
                nodes[p[0]].adjoint += a / nodes[p[0]].value
            elif kind == "exp":
                nodes[p[0]].adjoint += a * n.value
            elif kind == "square":
                nodes[p[0]].adjoint += a * 2.0 * nodes[p[0]].value
            elif kind == "sum":
                for q in p:
                    nodes[q].adjoint += a
            elif kind == "scale":
                nodes[p[0]].adjoint += a * n.aux
        return {
            i: n.adjoint for i, n in enumerate(nodes) if n.kind == "input"
        }


def grad_check(f, grad, x, h: float = 1e-5) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``f`` maps a float vector to a scalar, ``grad`` returns the analytic
    gradient at ``x``. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    if h <= 0.0:
        raise ValueError("step h must be positive")
    x = [float(v) for v in x]
    analytic = [float(g) for g in grad(x)]
    if len(analytic) != len(x):
        raise ValueError("gradient length must match input length")
    worst = 0.0
    for i in range(len(x)):
        xp = list(x)
        xm = list(x)
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        if err > worst:
            worst = err
    return worst
