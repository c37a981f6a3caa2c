"""Gradient-based feature attributions for trained forecasters.

Five methods over any dense network: plain Gradient, Gradient*Input,
Integrated Gradients (midpoint quadrature on the baseline-to-input path),
Expected Gradients (baselines drawn from a background dataset), and
DeepLIFT with the Rescale rule (a single modified backward pass whose
nonlinearity multipliers are finite differences between paired forward
passes).

Every report carries the completeness accounting: base value, predicted
value, and the residual predicted - base - sum(attributions). IG drives
the residual to zero as steps grow; DeepLIFT-Rescale is exact up to
rounding; plain gradients offer no such guarantee (the residual is still
reported).

One-hot hour columns are aggregated into a single "Index" feature when a
grouping is supplied, matching how per-case tables report them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError
from .network import Network, _activate, _activation_grad

__all__ = [
    "Baseline",
    "AttributionReport",
    "attr_gradient",
    "attr_gradient_x_input",
    "attr_integrated_gradients",
    "attr_expected_gradients",
    "attr_deeplift",
    "global_importance",
    "summary_plot_data",
    "force_plot_data",
    "report_to_dict",
    "write_report_json",
    "write_report_csv",
    "write_importance_csv",
    "write_summary_csv",
    "write_force_csv",
]

METHODS = ("gradient", "gradient_x_input", "integrated_gradients", "expected_gradients", "deeplift")

# threshold below which the Rescale finite difference degenerates and the
# exact local derivative takes over
_DEGENERATE_DELTA = 1e-7


@dataclass(frozen=True)
class Baseline:
    kind: str  # "zero" | "fixed" | "dataset"
    vector: np.ndarray | None = None
    background: np.ndarray | None = None
    mc_samples: int = 1

    @staticmethod
    def zero() -> "Baseline":
        return Baseline("zero")

    @staticmethod
    def fixed(vector) -> "Baseline":
        return Baseline("fixed", vector=np.asarray(vector, dtype=np.float64))

    @staticmethod
    def dataset(background, mc_samples: int = 200) -> "Baseline":
        bg = np.asarray(background, dtype=np.float64)
        if bg.ndim != 2 or bg.shape[0] == 0:
            raise DataError("dataset baseline needs a nonempty (n, d) background")
        if mc_samples < 1:
            raise UsageError("mc_samples must be >= 1")
        return Baseline("dataset", background=bg, mc_samples=mc_samples)

    def resolve(self, width: int) -> np.ndarray:
        """Concrete baseline vector for path methods (zero or fixed only)."""
        if self.kind == "zero":
            return np.zeros(width)
        if self.kind == "fixed":
            if self.vector is None or self.vector.shape != (width,):
                raise UsageError(f"fixed baseline must have length {width}")
            return self.vector
        raise UsageError(f"{self.kind} baseline is only valid for expected_gradients")


@dataclass
class AttributionReport:
    method: str
    feature_names: list[str]
    attributions: np.ndarray
    base_value: float
    predicted_value: float
    completeness_residual: float
    baseline: dict

    def sum(self) -> float:
        return float(np.sum(self.attributions))


def _feature_names(net: Network, groups) -> list[str]:
    if groups is not None:
        return [name for name, _ in groups]
    if net.feature_names:
        return list(net.feature_names)
    return [f"x{i}" for i in range(net.input_width)]


def _aggregate(attr: np.ndarray, groups) -> np.ndarray:
    if groups is None:
        return attr
    return np.array([float(np.sum(attr[cols])) for _, cols in groups])


def _as_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != net.input_width:
        raise DataError(f"expected {net.input_width} features, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite feature values")
    return x


def _report(method, net, x, attr_cols, base_value, baseline_record, groups) -> AttributionReport:
    if not np.all(np.isfinite(attr_cols)):
        raise DataError(f"{method} produced non-finite attributions")
    predicted = float(net.predict_batch(x[None])[0])
    attributions = _aggregate(attr_cols, groups)
    residual = predicted - base_value - float(np.sum(attr_cols))
    return AttributionReport(
        method=method,
        feature_names=_feature_names(net, groups),
        attributions=attributions,
        base_value=float(base_value),
        predicted_value=predicted,
        completeness_residual=residual,
        baseline=baseline_record,
    )


# ----- the five methods -----------------------------------------------------


def attr_gradient(net: Network, x, baseline: Baseline = None, groups=None) -> AttributionReport:
    """Raw input gradient at x; prone to saturation, residual not controlled."""
    x = _as_input(net, x)
    baseline = baseline or Baseline.zero()
    xbar = baseline.resolve(net.input_width)
    grad = net.input_gradients(x[None])[0]
    base = float(net.predict_batch(xbar[None])[0])
    return _report("gradient", net, x, grad, base, _baseline_record(baseline), groups)


def attr_gradient_x_input(net: Network, x, baseline: Baseline = None, groups=None) -> AttributionReport:
    """Gradient scaled by the input itself (marginal-effect view)."""
    x = _as_input(net, x)
    baseline = baseline or Baseline.zero()
    xbar = baseline.resolve(net.input_width)
    grad = net.input_gradients(x[None])[0]
    base = float(net.predict_batch(xbar[None])[0])
    return _report("gradient_x_input", net, x, x * grad, base, _baseline_record(baseline), groups)


def _ig_columns(net: Network, X: np.ndarray, xbar: np.ndarray, steps: int) -> np.ndarray:
    """Midpoint-rule IG for every row of X against one baseline; (n, d)."""
    diff = X - xbar
    total = np.zeros_like(X)
    for k in range(steps):
        alpha = (k + 0.5) / steps
        total += net.input_gradients(xbar + alpha * diff)
    return diff * (total / steps)


def attr_integrated_gradients(
    net: Network, x, baseline: Baseline = None, steps: int = 300, groups=None
) -> AttributionReport:
    """Average path gradients from the baseline to x, scaled by (x - baseline)."""
    if steps < 1:
        raise UsageError(f"steps must be >= 1, got {steps}")
    x = _as_input(net, x)
    baseline = baseline or Baseline.zero()
    xbar = baseline.resolve(net.input_width)
    attr = _ig_columns(net, x[None], xbar, steps)[0]
    base = float(net.predict_batch(xbar[None])[0])
    record = _baseline_record(baseline)
    record["steps"] = steps
    return _report("integrated_gradients", net, x, attr, base, record, groups)


def attr_expected_gradients(
    net: Network,
    x,
    background,
    mc_samples: int = 200,
    rng_seed: int = 0,
    steps_per_baseline: int | None = None,
    groups=None,
) -> AttributionReport:
    """IG averaged over baselines drawn uniformly from a background set.

    Each draw samples a baseline row and an interpolation point alpha ~
    U(0,1); with ``steps_per_baseline`` the alpha draw is replaced by the
    midpoint grid (then a single-row background reproduces plain IG). The
    base value is the mean prediction over the full background.
    """
    x = _as_input(net, x)
    bg = background.features if hasattr(background, "features") else background
    bg = np.asarray(bg, dtype=np.float64)
    if bg.ndim != 2 or bg.shape[0] == 0:
        raise DataError("expected_gradients needs a nonempty background dataset")
    if bg.shape[1] != net.input_width:
        raise DataError(f"background width {bg.shape[1]} != input width {net.input_width}")
    if mc_samples < 1:
        raise UsageError("mc_samples must be >= 1")
    rng = np.random.default_rng(rng_seed)
    picks = bg[rng.integers(0, bg.shape[0], size=mc_samples)]
    diff = x[None, :] - picks  # (s, d)
    if steps_per_baseline is None:
        alphas = rng.uniform(size=mc_samples)[:, None]
        grads = net.input_gradients(picks + alphas * diff)
        attr = np.mean(diff * grads, axis=0)
    else:
        if steps_per_baseline < 1:
            raise UsageError("steps_per_baseline must be >= 1")
        alphas = (np.arange(steps_per_baseline) + 0.5) / steps_per_baseline
        total = np.zeros_like(diff)
        for alpha in alphas:
            total += net.input_gradients(picks + alpha * diff)
        attr = np.mean(diff * total / steps_per_baseline, axis=0)
    base = float(np.mean(net.predict_batch(bg)))
    record = {"kind": "dataset", "size": int(bg.shape[0]), "mc_samples": mc_samples, "rng_seed": rng_seed}
    if steps_per_baseline is not None:
        record["steps_per_baseline"] = steps_per_baseline
    return _report("expected_gradients", net, x, attr, base, record, groups)


def _deeplift_columns(net: Network, X: np.ndarray, xbar: np.ndarray) -> np.ndarray:
    """Rescale-rule multipliers times (x - baseline) for every row; (n, d).

    Each nonlinearity's local derivative is replaced by the secant slope
    (act(z) - act(zbar)) / (z - zbar) from paired forward passes; the
    secant degenerates to the exact derivative when |z - zbar| < 1e-7.
    Linear pieces (dense layers, the capacity scale) pass through exactly,
    so attributions telescope to f(x) - f(xbar) up to rounding.
    """
    pre_x, _ = net.forward_trace(X)
    pre_b, _ = net.forward_trace(np.broadcast_to(xbar, X.shape))
    G = np.full((X.shape[0], 1), net._head_scale())
    for layer, Zx, Zb in zip(reversed(net.layers), reversed(pre_x), reversed(pre_b)):
        delta = Zx - Zb
        degenerate = np.abs(delta) < _DEGENERATE_DELTA
        safe = np.where(degenerate, 1.0, delta)
        secant = (_activate(layer.activation, Zx) - _activate(layer.activation, Zb)) / safe
        multiplier = np.where(degenerate, _activation_grad(layer.activation, Zx), secant)
        G = (G * multiplier) @ layer.weights
    return (X - xbar) * G


def attr_deeplift(net: Network, x, baseline: Baseline = None, groups=None) -> AttributionReport:
    """DeepLIFT-Rescale: one modified backward pass against the baseline."""
    for layer in net.layers:
        if layer.activation not in ("relu", "sigmoid", "identity"):
            raise UsageError(f"deeplift does not support activation {layer.activation!r}")
    x = _as_input(net, x)
    baseline = baseline or Baseline.zero()
    xbar = baseline.resolve(net.input_width)
    attr = _deeplift_columns(net, x[None], xbar)[0]
    base = float(net.predict_batch(xbar[None])[0])
    return _report("deeplift", net, x, attr, base, _baseline_record(baseline), groups)


def _baseline_record(baseline: Baseline) -> dict:
    record: dict = {"kind": baseline.kind}
    if baseline.kind == "fixed":
        record["vector"] = [float(v) for v in baseline.vector]
    return record


# ----- dataset-level views ----------------------------------------------------


def _attribution_matrix(net: Network, X: np.ndarray, method: str, **params) -> np.ndarray:
    """Per-sample, per-input-column attributions for a whole feature matrix."""
    if method == "gradient":
        return net.input_gradients(X)
    if method == "gradient_x_input":
        return X * net.input_gradients(X)
    if method == "integrated_gradients":
        baseline = params.get("baseline") or Baseline.zero()
        steps = params.get("steps", 300)
        if steps < 1:
            raise UsageError(f"steps must be >= 1, got {steps}")
        return _ig_columns(net, X, baseline.resolve(net.input_width), steps)
    if method == "deeplift":
        baseline = params.get("baseline") or Baseline.zero()
        return _deeplift_columns(net, X, baseline.resolve(net.input_width))
    if method == "expected_gradients":
        bg = params.get("background")
        bg = bg.features if hasattr(bg, "features") else bg
        if bg is None:
            raise UsageError("expected_gradients requires dataset background")
        bg = np.asarray(bg, dtype=np.float64)
        mc_samples = params.get("mc_samples", 200)
        rng = np.random.default_rng(params.get("rng_seed", 0))
        total = np.zeros_like(X)
        for _ in range(mc_samples):
            picks = bg[rng.integers(0, bg.shape[0], size=X.shape[0])]
            alphas = rng.uniform(size=X.shape[0])[:, None]
            diff = X - picks
            total += diff * net.input_gradients(picks + alphas * diff)
        return total / mc_samples
    raise UsageError(f"unknown attribution method {method!r}")


def global_importance(net: Network, data, method: str, **params) -> list[tuple[str, float]]:
    """Mean |attribution| per display feature, sorted descending.

    One-hot hour columns are summed per sample before the magnitude, so
    the hour block reports as a single "Index" row.
    """
    X = np.asarray(data.features, dtype=np.float64)
    if X.shape[0] == 0:
        raise DataError("cannot rank features on an empty dataset")
    cols = _attribution_matrix(net, X, method, **params)
    out = []
    for name, group in data.groups():
        per_sample = cols[:, group].sum(axis=1)
        out.append((name, float(np.mean(np.abs(per_sample)))))
    out.sort(key=lambda item: item[1], reverse=True)
    return out


def summary_plot_data(net: Network, data, method: str, **params) -> list[dict]:
    """(sample, feature) records pairing raw feature values with attributions."""
    X = np.asarray(data.features, dtype=np.float64)
    if X.shape[0] == 0:
        raise DataError("cannot summarize an empty dataset")
    cols = _attribution_matrix(net, X, method, **params)
    rows = []
    for i in range(X.shape[0]):
        for name, group in data.groups():
            rows.append(
                {
                    "sample_id": i,
                    "feature": name,
                    "feature_value": data.raw_value(i, name),
                    "attribution": float(cols[i, group].sum()),
                }
            )
    return rows


def force_plot_data(report: AttributionReport) -> dict:
    """Segments sorted by |contribution| descending, plus the endpoints."""
    order = np.argsort(-np.abs(report.attributions), kind="stable")
    return {
        "base_value": report.base_value,
        "predicted_value": report.predicted_value,
        "segments": [
            (report.feature_names[i], float(report.attributions[i])) for i in order
        ],
    }


# ----- export ------------------------------------------------------------------


def report_to_dict(report: AttributionReport) -> dict:
    return {
        "method": report.method,
        "baseline": report.baseline,
        "feature_names": list(report.feature_names),
        "attributions": [float(v) for v in report.attributions],
        "base_value": report.base_value,
        "predicted_value": report.predicted_value,
        "completeness_residual": report.completeness_residual,
    }


def write_report_json(report: AttributionReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, indent=1)
        fh.write("\n")


def write_report_csv(report: AttributionReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "attribution"])
        for name, value in zip(report.feature_names, report.attributions):
            writer.writerow([name, repr(float(value))])


def write_force_csv(report: AttributionReport, path) -> None:
    force = force_plot_data(report)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "contribution"])
        writer.writerow(["base_value", repr(force["base_value"])])
        for name, value in force["segments"]:
            writer.writerow([name, repr(value)])
        writer.writerow(["predicted_value", repr(force["predicted_value"])])


def write_importance_csv(importance: list[tuple[str, float]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "importance"])
        for name, value in importance:
            writer.writerow([name, repr(float(value))])


def write_summary_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "feature", "feature_value", "attribution"])
        for row in rows:
            writer.writerow(
                [
                    row["sample_id"],
                    row["feature"],
                    repr(row["feature_value"]),
                    repr(row["attribution"]),
                ]
            )
