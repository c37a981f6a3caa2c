"""End-to-end runs shared by the CLI and the HTTP service.

Each ``run_*`` function is one pipeline stage working on files: synthetic
data generation, training (deterministic classifier/regressor or the
variational network), attribution reports, and uncertainty forecasts.
Stage randomness derives from one user seed via hash(seed, stage name),
so stages can be re-run independently and whole pipelines replay
byte-identically.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from . import attribution, bayesian, data, network
from .errors import DataError, UsageError

__all__ = [
    "derive_seed",
    "default_out_dir",
    "run_synth",
    "run_train",
    "run_explain",
    "run_uncertainty",
    "HIDDEN_WIDTHS",
]

HIDDEN_WIDTHS = (50, 30, 10)
OUT_DIR_ENV = "PVXPLAIN_OUT_DIR"

METHOD_ALIASES = {
    "gradient": "gradient",
    "gxi": "gradient_x_input",
    "gradient_x_input": "gradient_x_input",
    "ig": "integrated_gradients",
    "integrated_gradients": "integrated_gradients",
    "eg": "expected_gradients",
    "expected_gradients": "expected_gradients",
    "deeplift": "deeplift",
}


def derive_seed(seed: int, stage: str) -> int:
    """Stable 32-bit stage seed from the single user seed."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_DIR_ENV, "."))


def _resolve_out(path, default_name: str) -> Path:
    if path is None:
        return default_out_dir() / default_name
    return Path(path)


# ----- synth ---------------------------------------------------------------------


def run_synth(days=885, capacity=2000.0, cloud_prob=0.25, seed=0, out=None) -> dict:
    out_path = _resolve_out(out, "synth.csv")
    records = data.generate_synthetic(
        days, capacity=capacity, cloud_prob=cloud_prob, rng_seed=derive_seed(seed, "synth")
    )
    try:
        data.write_records_csv(records, out_path)
    except OSError as exc:
        raise DataError(f"cannot write {out_path}: {exc}") from exc
    return {"records": len(records), "path": str(out_path)}


# ----- train ---------------------------------------------------------------------


def _load_records(data_path) -> list[data.RawRecord]:
    records, report = data.load_csv(data_path)
    if not records:
        raise DataError(f"no usable records in {data_path} ({report})")
    return data.clean_and_impute(records)


def _prepare_splits(records, task: str, test_fraction: float, seed: int):
    ds = data.encode(records, task)
    train_ds, test_ds = data.split(ds, test_fraction, derive_seed(seed, "split"))
    norm = data.fit_normalization(train_ds)
    return data.apply_normalization(train_ds, norm), data.apply_normalization(test_ds, norm), norm


def run_train(
    task: str,
    data_path: str,
    out=None,
    metrics_out=None,
    seed: int = 0,
    epochs: int = 200,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
    test_fraction: float = 0.1,
    capacity: float = 2000.0,
    prior_std: float = 1.0,
    kl_weight: float | None = None,
    mc_train_samples: int = 1,
) -> dict:
    if task not in ("classify", "regress", "bnn"):
        raise UsageError(f"unknown task {task!r}")
    model_path = _resolve_out(out, "model.json")
    metrics_path = _resolve_out(metrics_out, "metrics.json")
    records = _load_records(data_path)
    enc_task = "classification" if task == "classify" else "regression"
    train_ds, test_ds, norm = _prepare_splits(records, enc_task, test_fraction, seed)
    batch_size = min(batch_size, len(train_ds))

    if task == "bnn":
        cfg = bayesian.BnnTrainConfig(
            epochs=epochs,
            batch_size=batch_size,
            learning_rate=learning_rate,
            rng_seed=derive_seed(seed, "bnn-train"),
            prior_std=prior_std,
            kl_weight=kl_weight,
            mc_train_samples=mc_train_samples,
        )
        bnn, _ = bayesian.train_bnn(train_ds, cfg, hidden=HIDDEN_WIDTHS, capacity=capacity)
        bnn.feature_names = list(train_ds.feature_names)
        bnn.normalization = norm
        points = bayesian.forecast_series(
            bnn, test_ds, mc_samples=200, rng_seed=derive_seed(seed, "bnn-metrics")
        )
        means = np.array([p.estimate.mean for p in points])
        actual = np.array([p.actual for p in points])
        metrics = {
            "task": task,
            "rmse": float(np.sqrt(np.mean((means - actual) ** 2))),
            "coverage95": bayesian.coverage(points),
            "n_train": len(train_ds),
            "n_test": len(test_ds),
        }
        bayesian.save_vnetwork(bnn, model_path)
    else:
        head = "sigmoid_classifier" if task == "classify" else "capacity_scaled"
        net = network.build_network(
            train_ds.features.shape[1],
            [network.LayerSpec(w) for w in HIDDEN_WIDTHS],
            head=head,
            capacity=capacity if head == "capacity_scaled" else None,
            rng_seed=derive_seed(seed, "init"),
        )
        cfg = network.TrainConfig(
            loss="binary_cross_entropy" if task == "classify" else "mse",
            epochs=epochs,
            batch_size=batch_size,
            learning_rate=learning_rate,
            rng_seed=derive_seed(seed, "train"),
        )
        trained, _ = network.train(net, train_ds, cfg)
        trained.feature_names = list(train_ds.feature_names)
        trained.normalization = norm
        if task == "classify":
            m = network.evaluate_classifier(trained, test_ds)
            majority = max(float(np.mean(test_ds.targets)), 1.0 - float(np.mean(test_ds.targets)))
            metrics = {
                "task": task,
                "accuracy": m.accuracy,
                "tp": m.tp,
                "tn": m.tn,
                "fp": m.fp,
                "fn": m.fn,
                "majority_baseline": majority,
                "n_train": len(train_ds),
                "n_test": len(test_ds),
            }
        else:
            rmse = network.evaluate_regressor(trained, test_ds)
            metrics = {
                "task": task,
                "rmse": rmse,
                "rmse_fraction_of_capacity": rmse / capacity,
                "n_train": len(train_ds),
                "n_test": len(test_ds),
            }
        network.save_network(trained, model_path)

    with open(metrics_path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=1)
        fh.write("\n")
    return {"metrics": metrics, "model_path": str(model_path), "metrics_path": str(metrics_path)}


# ----- explain ---------------------------------------------------------------------


def _dataset_for_model(data_path, task: str, normalization: dict | None) -> data.Dataset:
    records = _load_records(data_path)
    ds = data.encode(records, task)
    if normalization is None:
        normalization = data.fit_normalization(ds)
    return data.apply_normalization(ds, normalization)


def run_explain(
    model: str,
    data_path: str,
    method: str,
    baseline: str = "zero",
    sample_id: int | None = None,
    global_mode: bool = False,
    steps: int = 300,
    mc_samples: int = 200,
    seed: int = 0,
    out_prefix=None,
) -> dict:
    if method not in METHOD_ALIASES:
        raise UsageError(f"unknown method {method!r} (use one of {sorted(set(METHOD_ALIASES))})")
    method = METHOD_ALIASES[method]
    if baseline not in ("zero", "mean", "dataset"):
        raise UsageError(f"unknown baseline {baseline!r}")
    if global_mode == (sample_id is not None):
        raise UsageError("choose exactly one of --sample-id or --global")
    if method == "expected_gradients" and baseline != "dataset":
        raise UsageError("expected-gradients requires dataset background")
    if method != "expected_gradients" and baseline == "dataset":
        raise UsageError(f"{method} needs a zero or mean baseline, not dataset")

    net = network.load_network(model)
    task = "classification" if net.head == "sigmoid_classifier" else "regression"
    ds = _dataset_for_model(data_path, task, net.normalization)
    if net.feature_names and list(ds.feature_names) != list(net.feature_names):
        raise DataError("data features do not match the model's feature names")

    prefix = _resolve_out(out_prefix, "explain")
    base = (
        attribution.Baseline.fixed(ds.features.mean(axis=0))
        if baseline == "mean"
        else attribution.Baseline.zero()
    )
    eg_seed = derive_seed(seed, "eg")
    params: dict = {}
    if method == "integrated_gradients":
        params = {"baseline": base, "steps": steps}
    elif method == "deeplift":
        params = {"baseline": base}
    elif method == "expected_gradients":
        params = {"background": ds.features, "mc_samples": mc_samples, "rng_seed": eg_seed}
    else:
        params = {"baseline": base}

    if global_mode:
        importance = attribution.global_importance(net, ds, method, **params)
        rows = attribution.summary_plot_data(net, ds, method, **params)
        importance_path = Path(f"{prefix}.importance.csv")
        summary_path = Path(f"{prefix}.summary.csv")
        attribution.write_importance_csv(importance, importance_path)
        attribution.write_summary_csv(rows, summary_path)
        return {
            "mode": "global",
            "method": method,
            "importance": [[name, value] for name, value in importance],
            "rows": len(rows),
            "importance_path": str(importance_path),
            "summary_path": str(summary_path),
        }

    if not 0 <= sample_id < len(ds):
        raise DataError(f"sample-id {sample_id} outside dataset of {len(ds)} rows")
    x = ds.features[sample_id]
    groups = ds.groups()
    if method == "gradient":
        report = attribution.attr_gradient(net, x, baseline=base, groups=groups)
    elif method == "gradient_x_input":
        report = attribution.attr_gradient_x_input(net, x, baseline=base, groups=groups)
    elif method == "integrated_gradients":
        report = attribution.attr_integrated_gradients(net, x, baseline=base, steps=steps, groups=groups)
    elif method == "deeplift":
        report = attribution.attr_deeplift(net, x, baseline=base, groups=groups)
    else:
        report = attribution.attr_expected_gradients(
            net, x, ds.features, mc_samples=mc_samples, rng_seed=eg_seed, groups=groups
        )
    report_path = Path(f"{prefix}.report.json")
    force_path = Path(f"{prefix}.force.csv")
    attribution.write_report_json(report, report_path)
    attribution.write_force_csv(report, force_path)
    return {
        "mode": "local",
        "method": method,
        "sample_id": sample_id,
        "report": attribution.report_to_dict(report),
        "force": attribution.force_plot_data(report),
        "report_path": str(report_path),
        "force_path": str(force_path),
    }


# ----- uncertainty ---------------------------------------------------------------------


def run_uncertainty(model: str, data_path: str, mc_samples: int = 200, seed: int = 0, out=None) -> dict:
    bnn = bayesian.load_vnetwork(model)
    ds = _dataset_for_model(data_path, "regression", bnn.normalization)
    if bnn.feature_names and list(ds.feature_names) != list(bnn.feature_names):
        raise DataError("data features do not match the model's feature names")
    out_path = _resolve_out(out, "forecast.csv")
    points = bayesian.forecast_series(
        bnn, ds, mc_samples=mc_samples, rng_seed=derive_seed(seed, "uncertainty")
    )
    bayesian.write_forecast_csv(points, out_path)
    cov = bayesian.coverage(points)
    return {"rows": len(points), "coverage": cov, "path": str(out_path)}
