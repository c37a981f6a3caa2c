"""Command-line client for the forecasting/explainability pipeline.

Four subcommands mirror the pipeline stages::

    pvxplain synth --days 885 --seed 0 --out data.csv
    pvxplain train --task classify --data data.csv --out model.json
    pvxplain explain --model model.json --data data.csv --method ig --global
    pvxplain uncertainty --model bnn.json --data held_out.csv --out band.csv

Reports land in files; stdout carries one summary line per run. A config
file (``--config``, flat key=value lines, keys named like the flags) sets
defaults that explicit flags override. When an output path is omitted the
file goes to $PVXPLAIN_OUT_DIR (or the working directory).

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .errors import DataError, NumericError, UsageError

_BOOL_TRUE = ("1", "true", "yes", "on")


def _bool(text: str) -> bool:
    return str(text).strip().lower() in _BOOL_TRUE


# per-command option tables: name -> (converter, default); None default means
# "required after config merge" for entries listed in _REQUIRED
_OPTIONS = {
    "synth": {
        "days": (int, 885),
        "capacity": (float, 2000.0),
        "cloud_prob": (float, 0.25),
        "seed": (int, 0),
        "out": (str, None),
    },
    "train": {
        "task": (str, None),
        "data": (str, None),
        "out": (str, None),
        "metrics_out": (str, None),
        "seed": (int, 0),
        "epochs": (int, 200),
        "batch_size": (int, 32),
        "learning_rate": (float, 1e-3),
        "test_fraction": (float, 0.1),
        "capacity": (float, 2000.0),
        "prior_std": (float, 1.0),
        "kl_weight": (float, None),
        "mc_train_samples": (int, 1),
    },
    "explain": {
        "model": (str, None),
        "data": (str, None),
        "method": (str, None),
        "baseline": (str, "zero"),
        "sample_id": (int, None),
        "global": (_bool, False),
        "steps": (int, 300),
        "mc_samples": (int, 200),
        "seed": (int, 0),
        "out_prefix": (str, None),
    },
    "uncertainty": {
        "model": (str, None),
        "data": (str, None),
        "mc_samples": (int, 200),
        "seed": (int, 0),
        "out": (str, None),
    },
}

_REQUIRED = {
    "synth": (),
    "train": ("task", "data"),
    "explain": ("model", "data", "method"),
    "uncertainty": ("model", "data"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pvxplain",
        description="Train, explain, and uncertainty-quantify PV exceedance forecasters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in _OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="key=value defaults file")
        for name, (conv, _) in options.items():
            flag = "--" + name.replace("_", "-")
            if conv is _bool:
                p.add_argument(flag, dest=name, action="store_true", default=argparse.SUPPRESS)
            else:
                p.add_argument(flag, dest=name, type=conv, default=argparse.SUPPRESS)
    return parser


def _parse_config(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{line_no}: expected key=value, got {line!r}")
                key, value = line.split("=", 1)
                values[key.strip().replace("-", "_")] = value.strip()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return values


def _merge(command: str, args: argparse.Namespace) -> dict:
    options = _OPTIONS[command]
    merged = {name: default for name, (_, default) in options.items()}
    if args.config:
        for key, text in _parse_config(args.config).items():
            if key not in options:
                raise UsageError(f"unknown config key {key!r} for {command}")
            conv, _ = options[key]
            try:
                merged[key] = conv(text)
            except ValueError as exc:
                raise UsageError(f"bad config value {key}={text!r}: {exc}") from exc
    for key, value in vars(args).items():
        if key in options:
            merged[key] = value
    for key in _REQUIRED[command]:
        if merged[key] is None:
            raise UsageError(f"missing required option --{key.replace('_', '-')}")
    return merged


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = _merge(args.command, args)
        if args.command == "synth":
            result = pipeline.run_synth(
                days=opts["days"],
                capacity=opts["capacity"],
                cloud_prob=opts["cloud_prob"],
                seed=opts["seed"],
                out=opts["out"],
            )
            print(f"{result['records']} records written to {result['path']}")
        elif args.command == "train":
            result = pipeline.run_train(
                task=opts["task"],
                data_path=opts["data"],
                out=opts["out"],
                metrics_out=opts["metrics_out"],
                seed=opts["seed"],
                epochs=opts["epochs"],
                batch_size=opts["batch_size"],
                learning_rate=opts["learning_rate"],
                test_fraction=opts["test_fraction"],
                capacity=opts["capacity"],
                prior_std=opts["prior_std"],
                kl_weight=opts["kl_weight"],
                mc_train_samples=opts["mc_train_samples"],
            )
            metrics = result["metrics"]
            if opts["task"] == "classify":
                summary = f"accuracy={metrics['accuracy']:.4f}"
            else:
                summary = f"rmse={metrics['rmse']:.2f} kWh"
            print(f"trained {opts['task']}: {summary}; model {result['model_path']}, metrics {result['metrics_path']}")
        elif args.command == "explain":
            result = pipeline.run_explain(
                model=opts["model"],
                data_path=opts["data"],
                method=opts["method"],
                baseline=opts["baseline"],
                sample_id=opts["sample_id"],
                global_mode=opts["global"],
                steps=opts["steps"],
                mc_samples=opts["mc_samples"],
                seed=opts["seed"],
                out_prefix=opts["out_prefix"],
            )
            if result["mode"] == "global":
                print(f"global importance written to {result['importance_path']} (summary {result['summary_path']})")
            else:
                residual = result["report"]["completeness_residual"]
                print(
                    f"report written to {result['report_path']} "
                    f"(force plot {result['force_path']}, residual {residual:.3e})"
                )
        elif args.command == "uncertainty":
            result = pipeline.run_uncertainty(
                model=opts["model"],
                data_path=opts["data"],
                mc_samples=opts["mc_samples"],
                seed=opts["seed"],
                out=opts["out"],
            )
            print(
                f"coverage {result['coverage']:.4f} of actuals within the 95% band; "
                f"{result['rows']} rows written to {result['path']}"
            )
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
