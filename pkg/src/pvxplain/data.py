"""Hourly PV/load dataset handling: ingestion, cleaning, encoding, synthesis.

Input CSV schema (header required)::

    timestamp,index,stemp,irra,ptemp,hpow,dpow,hload,target_pv,target_load

Timestamps are ISO-8601, index is the hour of day. Only daylight hours
7..18 are retained. Feature floats may be empty (imputed later); any
other unparseable or non-finite field rejects the row.

All model features are z-normalized against training statistics except
the 12 one-hot hour columns. Raw values are kept alongside for plot
exports.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta

import numpy as np

from .errors import DataError, UsageError

__all__ = [
    "RawRecord",
    "RejectionReport",
    "Dataset",
    "load_csv",
    "write_records_csv",
    "clean_and_impute",
    "encode",
    "encode_and_normalize",
    "fit_normalization",
    "apply_normalization",
    "split",
    "generate_synthetic",
    "expected_pv",
    "export_dataset",
    "HOURS",
    "FLOAT_FEATURES",
    "CSV_COLUMNS",
]

HOURS = tuple(range(7, 19))  # daylight hours kept after filtering
FLOAT_FEATURES = ("STemp", "Irra", "PTemp", "HPow", "DPow", "HLoad")
REGRESSION_FLOATS = FLOAT_FEATURES[:-1]  # HLoad excluded for PV regression
CSV_COLUMNS = (
    "timestamp",
    "index",
    "stemp",
    "irra",
    "ptemp",
    "hpow",
    "dpow",
    "hload",
    "target_pv",
    "target_load",
)
_NONNEGATIVE = ("hpow", "dpow", "hload", "target_pv", "target_load")
# power/irradiance columns: imputing across night hours would fabricate
# generation, so interpolation stays within one calendar day
_DAY_BOUNDED = ("Irra", "HPow", "DPow")


@dataclass
class RawRecord:
    timestamp: datetime
    index: int
    stemp: float
    irra: float
    ptemp: float
    hpow: float
    dpow: float
    hload: float
    target_pv: float
    target_load: float

    @property
    def target_exceed(self) -> int:
        return 1 if self.target_pv > self.target_load else 0

    def float_value(self, name: str) -> float:
        return getattr(self, name.lower())

    def set_float(self, name: str, value: float) -> None:
        setattr(self, name.lower(), float(value))


@dataclass
class RejectionReport:
    rejected: list[tuple[int, str]] = field(default_factory=list)
    night_dropped: int = 0

    def __str__(self) -> str:
        return f"{len(self.rejected)} rejected, {self.night_dropped} night rows dropped"


def load_csv(path) -> tuple[list[RawRecord], RejectionReport]:
    """Parse the input CSV; returns kept records plus a rejection report."""
    report = RejectionReport()
    records: list[RawRecord] = []
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in CSV_COLUMNS:
            if col not in header:
                raise DataError(f"missing required column: {col}")
        for line_no, row in enumerate(reader, start=2):
            try:
                record = _parse_row(row)
            except ValueError as exc:
                report.rejected.append((line_no, str(exc)))
                continue
            if record.index not in HOURS:
                report.night_dropped += 1
                continue
            records.append(record)
    return records, report


def _parse_row(row: dict) -> RawRecord:
    try:
        ts = datetime.fromisoformat(row["timestamp"].strip())
    except ValueError:
        raise ValueError(f"bad timestamp {row['timestamp']!r}")
    try:
        hour = int(row["index"])
    except ValueError:
        raise ValueError(f"bad index {row['index']!r}")
    if not 0 <= hour <= 23:
        raise ValueError(f"index {hour} is not an hour of day")
    values = {}
    for col in CSV_COLUMNS[2:]:
        raw = row[col].strip()
        if raw == "" and col not in ("target_pv", "target_load"):
            values[col] = math.nan  # missing feature, imputed later
            continue
        try:
            v = float(raw)
        except ValueError:
            raise ValueError(f"bad {col} {raw!r}")
        if not math.isfinite(v):
            raise ValueError(f"non-finite {col} {raw!r}")
        if col in _NONNEGATIVE and v < 0.0:
            raise ValueError(f"negative {col} {v}")
        values[col] = v
    return RawRecord(timestamp=ts, index=hour, **values)


def write_records_csv(records: list[RawRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [r.timestamp.isoformat(), r.index]
                + [repr(getattr(r, c)) for c in CSV_COLUMNS[2:]]
            )


# ----- cleaning ---------------------------------------------------------------


def clean_and_impute(records: list[RawRecord], zmax: float = 5.0) -> list[RawRecord]:
    """Flag |z| > zmax feature values as outliers and impute all gaps.

    Imputation is linear in time between the nearest valid neighbors;
    leading/trailing gaps take the nearest valid value. Power columns
    never interpolate across day boundaries (whole-missing days fall back
    to the nearest valid value overall).
    """
    if not records:
        return []
    out = [replace(r) for r in sorted(records, key=lambda r: r.timestamp)]
    t_hours = np.array([r.timestamp.timestamp() / 3600.0 for r in out])
    days = np.array([r.timestamp.toordinal() for r in out])
    for name in FLOAT_FEATURES:
        values = np.array([r.float_value(name) for r in out])
        valid = np.isfinite(values)
        if not valid.any():
            raise DataError(f"column {name} has no valid values")
        mean = float(np.mean(values[valid]))
        std = float(np.std(values[valid]))
        if std > 0.0:
            with np.errstate(invalid="ignore"):
                valid &= ~(np.abs(values - mean) > zmax * std)
        if valid.all():
            continue
        if not valid.any():
            raise DataError(f"column {name} has no valid values after outlier removal")
        if name in _DAY_BOUNDED:
            filled = values.copy()
            for day in np.unique(days):
                in_day = days == day
                ok = in_day & valid
                if ok.any():
                    filled[in_day] = np.interp(t_hours[in_day], t_hours[ok], values[ok])
                else:
                    filled[in_day] = np.interp(t_hours[in_day], t_hours[valid], values[valid])
        else:
            filled = np.interp(t_hours, t_hours[valid], values[valid])
        for r, v in zip(out, filled):
            r.set_float(name, v)
    return out


# ----- encoding and normalization ---------------------------------------------


@dataclass
class Dataset:
    task: str  # "classification" | "regression"
    feature_names: list[str]
    features: np.ndarray  # (n, width); z-normalized once normalization is set
    targets: np.ndarray
    timestamps: list[str]
    hours: np.ndarray
    raw_floats: np.ndarray  # (n, len(float_names)) pre-normalization values
    float_names: list[str]
    target_load: np.ndarray
    normalization: dict | None = None

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(
            task=self.task,
            feature_names=list(self.feature_names),
            features=self.features[idx].copy(),
            targets=self.targets[idx].copy(),
            timestamps=[self.timestamps[i] for i in idx],
            hours=self.hours[idx].copy(),
            raw_floats=self.raw_floats[idx].copy(),
            float_names=list(self.float_names),
            target_load=self.target_load[idx].copy(),
            normalization=dict(self.normalization) if self.normalization else None,
        )

    def groups(self) -> list[tuple[str, list[int]]]:
        """Display features with their model-input columns (one-hot merged)."""
        out = [("Index", list(range(len(HOURS))))]
        for j, name in enumerate(self.float_names):
            out.append((name, [len(HOURS) + j]))
        return out

    def raw_value(self, i: int, display_name: str) -> float:
        if display_name == "Index":
            return float(self.hours[i])
        return float(self.raw_floats[i, self.float_names.index(display_name)])


def encode(records: list[RawRecord], task: str) -> Dataset:
    """One-hot hour block plus raw float features; no normalization yet."""
    if not records:
        raise DataError("no records to encode")
    if task not in ("classification", "regression"):
        raise UsageError(f"unknown task {task!r}")
    float_names = list(FLOAT_FEATURES if task == "classification" else REGRESSION_FLOATS)
    n = len(records)
    onehot = np.zeros((n, len(HOURS)))
    floats = np.empty((n, len(float_names)))
    hours = np.empty(n, dtype=int)
    targets = np.empty(n)
    loads = np.empty(n)
    for i, r in enumerate(records):
        onehot[i, r.index - HOURS[0]] = 1.0
        hours[i] = r.index
        for j, name in enumerate(float_names):
            v = r.float_value(name)
            if not math.isfinite(v):
                raise DataError(
                    f"non-finite {name} at {r.timestamp.isoformat()}; run clean_and_impute first"
                )
            floats[i, j] = v
        targets[i] = r.target_exceed if task == "classification" else r.target_pv
        loads[i] = r.target_load
    names = [f"Index_{h}" for h in HOURS] + float_names
    return Dataset(
        task=task,
        feature_names=names,
        features=np.hstack([onehot, floats]),
        targets=targets,
        timestamps=[r.timestamp.isoformat() for r in records],
        hours=hours,
        raw_floats=floats.copy(),
        float_names=float_names,
        target_load=loads,
    )


def fit_normalization(ds: Dataset) -> dict:
    """Per-float mean/std from this dataset (call on the training split only)."""
    norm = {}
    for j, name in enumerate(ds.float_names):
        col = ds.raw_floats[:, j]
        mean = float(np.mean(col))
        std = float(np.std(col))
        if std == 0.0:
            raise DataError(f"zero-variance column {name}: cannot normalize")
        norm[name] = {"mean": mean, "std": std}
    return norm


def apply_normalization(ds: Dataset, normalization: dict) -> Dataset:
    out = ds.subset(np.arange(len(ds)))
    for j, name in enumerate(ds.float_names):
        stats = normalization[name]
        out.features[:, len(HOURS) + j] = (ds.raw_floats[:, j] - stats["mean"]) / stats["std"]
    out.normalization = {name: dict(v) for name, v in normalization.items()}
    return out


def encode_and_normalize(records: list[RawRecord], task: str, normalization: dict | None = None) -> Dataset:
    """Encode then z-normalize; fits statistics on ``records`` when none given."""
    ds = encode(records, task)
    if normalization is None:
        normalization = fit_normalization(ds)
    return apply_normalization(ds, normalization)


def split(ds: Dataset, test_fraction: float, rng_seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random split; both halves stay in time order.

    The permutation depends only on (seed, n), so classification and
    regression datasets built from the same records share the split.
    """
    if not 0.0 < test_fraction < 1.0:
        raise UsageError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(ds)
    n_test = round(n * test_fraction)
    perm = np.random.default_rng(rng_seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return ds.subset(train_idx), ds.subset(test_idx)


# ----- synthetic generator ------------------------------------------------------


def expected_pv(actual_irradiance: float, panel_temp: float, capacity: float) -> float:
    """Noise-free generation: irradiance-proportional with a linear
    temperature derating above/below 25 degC (hot panels produce less)."""
    efficiency = 1.0 - 0.004 * (panel_temp - 25.0)
    return capacity * (actual_irradiance / 960.0) * efficiency * 0.92


def _season(date: datetime) -> float:
    doy = date.timetuple().tm_yday
    return 0.55 + 0.45 * math.sin(2.0 * math.pi * (doy - 81) / 365.25)


def _bell(hour: int) -> float:
    return math.exp(-((hour - 12.5) ** 2) / (2.0 * 2.8**2))


def generate_synthetic(
    days: int,
    capacity: float = 2000.0,
    cloud_prob: float = 0.25,
    rng_seed: int = 0,
) -> list[RawRecord]:
    """Deterministic synthetic PV/load series, 12 daylight records per day.

    Irradiance follows a seasonal clear-sky bell; cloud events scale it by
    uniform(0.2, 0.6). Most clouds show up in the irradiance forecast
    feature, but ~25% go unforecast — those hours are the sudden-change
    failure mode (forecast high, actual low). PV noise grows with the
    generation level, so midday hours carry the largest spread.
    """
    if days < 1:
        raise UsageError(f"days must be >= 1, got {days}")
    rng = np.random.default_rng(rng_seed)
    start = datetime(2018, 1, 1)
    records: list[RawRecord] = []
    prev_pv: dict[tuple[int, int], float] = {}  # (day, hour) -> actual pv
    prev_load: dict[tuple[int, int], float] = {}
    prev_irr: dict[tuple[int, int], float] = {}
    for day in range(-1, days):  # day -1 warms up the lag features
        date = start + timedelta(days=day)
        season = _season(date)
        for hour in range(6, 19):  # hour 6 feeds the 7:00 lags
            clear = 960.0 * season * _bell(hour)
            cloud = rng.uniform() < cloud_prob
            factor = rng.uniform(0.2, 0.6) if cloud else 1.0
            forecast_seen = (not cloud) or (rng.uniform() < 0.75)
            actual_irr = max(0.0, clear * factor * (1.0 + 0.03 * rng.normal()))
            forecast_irr = max(
                0.0,
                clear * (factor if forecast_seen else 1.0) * (1.0 + 0.06 * rng.normal()),
            )
            stemp = -2.0 + 22.0 * season + 4.0 * math.exp(-((hour - 14.5) ** 2) / 18.0)
            stemp += rng.normal(0.0, 1.2)
            last_irr = prev_irr.get((day, hour - 1), 0.0)
            ptemp = stemp + 0.028 * last_irr + rng.normal(0.0, 0.8)
            pv_clean = expected_pv(actual_irr, ptemp, capacity)
            pv = float(np.clip(pv_clean + rng.normal(0.0, 6.0 + 0.04 * max(pv_clean, 0.0)), 0.0, capacity))
            load = (
                360.0
                + 230.0 * math.exp(-((hour - 8.3) ** 2) / (2.0 * 1.5**2))
                + 290.0 * math.exp(-((hour - 17.6) ** 2) / (2.0 * 1.7**2))
                + 120.0 * (1.0 - season)
                + rng.normal(0.0, 16.0)
            )
            load = max(load, 0.0)
            prev_irr[(day, hour)] = actual_irr
            prev_pv[(day, hour)] = pv
            prev_load[(day, hour)] = load
            if day < 0 or hour not in HOURS:
                continue
            records.append(
                RawRecord(
                    timestamp=date.replace(hour=hour),
                    index=hour,
                    stemp=round(stemp, 6),
                    irra=round(forecast_irr, 6),
                    ptemp=round(ptemp, 6),
                    hpow=round(prev_pv[(day, hour - 1)], 6),
                    dpow=round(prev_pv[(day - 1, hour)], 6),
                    hload=round(prev_load[(day, hour - 1)], 6),
                    target_pv=round(pv, 6),
                    target_load=round(load, 6),
                )
            )
    return records


# ----- export -------------------------------------------------------------------


def export_dataset(ds: Dataset, path) -> None:
    """Normalized features + target CSV, with the normalization sidecar JSON."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + ds.feature_names + ["target"])
        for i in range(len(ds)):
            writer.writerow(
                [ds.timestamps[i]]
                + [repr(float(v)) for v in ds.features[i]]
                + [repr(float(ds.targets[i]))]
            )
    with open(f"{path}.norm.json", "w", encoding="utf-8") as fh:
        json.dump(ds.normalization or {}, fh, indent=1)
        fh.write("\n")
