import math
from dataclasses import replace
from datetime import datetime, timedelta

import numpy as np
import pytest

from pvxplain.data import (
    HOURS,
    Dataset,
    RawRecord,
    apply_normalization,
    clean_and_impute,
    encode,
    encode_and_normalize,
    expected_pv,
    export_dataset,
    fit_normalization,
    generate_synthetic,
    load_csv,
    split,
    write_records_csv,
)
from pvxplain.errors import DataError, UsageError


def make_record(ts, hour, **over):
    base = dict(
        stemp=15.0, irra=400.0, ptemp=20.0, hpow=300.0, dpow=280.0,
        hload=450.0, target_pv=350.0, target_load=420.0,
    )
    base.update(over)
    return RawRecord(timestamp=ts, index=hour, **base)


def hourly_records(n_days=3, **over):
    start = datetime(2019, 6, 1)
    out = []
    for d in range(n_days):
        for h in HOURS:
            out.append(make_record(start + timedelta(days=d, hours=h), h, **over))
    return out


# ----- load_csv ----------------------------------------------------------------


def test_load_csv_round_trip(tmp_path):
    records = generate_synthetic(2, rng_seed=1)
    path = tmp_path / "data.csv"
    write_records_csv(records, path)
    loaded, report = load_csv(path)
    assert len(loaded) == len(records) == 24
    assert not report.rejected and report.night_dropped == 0
    assert loaded[0].timestamp == records[0].timestamp
    assert loaded[5].irra == records[5].irra


def test_load_csv_drops_night_hours(tmp_path):
    records = [make_record(datetime(2019, 6, 1, 3), 3), make_record(datetime(2019, 6, 1, 10), 10)]
    path = tmp_path / "data.csv"
    write_records_csv(records, path)
    loaded, report = load_csv(path)
    assert len(loaded) == 1 and loaded[0].index == 10
    assert report.night_dropped == 1


def test_load_csv_rejects_nan_field(tmp_path):
    path = tmp_path / "data.csv"
    good = "2019-06-01T10:00:00,10,15.0,400.0,20.0,300.0,280.0,450.0,350.0,420.0"
    bad = "2019-06-01T11:00:00,11,15.0,NaN,20.0,300.0,280.0,450.0,350.0,420.0"
    path.write_text(
        "timestamp,index,stemp,irra,ptemp,hpow,dpow,hload,target_pv,target_load\n"
        f"{good}\n{bad}\n"
    )
    loaded, report = load_csv(path)
    assert len(loaded) == 1
    assert report.rejected == [(3, "non-finite irra 'NaN'")]


def test_load_csv_missing_column(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("timestamp,index,stemp,irra,ptemp,hpow,dpow,hload,target_pv\n")
    with pytest.raises(DataError, match="target_load"):
        load_csv(path)


def test_load_csv_empty_feature_becomes_missing(tmp_path):
    path = tmp_path / "data.csv"
    row = "2019-06-01T10:00:00,10,,400.0,20.0,300.0,280.0,450.0,350.0,420.0"
    path.write_text(
        "timestamp,index,stemp,irra,ptemp,hpow,dpow,hload,target_pv,target_load\n" f"{row}\n"
    )
    loaded, report = load_csv(path)
    assert len(loaded) == 1 and math.isnan(loaded[0].stemp)
    assert not report.rejected


# ----- clean_and_impute ----------------------------------------------------------


def test_impute_single_spike_linear_midpoint():
    records = hourly_records(5)
    # neighbours 20 and 22 straddle the spike at one record
    for r, v in zip(records, np.linspace(18, 24, len(records))):
        r.ptemp = float(v)
    i = 30
    records[i - 1].ptemp = 20.0
    records[i].ptemp = 500.0
    records[i + 1].ptemp = 22.0
    cleaned = clean_and_impute(records, zmax=5.0)
    assert cleaned[i].ptemp == pytest.approx(21.0)


def test_no_outliers_records_unchanged():
    records = hourly_records(3)
    cleaned = clean_and_impute(records)
    for a, b in zip(records, cleaned):
        assert a.ptemp == b.ptemp and a.irra == b.irra


def test_injected_spikes_mostly_flagged():
    rng = np.random.default_rng(0)
    records = generate_synthetic(120, rng_seed=4)
    spiked = [replace(r) for r in records]
    hit = rng.choice(len(spiked), size=round(0.01 * len(spiked)), replace=False)
    for i in hit:
        spiked[i].stemp = 400.0 + float(rng.uniform(0, 50))  # far outside seasonal range
    cleaned = clean_and_impute(spiked, zmax=5.0)
    fixed = sum(1 for i in hit if cleaned[i].stemp != spiked[i].stemp)
    assert fixed / len(hit) >= 0.95


def test_missing_values_imputed_within_day_for_power():
    records = hourly_records(2)
    for r, v in zip(records, np.linspace(100, 340, len(records))):
        r.hpow = float(v)
    records[5].hpow = math.nan
    expected = 0.5 * (records[4].hpow + records[6].hpow)
    cleaned = clean_and_impute(records)
    assert cleaned[5].hpow == pytest.approx(expected)


def test_column_entirely_invalid_raises():
    records = hourly_records(1)
    for r in records:
        r.irra = math.nan
    with pytest.raises(DataError, match="Irra"):
        clean_and_impute(records)


# ----- encode / normalize ---------------------------------------------------------


def test_onehot_first_category():
    records = [make_record(datetime(2019, 6, 1, 7), 7)] + hourly_records(1)
    ds = encode(records, "classification")
    assert ds.features[0, :12].tolist() == [1.0] + [0.0] * 11


def test_onehot_exactly_one_per_row_and_round_trip():
    records = generate_synthetic(10, rng_seed=2)
    ds = encode(records, "classification")
    onehot = ds.features[:, :12]
    assert np.all(onehot.sum(axis=1) == 1.0)
    decoded = HOURS[0] + np.argmax(onehot, axis=1)
    assert np.array_equal(decoded, np.array([r.index for r in records]))


def test_feature_widths_per_task():
    records = hourly_records(2)
    assert encode(records, "classification").features.shape[1] == 18
    assert encode(records, "regression").features.shape[1] == 17


def test_normalized_columns_standard():
    records = generate_synthetic(30, rng_seed=3)
    ds = encode_and_normalize(records, "classification")
    floats = ds.features[:, 12:]
    assert np.all(np.abs(floats.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(floats.std(axis=0) - 1.0) < 1e-9)


def test_zero_variance_column_rejected():
    records = hourly_records(2, stemp=13.0)
    with pytest.raises(DataError, match="STemp"):
        encode_and_normalize(records, "classification")


def test_unknown_task_rejected():
    with pytest.raises(UsageError):
        encode(hourly_records(1), "ranking")


# ----- split -----------------------------------------------------------------------


def test_split_sizes():
    ds = encode(generate_synthetic(10, rng_seed=5), "classification")  # 120 rows
    train, test = split(ds, 0.1, rng_seed=0)
    assert len(test) == 12 and len(train) == 108


def test_split_deterministic_and_seed_sensitive():
    ds = encode(generate_synthetic(10, rng_seed=5), "classification")
    a1 = split(ds, 0.2, rng_seed=7)[1].timestamps
    a2 = split(ds, 0.2, rng_seed=7)[1].timestamps
    b = split(ds, 0.2, rng_seed=8)[1].timestamps
    assert a1 == a2
    assert a1 != b


def test_split_shared_across_tasks():
    records = generate_synthetic(10, rng_seed=6)
    cls = split(encode(records, "classification"), 0.1, rng_seed=3)[1]
    reg = split(encode(records, "regression"), 0.1, rng_seed=3)[1]
    assert cls.timestamps == reg.timestamps


def test_split_fraction_validated():
    ds = encode(hourly_records(2), "classification")
    with pytest.raises(UsageError):
        split(ds, 0.0, 0)
    with pytest.raises(UsageError):
        split(ds, 1.0, 0)


def test_no_test_set_leakage_into_normalization():
    records = generate_synthetic(20, rng_seed=7)
    ds = encode(records, "classification")
    train, test = split(ds, 0.1, rng_seed=1)
    stats = fit_normalization(train)
    # perturbing test rows must not move the training statistics
    test.raw_floats[:] += 1000.0
    assert fit_normalization(train) == stats


# ----- synthetic generator -----------------------------------------------------------


def test_synthetic_record_count():
    assert len(generate_synthetic(885, rng_seed=0)) == 10620
    assert len(generate_synthetic(1, rng_seed=0)) == 12


def test_synthetic_deterministic():
    a = generate_synthetic(5, rng_seed=9)
    b = generate_synthetic(5, rng_seed=9)
    assert all(x == y for x, y in zip(a, b))
    c = generate_synthetic(5, rng_seed=10)
    assert any(x != y for x, y in zip(a, c))


def test_synthetic_labels_consistent():
    for r in generate_synthetic(50, rng_seed=11):
        assert r.target_exceed == (1 if r.target_pv > r.target_load else 0)


def test_synthetic_ranges():
    records = generate_synthetic(100, capacity=2000.0, rng_seed=12)
    for r in records:
        assert r.index in HOURS
        assert 0.0 <= r.target_pv <= 2000.0
        assert r.hpow >= 0.0 and r.dpow >= 0.0 and r.hload >= 0.0


def test_hotter_panels_generate_less():
    assert expected_pv(800.0, 40.0, 2000.0) < expected_pv(800.0, 20.0, 2000.0)
    # monotone along a temperature sweep
    sweep = [expected_pv(600.0, t, 2000.0) for t in np.linspace(0, 60, 13)]
    assert all(a > b for a, b in zip(sweep, sweep[1:]))


def test_cloud_free_series_tracks_clear_sky():
    records = generate_synthetic(30, cloud_prob=0.0, rng_seed=13)
    # forecast irradiance stays within the mild forecast-noise band of the
    # deterministic clear-sky curve: no 0.2-0.6x cloud drops anywhere
    by_hour = {}
    for r in records:
        by_hour.setdefault(r.index, []).append(r.irra)
    for hour, values in by_hour.items():
        values = np.array(values)
        assert np.all(values >= 0.0)
        spread = values.std() / max(values.mean(), 1e-9)
        assert spread < 0.45  # seasonal + noise only; clouds would triple this


def test_cloud_prob_increases_drops():
    clear = generate_synthetic(60, cloud_prob=0.0, rng_seed=14)
    cloudy = generate_synthetic(60, cloud_prob=0.6, rng_seed=14)
    assert np.mean([r.target_pv for r in cloudy]) < 0.75 * np.mean([r.target_pv for r in clear])


def test_generate_synthetic_validates_days():
    with pytest.raises(UsageError):
        generate_synthetic(0)


# ----- export -------------------------------------------------------------------------


def test_dataset_export_deterministic(tmp_path):
    records = generate_synthetic(5, rng_seed=15)
    ds = encode_and_normalize(records, "regression")
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    export_dataset(ds, p1)
    export_dataset(ds, p2)
    assert p1.read_bytes() == p2.read_bytes()
    sidecar = (tmp_path / "a.csv.norm.json").read_text()
    assert '"Irra"' in sidecar and '"mean"' in sidecar


def test_groups_and_raw_values():
    records = generate_synthetic(2, rng_seed=16)
    ds = encode_and_normalize(records, "classification")
    groups = dict(ds.groups())
    assert groups["Index"] == list(range(12))
    assert groups["HLoad"] == [17]
    assert ds.raw_value(0, "Index") == records[0].index
    assert ds.raw_value(3, "Irra") == records[3].irra
