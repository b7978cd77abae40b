"""End-to-end orchestration: ingestion, splits, fitting, scoring, detection.

A run lives in a directory: the manifest records the config hash, seed and
library versions, and every stage persists its artifacts there so stages
can be re-run individually.  Timestamps are ISO-8601, day bucketing is
UTC, and the whole pipeline is deterministic given (config, seed, input
files).
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .anomaly import AnomalyScoreSeries, score_series
from .config import PipelineConfig
from .detection import (
    AlarmPolicy,
    AlarmWindow,
    FailureLog,
    PoolingPolicy,
    evaluate,
    format_report,
    pool,
    raise_alarms,
)
from .explain import default_score_grid, embed_grid, gate_geometry, reduced_geometry, render_map
from .model import (
    BehaviorGateParams,
    Dataset,
    ExpertParams,
    MixingGateParams,
    ModelParams,
    fused_moments,
    sample_conditional,
)
from .posterior import PosteriorSample, fit_diagnostics, sample_posterior

__all__ = [
    "CsvSchema",
    "SplitSpec",
    "SyntheticSpec",
    "Scaler",
    "StageError",
    "ingest_csv",
    "read_telemetry",
    "read_failures",
    "standard_scale",
    "build_splits",
    "generate_synthetic",
    "save_posterior",
    "load_posterior",
    "write_two_index_stream",
    "run_experiment",
    "emit_plot_data",
]

ARCHIVE_VERSION = 1


class StageError(RuntimeError):
    """A pipeline stage failed; partial artifacts remain in the run directory."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for telemetry ingestion."""

    timestamp_column: str
    target: str
    covariates: list
    machine_column: str = ""
    machine_id: str = ""


def _parse_timestamp(raw: str) -> np.datetime64:
    dt = datetime.fromisoformat(raw.strip())
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "s")


def read_telemetry(path, timestamp_column: str, columns: list, machine_column: str = "", machine_id: str = ""):
    """Parse a telemetry CSV into sorted arrays.

    Returns ``(timestamps, values, rejected)`` where ``values`` maps each
    requested column to a float vector and ``rejected`` lists
    ``(line_number, reason)`` for rows that failed to parse or had missing
    fields.  Rows are sorted by timestamp, stably, so duplicates keep
    their file order.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file")
        header = set(reader.fieldnames)
        needed = [timestamp_column, *columns] + ([machine_column] if machine_column else [])
        missing = [c for c in needed if c not in header]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        timestamps = []
        values = {c: [] for c in columns}
        rejected = []
        for lineno, row in enumerate(reader, start=2):
            if machine_column and row.get(machine_column, "").strip() != machine_id:
                continue
            try:
                ts = _parse_timestamp(row[timestamp_column])
            except (ValueError, TypeError, AttributeError):
                rejected.append((lineno, f"unparseable timestamp {row.get(timestamp_column)!r}"))
                continue
            parsed = {}
            bad = None
            for c in columns:
                raw = (row.get(c) or "").strip()
                if not raw:
                    bad = f"missing value in column {c!r}"
                    break
                try:
                    parsed[c] = float(raw)
                except ValueError:
                    bad = f"bad value {raw!r} in column {c!r}"
                    break
            if bad:
                rejected.append((lineno, bad))
                continue
            timestamps.append(ts)
            for c in columns:
                values[c].append(parsed[c])
    if not timestamps:
        raise ValueError(f"{path}: no usable rows")
    ts = np.array(timestamps, dtype="datetime64[s]")
    order = np.argsort(ts, kind="stable")
    return ts[order], {c: np.array(v)[order] for c, v in values.items()}, rejected


def ingest_csv(path, schema: CsvSchema):
    """Telemetry file to a Dataset for one target index.

    Returns ``(dataset, rejected)``; the rejected list carries line
    numbers so malformed rows can be traced back to the file.
    """
    columns = [schema.target, *schema.covariates]
    ts, values, rejected = read_telemetry(
        path, schema.timestamp_column, columns, schema.machine_column, schema.machine_id
    )
    x = np.column_stack([values[c] for c in schema.covariates]) if schema.covariates else np.empty((len(ts), 0))
    return Dataset(x, values[schema.target], ts), rejected


def read_failures(path, timestamp_column: str = "datetime", machine_column: str = "", machine_id: str = "") -> FailureLog:
    """Failure log CSV (machine id, failure timestamp, component) to windows.

    Each record becomes a point failure window; duplicate timestamps
    collapse to one window.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or timestamp_column not in reader.fieldnames:
            raise ValueError(f"{path}: missing failure timestamp column {timestamp_column!r}")
        stamps = []
        for row in reader:
            if machine_column and row.get(machine_column, "").strip() != machine_id:
                continue
            stamps.append(_parse_timestamp(row[timestamp_column]))
    stamps = np.unique(np.array(stamps, dtype="datetime64[s]"))
    return FailureLog(stamps, stamps)


# ---------------------------------------------------------------------------
# Scaling and splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scaler:
    x_mean: np.ndarray
    x_sd: np.ndarray
    y_mean: float
    y_sd: float

    def apply(self, data: Dataset) -> Dataset:
        x = (data.covariates - self.x_mean) / self.x_sd
        y = (data.responses - self.y_mean) / self.y_sd
        return Dataset(x, y, data.timestamps)

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_sd": self.x_sd.tolist(),
            "y_mean": self.y_mean,
            "y_sd": self.y_sd,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.array(d["x_mean"]), np.array(d["x_sd"]), d["y_mean"], d["y_sd"])


def standard_scale(fit_on: Dataset, apply_to: Dataset):
    """Column-wise standardization using the fit set's moments only.

    Returns ``(scaled, scaler)``; a zero-variance column is an error since
    it cannot be standardized.
    """
    x_sd = fit_on.covariates.std(axis=0) if len(fit_on) else np.array([])
    degenerate = np.flatnonzero(x_sd == 0.0)
    if degenerate.size:
        raise ValueError(f"constant covariate column(s) at index {degenerate.tolist()}")
    y_sd = float(fit_on.responses.std())
    if y_sd == 0.0:
        raise ValueError("constant response column")
    scaler = Scaler(fit_on.covariates.mean(axis=0), x_sd, float(fit_on.responses.mean()), y_sd)
    return scaler.apply(apply_to), scaler


@dataclass(frozen=True)
class SplitSpec:
    margin_days: float = 5.0
    fraction: float = 0.1
    train_size: int = 200
    validation_size: int = 100

    def __post_init__(self):
        if self.margin_days < 0:
            raise ValueError("margin_days must be non-negative")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        if self.train_size < 1 or self.validation_size < 0:
            raise ValueError("split sizes must be positive")


def _merge_spans(spans: list) -> list:
    merged = []
    for start, end in sorted(spans):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def build_splits(data: Dataset, failures: FailureLog, spec: SplitSpec):
    """Train/validation/test splits around the logged failures.

    Observations within the margin of any failure are excluded from the
    fault-free pool; the pool is subsampled chronologically, its first
    ``train_size`` rows become Train and the next ``validation_size``
    Validation.  Test gathers the excluded observations dated after the
    last Validation sample, restricted to the spans running from the
    margin before each failure through its end.
    """
    ts = np.asarray(data.timestamps, dtype="datetime64[s]")
    margin = np.timedelta64(int(round(spec.margin_days * 86400)), "s")
    near_failure = np.zeros(len(data), dtype=bool)
    for fs, fe in zip(failures.starts, failures.ends):
        fs = np.datetime64(fs, "s")
        fe = np.datetime64(fe, "s")
        near_failure |= (ts >= fs - margin) & (ts <= fe + margin)
    pool_idx = np.flatnonzero(~near_failure)

    stride = max(1, int(round(1.0 / spec.fraction)))
    sub_idx = pool_idx[::stride]
    needed = spec.train_size + spec.validation_size
    if len(sub_idx) < needed:
        raise ValueError(
            f"fault-free pool has {len(sub_idx)} subsampled rows, "
            f"need {needed} for train + validation"
        )
    train = data.select(sub_idx[: spec.train_size])
    validation = data.select(sub_idx[spec.train_size : needed])

    val_end = validation.timestamps[-1] if len(validation) else train.timestamps[-1]
    spans = _merge_spans(
        [
            (np.datetime64(fs, "s") - margin, np.datetime64(fe, "s"))
            for fs, fe in zip(failures.starts, failures.ends)
        ]
    )
    in_span = np.zeros(len(data), dtype=bool)
    for start, end in spans:
        in_span |= (ts >= start) & (ts <= end)
    test_idx = np.flatnonzero(near_failure & in_span & (ts > np.datetime64(val_end, "s")))
    test = data.select(test_idx)
    return train, validation, test


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator recipe: ground-truth model, covariate law, optional fault."""

    params: ModelParams
    covariate_law: list  # per dimension: ("uniform", lo, hi) or ("gaussian", mean, sd)
    n_samples: int
    fault_onset: int | None = None
    shift_sds: float = 0.0
    drift_per_sample: float = 0.0
    start: str = "2024-01-01T00:00:00"
    cadence_seconds: int = 3600

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if len(self.covariate_law) != self.params.n_covariates:
            raise ValueError("one covariate law per model dimension is required")


def _draw_covariates(law: list, n: int, rng: np.random.Generator) -> np.ndarray:
    cols = []
    for kind, a, b in law:
        if kind == "uniform":
            cols.append(rng.uniform(a, b, size=n))
        elif kind == "gaussian":
            cols.append(rng.normal(a, b, size=n))
        else:
            raise ValueError(f"unknown covariate law {kind!r}")
    return np.column_stack(cols) if cols else np.empty((n, 0))


def generate_synthetic(spec: SyntheticSpec, seed: int):
    """Sample a dataset from the ground-truth conditional law.

    Responses follow the gate-allocated fused Gaussians; after the fault
    onset each response is shifted by ``shift_sds`` (plus accumulated
    drift) times the sampled component's fused standard deviation.
    Returns ``(dataset, expert_indices)``.
    """
    rng = np.random.default_rng(seed)
    x = _draw_covariates(spec.covariate_law, spec.n_samples, rng)
    y, z = sample_conditional(spec.params, x, rng, return_experts=True)
    if spec.fault_onset is not None:
        _, _, sds = fused_moments(spec.params, x)
        comp_sd = sds[np.arange(len(x)), z]
        idx = np.arange(spec.n_samples)
        after = idx >= spec.fault_onset
        magnitude = spec.shift_sds + spec.drift_per_sample * (idx - spec.fault_onset)
        y = y + after * magnitude * comp_sd
    start = np.datetime64(spec.start, "s")
    ts = start + np.arange(spec.n_samples) * np.timedelta64(spec.cadence_seconds, "s")
    return Dataset(x, y, ts), z


def write_two_index_stream(
    out_dir,
    n_samples: int = 2400,
    onset_index: int | None = 2232,
    failure_index: int = 2280,
    shift_sds: float = 8.0,
    seed: int = 0,
    start: str = "2024-01-01T00:00:00",
    cadence_seconds: int = 3600,
):
    """Write a synthetic two-index telemetry CSV plus its failure log.

    Both health indices respond to a shared exogenous load signal; the
    injected fault shifts the indices but not the load, so each per-index
    conditional model sees the deviation.  Returns the two file paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    start_ts = np.datetime64(start, "s")
    ts = start_ts + np.arange(n_samples) * np.timedelta64(cadence_seconds, "s")
    load = rng.uniform(-2.0, 2.0, size=n_samples)
    hi_a = 1.0 + 0.8 * load + rng.normal(0.0, 0.5, size=n_samples)
    hi_b = -0.5 + 1.2 * load + rng.normal(0.0, 0.7, size=n_samples)
    if onset_index is not None:
        hi_a[onset_index:] += shift_sds * 0.5
        hi_b[onset_index:] += shift_sds * 0.7

    telemetry = out_dir / "telemetry.csv"
    with open(telemetry, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["datetime", "machineID", "load", "hi_a", "hi_b"])
        for i in range(n_samples):
            writer.writerow(
                [
                    np.datetime_as_string(ts[i], unit="s", timezone="naive").replace("T", " "),
                    "1",
                    f"{load[i]:.6f}",
                    f"{hi_a[i]:.6f}",
                    f"{hi_b[i]:.6f}",
                ]
            )
    failures = out_dir / "failures.csv"
    with open(failures, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["datetime", "machineID", "component"])
        writer.writerow(
            [
                np.datetime_as_string(ts[failure_index], unit="s", timezone="naive").replace("T", " "),
                "1",
                "comp1",
            ]
        )
    return telemetry, failures


# ---------------------------------------------------------------------------
# Posterior archive
# ---------------------------------------------------------------------------


def save_posterior(sample: PosteriorSample, path) -> None:
    """Versioned binary archive of a posterior sample."""
    coeffs = np.stack([np.stack([e.mean_coeffs() for e in d.experts]) for d in sample.draws])
    sds = np.stack([np.array([e.noise_sd for e in d.experts]) for d in sample.draws])
    mixing = np.stack([d.mixing.matrix for d in sample.draws])
    behavior = np.stack([d.behavior.coeffs for d in sample.draws])
    np.savez_compressed(
        path,
        format_version=ARCHIVE_VERSION,
        expert_coeffs=coeffs,
        expert_sds=sds,
        mixing=mixing,
        behavior=behavior,
        acceptance_rate=sample.acceptance_rate,
        chain_count=sample.chain_count,
        seed=sample.seed,
    )


def load_posterior(path) -> PosteriorSample:
    with np.load(path) as archive:
        version = int(archive["format_version"])
        if version != ARCHIVE_VERSION:
            raise ValueError(f"unsupported posterior archive version {version}")
        coeffs = archive["expert_coeffs"]
        sds = archive["expert_sds"]
        mixing = archive["mixing"]
        behavior = archive["behavior"]
        draws = tuple(
            ModelParams(
                tuple(ExpertParams(c[0], c[1:], sd) for c, sd in zip(cs, ss)),
                MixingGateParams(mx),
                BehaviorGateParams(bh),
            )
            for cs, ss, mx, bh in zip(coeffs, sds, mixing, behavior)
        )
        return PosteriorSample(
            draws,
            float(archive["acceptance_rate"]),
            int(archive["chain_count"]),
            int(archive["seed"]),
        )


# ---------------------------------------------------------------------------
# Run directory stages
# ---------------------------------------------------------------------------


def _timestamp_strings(ts: np.ndarray) -> list:
    return [np.datetime_as_string(t, unit="s").replace("T", " ") for t in np.asarray(ts, dtype="datetime64[s]")]


def _save_split(path, data: Dataset) -> None:
    np.savez_compressed(
        path,
        covariates=data.covariates,
        responses=data.responses,
        timestamps=data.timestamps.astype("datetime64[s]").astype("int64"),
    )


def _load_split(path) -> Dataset:
    with np.load(path) as archive:
        return Dataset(
            archive["covariates"],
            archive["responses"],
            archive["timestamps"].astype("datetime64[s]"),
        )


def _covariates_for(config: PipelineConfig, index: str) -> list:
    others = [name for name in config.indices if name != index]
    return others + list(config.extra_covariates)


def _index_datasets(config: PipelineConfig, data_path):
    """Per-index raw Dataset plus the total count of dropped rows."""
    columns = list(config.indices) + list(config.extra_covariates)
    ts, values, rejected = read_telemetry(
        data_path, config.timestamp_column, columns, config.machine_column, config.machine_id
    )
    datasets = {}
    for index in config.indices:
        covs = _covariates_for(config, index)
        x = np.column_stack([values[c] for c in covs]) if covs else np.empty((len(ts), 0))
        datasets[index] = Dataset(x, values[index], ts)
    return datasets, len(rejected)


def _write_manifest(run_dir: Path, config: PipelineConfig, extra: dict) -> None:
    manifest_path = run_dir / "manifest.json"
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    manifest.update(
        {
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "versions": {
                "anomix": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": sys.version.split()[0],
            },
        }
    )
    manifest.update(extra)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def stage_fit(config: PipelineConfig, data_path, failures_path, run_dir) -> None:
    """Ingest, split, scale and fit one posterior per target index."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    failures = read_failures(
        failures_path, config.timestamp_column, config.machine_column, config.machine_id
    )
    datasets, dropped = _index_datasets(config, data_path)
    spec = SplitSpec(
        margin_days=config.margin_days,
        fraction=config.subsample_fraction,
        train_size=config.train_size,
        validation_size=config.validation_size,
    )
    split_info = {}
    for offset, index in enumerate(config.indices):
        train, validation, test = build_splits(datasets[index], failures, spec)
        scaled_train, scaler = standard_scale(train, train)
        scaled_val = scaler.apply(validation) if len(validation) else validation
        scaled_test = scaler.apply(test) if len(test) else test
        sample = sample_posterior(
            scaled_train, config.prior_spec(), config.experts, config.sampler_settings(offset)
        )
        save_posterior(sample, run_dir / f"posterior_{index}.npz")
        (run_dir / f"scaler_{index}.json").write_text(json.dumps(scaler.to_dict()) + "\n")
        _save_split(run_dir / f"train_{index}.npz", scaled_train)
        _save_split(run_dir / f"validation_{index}.npz", scaled_val)
        _save_split(run_dir / f"test_{index}.npz", scaled_test)
        split_info[index] = {
            "train": len(train),
            "validation": len(validation),
            "test": len(test),
            "acceptance_rate": sample.acceptance_rate,
        }
    failures_out = [
        {"start": str(np.datetime64(s, "s")), "end": str(np.datetime64(e, "s"))}
        for s, e in zip(failures.starts, failures.ends)
    ]
    (run_dir / "failures.json").write_text(json.dumps(failures_out) + "\n")
    _write_manifest(run_dir, config, {"dropped_rows": dropped, "splits": split_info})


def stage_diagnose(config: PipelineConfig, run_dir) -> None:
    """Fit and coverage diagnostics on the training split of each index."""
    run_dir = Path(run_dir)
    rows = []
    for index in config.indices:
        sample = load_posterior(run_dir / f"posterior_{index}.npz")
        train = _load_split(run_dir / f"train_{index}.npz")
        diag = fit_diagnostics(sample, train)
        rows.append(
            [
                index,
                f"{diag.lppd:.4f}",
                f"{diag.psis_loo:.4f}",
                f"{diag.psis_loo_se:.4f}",
                f"{diag.cic95:.4f}",
                f"{diag.cic95_se:.4f}",
                f"{diag.pareto_k_max:.4f}",
            ]
        )
    with open(run_dir / "diagnostics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "lppd", "psis_loo", "psis_loo_se", "cic95", "cic95_se", "pareto_k_max"])
        writer.writerows(rows)


def _score_one(config: PipelineConfig, run_dir: Path, index: str) -> AnomalyScoreSeries:
    sample = load_posterior(run_dir / f"posterior_{index}.npz")
    test = _load_split(run_dir / f"test_{index}.npz")
    return score_series(
        test, sample, config.window_k, config.effective_decay(), config.threshold
    )


def _write_series(path, series: AnomalyScoreSeries) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "as_value", "theta_q05", "theta_q95", "threshold"])
        lo = series.theta_low if series.theta_low is not None else series.as_values
        hi = series.theta_high if series.theta_high is not None else series.as_values
        for ts, v, a, b in zip(_timestamp_strings(series.timestamps), series.as_values, lo, hi):
            writer.writerow([ts, f"{v:.6f}", f"{a:.6f}", f"{b:.6f}", f"{series.threshold:.6f}"])


def _read_series(path) -> AnomalyScoreSeries:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        ts, vals, lo, hi, thr = [], [], [], [], 0.5
        for row in reader:
            ts.append(_parse_timestamp(row["timestamp"]))
            vals.append(float(row["as_value"]))
            lo.append(float(row["theta_q05"]))
            hi.append(float(row["theta_q95"]))
            thr = float(row["threshold"])
    return AnomalyScoreSeries(
        np.array(ts, dtype="datetime64[s]"), np.array(vals), thr, np.array(lo), np.array(hi)
    )


def stage_score(config: PipelineConfig, run_dir) -> None:
    run_dir = Path(run_dir)
    for index in config.indices:
        _write_series(run_dir / f"scores_{index}.csv", _score_one(config, run_dir, index))


def _write_alarms(path, alarms: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["onset", "end"])
        for a in alarms:
            writer.writerow(
                [
                    np.datetime_as_string(np.datetime64(a.onset, "s"), unit="s").replace("T", " "),
                    np.datetime_as_string(np.datetime64(a.end, "s"), unit="s").replace("T", " "),
                ]
            )


def _read_alarms(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            AlarmWindow(_parse_timestamp(row["onset"]), _parse_timestamp(row["end"]))
            for row in reader
        ]


def stage_detect(config: PipelineConfig, run_dir) -> None:
    """Per-index alarms plus the pooled consensus score and its alarms."""
    run_dir = Path(run_dir)
    policy = AlarmPolicy(config.threshold, config.patience)
    serieses = []
    for index in config.indices:
        series = _read_series(run_dir / f"scores_{index}.csv")
        serieses.append(series)
        _write_alarms(run_dir / f"alarms_{index}.csv", raise_alarms(series, policy))
    if len(serieses) > 1:
        pooled = pool(serieses, PoolingPolicy(config.quorum, config.half_level))
        _write_series(run_dir / "pooled_scores.csv", pooled)
        pooled_alarms = raise_alarms(
            pooled, AlarmPolicy(pooled.threshold, config.patience)
        )
        _write_alarms(run_dir / "pooled_alarms.csv", pooled_alarms)


def stage_evaluate(config: PipelineConfig, run_dir) -> None:
    """Detection report against the failure log, per validity window length."""
    run_dir = Path(run_dir)
    failures_raw = json.loads((run_dir / "failures.json").read_text())
    failures = FailureLog(
        np.array([f["start"] for f in failures_raw], dtype="datetime64[s]"),
        np.array([f["end"] for f in failures_raw], dtype="datetime64[s]"),
    )
    pooled_path = run_dir / "pooled_alarms.csv"
    if pooled_path.exists():
        alarms = _read_alarms(pooled_path)
        observed = _read_series(run_dir / "pooled_scores.csv").timestamps
    else:
        alarms = _read_alarms(run_dir / f"alarms_{config.indices[0]}.csv")
        observed = _read_series(run_dir / f"scores_{config.indices[0]}.csv").timestamps
    report = evaluate(alarms, failures, config.validity_days, observed)
    (run_dir / "detection_report.csv").write_text(format_report(report, grouped=False))
    (run_dir / "detection_report_grouped.csv").write_text(format_report(report, grouped=True))


def stage_explain(config: PipelineConfig, run_dir) -> None:
    """Explanation maps per index: grid, embedded points, model outputs."""
    run_dir = Path(run_dir)
    for index in config.indices:
        sample = load_posterior(run_dir / f"posterior_{index}.npz")
        n_experts = sample.draws[0].n_experts
        if n_experts == 1:
            continue  # a single-expert gate has no directions to map
        if n_experts - 1 > 2:
            geometry = reduced_geometry(sample)
        else:
            try:
                geometry = gate_geometry(sample)
            except ValueError:
                continue  # rank-deficient small gate: no exact map exists
        train = _load_split(run_dir / f"train_{index}.npz")
        grid = default_score_grid(min(geometry.n_directions, 2))
        skeleton = embed_grid(geometry, grid, train.covariates.mean(axis=0))
        rendered = render_map(skeleton, sample)
        with open(run_dir / f"explain_{index}_map.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            n_experts = rendered.activations.shape[1]
            header = (
                [f"score_{j}" for j in range(rendered.grid.shape[1])]
                + [f"x_{j}" for j in range(rendered.points.shape[1])]
                + [f"activation_{j}" for j in range(n_experts)]
                + ["predictive_mean", "predictive_sd"]
            )
            writer.writerow(header)
            for g, p, a, m, s in zip(
                rendered.grid, rendered.points, rendered.activations,
                rendered.predictive_mean, rendered.predictive_sd,
            ):
                writer.writerow(
                    [f"{v:.6f}" for v in g]
                    + [f"{v:.6f}" for v in p]
                    + [f"{v:.6f}" for v in a]
                    + [f"{m:.6f}", f"{s:.6f}"]
                )
        with open(run_dir / f"explain_{index}_arrows.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["feature"] + [f"component_{j}" for j in range(rendered.grid.shape[1])])
            for j, arrow in enumerate(rendered.arrows):
                writer.writerow([j] + [f"{v:.6f}" for v in arrow])


def run_experiment(config: PipelineConfig, data_path, failures_path, run_dir) -> dict:
    """Full protocol: fit, diagnose, score, detect, evaluate, explain.

    Any stage failure aborts with the stage name; artifacts written by
    earlier stages stay in the run directory.
    """
    run_dir = Path(run_dir)
    stages = [
        ("fit", lambda: stage_fit(config, data_path, failures_path, run_dir)),
        ("diagnose", lambda: stage_diagnose(config, run_dir)),
        ("score", lambda: stage_score(config, run_dir)),
        ("detect", lambda: stage_detect(config, run_dir)),
        ("evaluate", lambda: stage_evaluate(config, run_dir)),
        ("explain", lambda: stage_explain(config, run_dir)),
    ]
    for name, fn in stages:
        try:
            fn()
        except Exception as exc:
            raise StageError(name, exc) from exc
    return json.loads((run_dir / "manifest.json").read_text())


# ---------------------------------------------------------------------------
# Plot-ready outputs
# ---------------------------------------------------------------------------


def emit_plot_data(config: PipelineConfig, run_dir) -> list:
    """Tabular files for external plotting.

    Per index: a predictive band over the test span (observed response,
    predictive mean and 5%/95% predictive quantiles), posterior-mean gate
    activations, and the score series with threshold and alarm onsets.
    Failure markers are shared.  Returns the list of written paths.
    """
    run_dir = Path(run_dir)
    written = []
    rng = np.random.default_rng(config.seed)
    for index in config.indices:
        posterior_path = run_dir / f"posterior_{index}.npz"
        if not posterior_path.exists():
            raise FileNotFoundError(f"missing fit artifacts for index {index!r}; run fit first")
        sample = load_posterior(posterior_path)
        test = _load_split(run_dir / f"test_{index}.npz")
        if len(test) == 0:
            continue
        draws = np.stack([sample_conditional(d, test.covariates, rng) for d in sample.draws])
        mean = np.zeros(len(test))
        act = np.zeros((len(test), sample.draws[0].n_experts))
        for d in sample.draws:
            alpha, means, _ = fused_moments(d, test.covariates)
            mean += (alpha * means).sum(axis=1)
            act += alpha
        mean /= sample.n_draws
        act /= sample.n_draws
        q05 = np.quantile(draws, 0.05, axis=0)
        q95 = np.quantile(draws, 0.95, axis=0)

        band_path = run_dir / f"plot_band_{index}.csv"
        with open(band_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp", "observed", "predictive_mean", "q05", "q95"])
            for ts, y, m, lo, hi in zip(
                _timestamp_strings(test.timestamps), test.responses, mean, q05, q95
            ):
                writer.writerow([ts, f"{y:.6f}", f"{m:.6f}", f"{lo:.6f}", f"{hi:.6f}"])
        written.append(band_path)

        act_path = run_dir / f"plot_activations_{index}.csv"
        with open(act_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp"] + [f"activation_{j}" for j in range(act.shape[1])])
            for ts, row in zip(_timestamp_strings(test.timestamps), act):
                writer.writerow([ts] + [f"{v:.6f}" for v in row])
        written.append(act_path)

        series = _read_series(run_dir / f"scores_{index}.csv")
        alarms = _read_alarms(run_dir / f"alarms_{index}.csv")
        onsets = {np.datetime64(a.onset, "s") for a in alarms}
        score_path = run_dir / f"plot_scores_{index}.csv"
        with open(score_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp", "as_value", "threshold", "alarm_onset"])
            for ts, v in zip(series.timestamps, series.as_values):
                writer.writerow(
                    [
                        np.datetime_as_string(ts, unit="s").replace("T", " "),
                        f"{v:.6f}",
                        f"{series.threshold:.6f}",
                        int(np.datetime64(ts, "s") in onsets),
                    ]
                )
        written.append(score_path)

    failures_raw = json.loads((run_dir / "failures.json").read_text())
    markers_path = run_dir / "plot_failures.csv"
    with open(markers_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["start", "end"])
        for f in failures_raw:
            writer.writerow([f["start"].replace("T", " "), f["end"].replace("T", " ")])
    written.append(markers_path)
    return written
