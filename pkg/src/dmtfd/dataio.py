"""Loading, normalizing, windowing and splitting multivariate time series.

Datasets are stored entity-major: ``values`` has shape ``(K, L)`` with one row
per sensor.  Windows are contiguous ``[c*S, c*S + T)`` slices of all rows.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

TIMESTAMP_COLUMN = "timestamp"
CONSTANT_STD = 1e-8


class DataError(ValueError):
    """Raised when an input file or dataset breaks the data contract."""


class MissingLabelColumn(DataError):
    """The configured label column is absent (usually a config mistake)."""


@dataclass(frozen=True)
class TimeSeriesDataset:
    values: np.ndarray  # (K, L)
    labels: np.ndarray  # (L,) in {0, 1}
    entity_names: list[str]
    source_name: str = ""
    dropped_rows: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if values.ndim != 2:
            raise DataError(f"values must be 2-D (K, L), got shape {values.shape}")
        if labels.shape != (values.shape[1],):
            raise DataError(f"labels length {labels.shape} does not match L={values.shape[1]}")
        if not np.all(np.isfinite(values)):
            raise DataError("values contain NaN or Inf")
        if labels.size and not np.all((labels == 0) | (labels == 1)):
            raise DataError("labels must be 0 or 1")
        if len(self.entity_names) != values.shape[0]:
            raise DataError("entity_names length does not match K")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)

    @property
    def n_entities(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WindowBatch:
    windows: np.ndarray  # (N, K, T)
    window_labels: np.ndarray  # (N,)
    window_starts: np.ndarray  # (N,)
    window_size: int
    stride: int

    def __len__(self) -> int:
        return len(self.window_starts)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.6
    validation_fraction: float = 0.2
    mode: str = "chronological"

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(
                f"validation_fraction must lie in [0, 1), got {self.validation_fraction}"
            )
        if self.train_fraction + self.validation_fraction >= 1.0:
            raise ValueError("train_fraction + validation_fraction must be < 1")
        if self.mode != "chronological":
            raise ValueError(f"unsupported split mode {self.mode!r}")


def load_csv(path, label_column: str = "label", require_label: bool = True) -> TimeSeriesDataset:
    """Read a labelled CSV with one sensor per column.

    An optional ``timestamp`` column is ignored.  Rows whose sensor cells do
    not parse as finite reals are dropped; more than half the rows dropping
    is treated as a broken file.  With ``require_label=False`` a file
    without the label column loads with all-zero labels.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"{path}: empty file") from exc
    if frame.shape[0] == 0:
        raise DataError(f"{path}: no data rows")
    labelled = label_column in frame.columns
    if not labelled:
        if require_label:
            raise MissingLabelColumn(f"{path}: missing label column {label_column!r}")
        frame[label_column] = 0

    sensor_cols = [c for c in frame.columns if c not in (label_column, TIMESTAMP_COLUMN)]
    if not sensor_cols:
        raise DataError(f"{path}: no sensor columns")
    sensors = frame[sensor_cols].apply(pd.to_numeric, errors="coerce")
    labels = pd.to_numeric(frame[label_column], errors="coerce")
    ok = np.isfinite(sensors.to_numpy(dtype=np.float64)).all(axis=1) & labels.notna().to_numpy()
    dropped = int((~ok).sum())
    if dropped > 0.5 * len(frame):
        raise DataError(f"{path}: {dropped} of {len(frame)} rows unparsable")
    if dropped:
        log.warning("%s: dropped %d rows with missing or non-numeric values", path, dropped)

    return TimeSeriesDataset(
        values=sensors.to_numpy(dtype=np.float64)[ok].T.copy(),
        labels=labels.to_numpy()[ok].astype(np.int64),
        entity_names=[str(c) for c in sensor_cols],
        source_name=path.name,
        dropped_rows=dropped,
        meta={"labelled": labelled},
    )


def write_csv(ds: TimeSeriesDataset, path, label_column: str = "label") -> None:
    frame = pd.DataFrame(ds.values.T, columns=ds.entity_names)
    frame.insert(0, TIMESTAMP_COLUMN, np.arange(ds.length))
    frame[label_column] = ds.labels
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def zscore_stats(ds: TimeSeriesDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-entity mean and population standard deviation."""
    if ds.length < 1:
        raise DataError("cannot compute statistics of an empty series")
    return ds.values.mean(axis=1), ds.values.std(axis=1)


def zscore_normalize(ds: TimeSeriesDataset, stats=None) -> TimeSeriesDataset:
    """Standardize each entity row; constant rows become all zeros.

    ``stats`` lets validation/test partitions reuse training statistics.
    """
    mean, std = zscore_stats(ds) if stats is None else stats
    mean = np.asarray(mean, dtype=np.float64)[:, None]
    std = np.asarray(std, dtype=np.float64)[:, None]
    constant = std < CONSTANT_STD
    scaled = (ds.values - mean) / np.where(constant, 1.0, std)
    scaled = np.where(constant, 0.0, scaled)
    return replace(ds, values=scaled)


def n_windows(length: int, window_size: int, stride: int) -> int:
    if length < window_size:
        return 0
    return (length - window_size) // stride + 1


def slide_windows(ds: TimeSeriesDataset, window_size: int, stride: int) -> WindowBatch:
    if window_size < 1 or stride < 1:
        raise ValueError("window_size and stride must be >= 1")
    n = n_windows(ds.length, window_size, stride)
    if n == 0:
        log.warning("window size %d exceeds series length %d; no windows", window_size, ds.length)
        return WindowBatch(
            windows=np.zeros((0, ds.n_entities, window_size)),
            window_labels=np.zeros(0, dtype=np.int64),
            window_starts=np.zeros(0, dtype=np.int64),
            window_size=window_size,
            stride=stride,
        )
    starts = np.arange(n, dtype=np.int64) * stride
    view = np.lib.stride_tricks.sliding_window_view(ds.values, window_size, axis=1)
    windows = np.ascontiguousarray(view[:, starts, :].transpose(1, 0, 2))
    label_view = np.lib.stride_tricks.sliding_window_view(ds.labels, window_size)
    window_labels = label_view[starts].max(axis=1).astype(np.int64)
    return WindowBatch(windows, window_labels, starts, window_size, stride)


def _take(ds: TimeSeriesDataset, lo: int, hi: int, tag: str) -> TimeSeriesDataset:
    return replace(
        ds,
        values=ds.values[:, lo:hi],
        labels=ds.labels[lo:hi],
        source_name=f"{ds.source_name}[{tag}]",
        meta={},
    )


def split_lengths(length: int, spec: SplitSpec) -> tuple[int, int, int]:
    # floor for train and validation, remainder to test; 1e-9 absorbs float noise like 10*0.7
    n_train = math.floor(length * spec.train_fraction + 1e-9)
    n_val = math.floor(length * spec.validation_fraction + 1e-9)
    return n_train, n_val, length - n_train - n_val


def split(ds: TimeSeriesDataset, spec: SplitSpec):
    """Chronological train/validation/test partition."""
    n_train, n_val, _ = split_lengths(ds.length, spec)
    return (
        _take(ds, 0, n_train, "train"),
        _take(ds, n_train, n_train + n_val, "val"),
        _take(ds, n_train + n_val, ds.length, "test"),
    )


# --- synthetic multi-regime generator ------------------------------------

REGIME_SPACING = 2.0
OSC_AMPLITUDE = 0.4
NOISE_STD = 0.25
ANOMALY_KINDS = ("spike", "level_shift", "decorrelation")


def _regime_params(rng, n_modes, n_entities):
    # distinct per-entity levels, spaced so regimes never overlap along any entity
    levels = np.stack([rng.permutation(n_modes) for _ in range(n_entities)], axis=1)
    means = levels * REGIME_SPACING + rng.normal(0.0, 0.3, size=n_entities)
    freqs = rng.uniform(0.01, 0.08, size=(n_modes, n_entities))
    phases = rng.uniform(0, 2 * np.pi, size=(n_modes, n_entities))
    mixing = []
    for _ in range(n_modes):
        a = rng.normal(size=(n_entities, n_entities))
        q, _ = np.linalg.qr(a)
        mixing.append(q)
    return means, freqs, phases, np.stack(mixing)


def _normal_series(rng, n_modes, n_entities, length, params):
    means, freqs, phases, mixing = params
    values = np.empty((n_entities, length))
    regime = np.empty(length, dtype=np.int64)
    t = 0
    mode = 0
    while t < length:
        seg = int(rng.integers(300, 900))
        hi = min(length, t + seg)
        steps = np.arange(t, hi)
        osc = OSC_AMPLITUDE * np.sin(2 * np.pi * freqs[mode][:, None] * steps + phases[mode][:, None])
        # correlated noise: shared latent factors rotated per regime
        latent = rng.normal(0.0, NOISE_STD, size=(n_entities, hi - t))
        latent[1:] = 0.7 * latent[:1] + 0.3 * latent[1:]
        values[:, t:hi] = means[mode][:, None] + osc + mixing[mode] @ latent
        regime[t:hi] = mode
        t = hi
        mode = (mode + 1) % n_modes
    return values, regime


def _inject(rng, values, n_entities, start, stop, kind):
    width = stop - start
    n_hit = int(rng.integers(max(1, n_entities // 4), max(2, n_entities // 2) + 1))
    hit = np.sort(rng.choice(n_entities, size=n_hit, replace=False))
    if kind == "spike":
        sign = rng.choice([-1.0, 1.0], size=(n_hit, 1))
        bumps = rng.uniform(3.0, 5.0, size=(n_hit, width)) * (rng.random((n_hit, width)) < 0.5)
        values[hit, start:stop] += sign * (bumps + 1.5)
    elif kind == "level_shift":
        sign = rng.choice([-1.0, 1.0], size=(n_hit, 1))
        values[hit, start:stop] += sign * rng.uniform(1.0, 1.6, size=(n_hit, 1)) * REGIME_SPACING
    else:
        # replace with fast, uncorrelated, high-variance noise around the local level
        level = values[hit, start:stop].mean(axis=1, keepdims=True)
        values[hit, start:stop] = level + rng.normal(0.0, 1.5, size=(n_hit, width))
    return hit


def synth_multimanifold(
    n_modes: int = 3,
    n_entities: int = 8,
    length: int = 20_000,
    anomaly_rate: float = 0.05,
    seed: int = 0,
) -> TimeSeriesDataset:
    """Deterministic multi-regime series with labelled off-regime bursts.

    Normal behaviour cycles through ``n_modes`` stationary regimes, each
    with its own per-entity levels, oscillation frequencies and noise
    correlation.  Anomalies are bursts of spikes, level shifts or
    decorrelated noise on a subset of entities.  Injected intervals are
    recorded in ``meta["anomalies"]`` as half-open ``[start, end)`` ranges.
    """
    if n_modes < 2:
        raise ValueError("n_modes must be >= 2")
    if not 0.0 < anomaly_rate < 0.5:
        raise ValueError("anomaly_rate must lie in (0, 0.5)")
    rng = np.random.default_rng(seed)
    params = _regime_params(rng, n_modes, n_entities)
    values, regime = _normal_series(rng, n_modes, n_entities, length, params)
    labels = np.zeros(length, dtype=np.int64)

    budget = int(round(anomaly_rate * length))
    anomalies = []
    placed = 0
    attempts = 0
    while placed < budget and attempts < 10_000:
        attempts += 1
        width = int(min(rng.integers(20, 80), budget - placed))
        if width < 5:
            break
        start = int(rng.integers(0, length - width))
        stop = start + width
        # keep a normal gap around every burst so intervals never touch
        if labels[max(0, start - 30) : min(length, stop + 30)].any():
            continue
        kind = ANOMALY_KINDS[int(rng.integers(len(ANOMALY_KINDS)))]
        hit = _inject(rng, values, n_entities, start, stop, kind)
        labels[start:stop] = 1
        placed += width
        anomalies.append(
            {"start": start, "end": stop, "kind": kind, "entities": [int(h) for h in hit]}
        )
    anomalies.sort(key=lambda a: a["start"])

    return TimeSeriesDataset(
        values=values,
        labels=labels,
        entity_names=[f"sensor_{k}" for k in range(n_entities)],
        source_name=f"synthetic(modes={n_modes},seed={seed})",
        meta={
            "anomalies": anomalies,
            "regime": regime,
            "n_modes": n_modes,
            "seed": seed,
            "anomaly_rate": anomaly_rate,
        },
    )
