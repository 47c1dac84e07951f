"""Dataset representation: windows, catalogs, ingestion, resampling, synthesis.

A sensor window is a fixed-length multichannel segment (T timesteps x M
channels) with a sampling rate and an optional class label. Datasets are
immutable after construction; every operation here is pure given its inputs
and seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ClassAbsentError,
    EmptyFileError,
    InvalidSpecError,
    MissingColumnError,
    NonMonotonicTimestampsError,
    OutputTooShortError,
    UnknownLabelError,
    WindowLongerThanSeriesError,
)

#: Sentinel for "all available samples per class" in few_shot_subset.
ALL = None


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered collection of distinct class names."""

    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValueError("catalog needs at least 2 classes")
        if len(set(names)) != len(names):
            raise ValueError("catalog names must be unique")
        if any(not n for n in names):
            raise ValueError("catalog names must be non-empty")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class SensorWindow:
    """T x M segment of multichannel sensor samples at a fixed rate."""

    samples: np.ndarray
    rate_hz: float
    label_id: Optional[int] = None

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"samples must be 2-D (T x M), got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise ValueError("window needs at least 2 timesteps")
        if arr.shape[1] < 1:
            raise ValueError("window needs at least 1 channel")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples must be finite")
        if not self.rate_hz > 0:
            raise ValueError("rate_hz must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class LabeledDataset:
    """Ordered windows plus the class catalog their labels index into."""

    windows: tuple[SensorWindow, ...]
    catalog: ClassCatalog

    def __post_init__(self):
        windows = tuple(self.windows)
        object.__setattr__(self, "windows", windows)
        if windows:
            m = windows[0].n_channels
            rate = windows[0].rate_hz
            for w in windows:
                if w.n_channels != m:
                    raise ValueError("all windows must share the channel count")
                if w.rate_hz != rate:
                    raise ValueError("all windows must share the sampling rate")
                if w.label_id is not None and not 0 <= w.label_id < len(self.catalog):
                    raise ValueError(f"label_id {w.label_id} outside catalog")

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def fully_labeled(self) -> bool:
        return all(w.label_id is not None for w in self.windows)

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.catalog), dtype=np.int64)
        for w in self.windows:
            if w.label_id is not None:
                counts[w.label_id] += 1
        return counts


@dataclass(frozen=True)
class CsvSchema:
    """Column layout of a sensor CSV file.

    channel_columns=None means "every column that is not the timestamp or the
    label, in header order". strict_monotonic requires strictly increasing
    timestamps; otherwise ties are allowed but decreases are not.
    """

    time_column: str = "t"
    label_column: str = "label"
    channel_columns: Optional[tuple[str, ...]] = None
    strict_monotonic: bool = True


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic dataset of class-specific noisy sinusoids."""

    classes: int
    channels: int
    window_len: int
    base_freqs: tuple[float, ...]
    noise_std: float
    seed: int
    rate_hz: float = 20.0
    windows_per_class: int = 20

    def __post_init__(self):
        object.__setattr__(self, "base_freqs", tuple(float(f) for f in self.base_freqs))
        if self.classes < 2:
            raise InvalidSpecError("need at least 2 classes")
        if self.channels < 1:
            raise InvalidSpecError("need at least 1 channel")
        if self.window_len < 2:
            raise InvalidSpecError("window_len must be >= 2")
        if self.rate_hz <= 0:
            raise InvalidSpecError("rate_hz must be positive")
        if len(self.base_freqs) != self.classes:
            raise InvalidSpecError("need one base frequency per class")
        if len(set(self.base_freqs)) != self.classes:
            raise InvalidSpecError("base frequencies must be distinct")
        if any(not 0 < f < self.rate_hz / 2 for f in self.base_freqs):
            raise InvalidSpecError("base frequencies must lie in (0, rate/2)")
        if self.noise_std < 0:
            raise InvalidSpecError("noise_std must be >= 0")
        if self.windows_per_class < 1:
            raise InvalidSpecError("windows_per_class must be >= 1")


def ingest_csv(path, schema: CsvSchema = CsvSchema(),
               catalog: Optional[ClassCatalog] = None) -> LabeledDataset:
    """Parse a sensor CSV into a dataset.

    Rows are grouped into one window per contiguous run of equal labels; runs
    shorter than 2 samples are discarded. The catalog is built from distinct
    non-empty labels in first-appearance order unless an explicit catalog is
    supplied (then unknown labels raise and empty labels mean "unlabeled").
    The sampling rate is derived from the median timestamp delta.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFileError(f"{path}: no header row") from None
        header = [h.strip() for h in header]
        rows = [r for r in reader if r]

    if not rows:
        raise EmptyFileError(f"{path}: no data rows")

    channel_cols = schema.channel_columns
    if channel_cols is None:
        channel_cols = tuple(
            c for c in header if c not in (schema.time_column, schema.label_column)
        )
    for col in (schema.time_column, *channel_cols, schema.label_column):
        if col not in header:
            raise MissingColumnError(f"{path}: column {col!r} not in header")

    t_ix = header.index(schema.time_column)
    ch_ix = [header.index(c) for c in channel_cols]
    lb_ix = header.index(schema.label_column)

    times = np.array([float(r[t_ix]) for r in rows])
    values = np.array([[float(r[i]) for i in ch_ix] for r in rows])
    labels = [r[lb_ix].strip() for r in rows]

    deltas = np.diff(times)
    if schema.strict_monotonic:
        if np.any(deltas <= 0):
            raise NonMonotonicTimestampsError(f"{path}: timestamps must strictly increase")
    elif np.any(deltas < 0):
        raise NonMonotonicTimestampsError(f"{path}: timestamps must not decrease")
    rate = 1.0 / float(np.median(deltas)) if len(deltas) else 1.0

    if catalog is None:
        seen: list[str] = []
        for lb in labels:
            if lb and lb not in seen:
                seen.append(lb)
        catalog = ClassCatalog(tuple(seen))
        label_to_id = {name: i for i, name in enumerate(seen)}
    else:
        label_to_id = {name: i for i, name in enumerate(catalog.names)}
        for lb in labels:
            if lb and lb not in label_to_id:
                raise UnknownLabelError(f"{path}: label {lb!r} not in catalog")

    windows = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            if i - start >= 2:
                lb = labels[start]
                windows.append(SensorWindow(
                    samples=values[start:i],
                    rate_hz=rate,
                    label_id=label_to_id[lb] if lb else None,
                ))
            start = i
    return LabeledDataset(windows=tuple(windows), catalog=catalog)


def resample(window: SensorWindow, target_hz: float) -> SensorWindow:
    """Linearly interpolate a window onto a uniform grid at target_hz.

    Output length is floor(T * target_hz / rate_hz); raises OutputTooShortError
    if fewer than 2 samples would remain.
    """
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    n_in = window.n_samples
    n_out = int(np.floor(n_in * target_hz / window.rate_hz))
    if n_out < 2:
        raise OutputTooShortError(
            f"resampling {n_in} samples from {window.rate_hz} Hz to {target_hz} Hz "
            f"leaves {n_out} samples")
    t_in = np.arange(n_in) / window.rate_hz
    t_out = np.arange(n_out) / target_hz
    out = np.empty((n_out, window.n_channels))
    for ch in range(window.n_channels):
        out[:, ch] = np.interp(t_out, t_in, window.samples[:, ch])
    return SensorWindow(samples=out, rate_hz=target_hz, label_id=window.label_id)


def segment_windows(series: SensorWindow, window_len: int, stride: int) -> list[SensorWindow]:
    """Slice a long window into overlapping segments.

    Segments start at offsets 0, stride, 2*stride, ...; the count is
    floor((T - window_len) / stride) + 1. Segment samples are views into the
    input array.
    """
    if window_len < 2:
        raise ValueError("window_len must be >= 2")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = series.n_samples
    if window_len > n:
        raise WindowLongerThanSeriesError(
            f"window_len {window_len} exceeds series length {n}")
    out = []
    for start in range(0, n - window_len + 1, stride):
        out.append(SensorWindow(
            samples=series.samples[start:start + window_len],
            rate_hz=series.rate_hz,
            label_id=series.label_id,
        ))
    return out


def few_shot_subset(dataset: LabeledDataset, n: Optional[int], seed: int = 0) -> LabeledDataset:
    """Sample min(n, available) windows per class, uniformly without replacement.

    n=ALL (None) returns the dataset unchanged. Selected windows keep their
    original relative order; the draw is deterministic for a fixed seed.
    """
    if n is ALL:
        return dataset
    if n < 1:
        raise ValueError("n must be >= 1 or ALL")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {c: [] for c in range(len(dataset.catalog))}
    for i, w in enumerate(dataset.windows):
        if w.label_id is not None:
            by_class[w.label_id].append(i)
    chosen: list[int] = []
    for c in range(len(dataset.catalog)):
        ids = by_class[c]
        if not ids:
            raise ClassAbsentError(
                f"class {dataset.catalog.names[c]!r} has no windows")
        take = min(n, len(ids))
        chosen.extend(rng.choice(ids, size=take, replace=False).tolist())
    chosen.sort()
    return LabeledDataset(
        windows=tuple(dataset.windows[i] for i in chosen),
        catalog=dataset.catalog,
    )


def synth_generate(spec: SynthSpec) -> LabeledDataset:
    """Generate a labeled dataset of noisy class-specific sinusoids.

    Class c emits sinusoids at base_freqs[c] with per-channel phase offsets
    drawn once per (class, channel) pair, plus i.i.d. Gaussian noise. The
    result is byte-identical for identical specs.
    """
    rng = np.random.default_rng(spec.seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(spec.classes, spec.channels))
    t = np.arange(spec.window_len) / spec.rate_hz
    windows = []
    for c in range(spec.classes):
        base = np.sin(2.0 * np.pi * spec.base_freqs[c] * t[:, None] + phases[c][None, :])
        for _ in range(spec.windows_per_class):
            noise = spec.noise_std * rng.standard_normal((spec.window_len, spec.channels))
            windows.append(SensorWindow(samples=base + noise, rate_hz=spec.rate_hz,
                                        label_id=c))
    catalog = ClassCatalog(tuple(f"class_{c}" for c in range(spec.classes)))
    return LabeledDataset(windows=tuple(windows), catalog=catalog)
