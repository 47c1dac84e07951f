"""Physics-informed window features and their normalization.

The feature vector concatenates, in this fixed order:

1. Pearson correlation of every channel pair (i < j, lexicographic)
2. per-channel variance (population)
3. per-channel mean absolute deviation from the channel mean
4. per-channel zero-crossing rate of the mean-removed signal
5. per-channel range (max - min) of variances over sliding sub-windows
   (length 10 samples, stride 5; 0.5 s / 0.25 s at 20 Hz)

giving dimension M(M-1)/2 + 4M for M channels. Zero-variance channels
contribute correlation 0 by convention; values within a relative deadband of
the channel mean count as exact zeros for crossing purposes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DimMismatchError, EmptySetError
from .signals import SensorWindow

LOCAL_VAR_WIN = 10
LOCAL_VAR_STRIDE = 5
STD_FLOOR = 1e-8
_ZERO_TOL = 1e-12


def feature_dim(n_channels: int) -> int:
    """Dimension of the feature vector for a given channel count."""
    return n_channels * (n_channels - 1) // 2 + 4 * n_channels


def extract_features(window: SensorWindow) -> np.ndarray:
    x = window.samples
    n, m = x.shape
    mu = x.mean(axis=0)
    xc = x - mu
    var = np.mean(xc ** 2, axis=0)
    mad = np.mean(np.abs(xc), axis=0)
    sd = np.sqrt(var)

    # correlation is 0 for (numerically) constant channels
    dead = sd <= _ZERO_TOL * (1.0 + np.abs(mu))
    corrs = []
    for i in range(m):
        for j in range(i + 1, m):
            if dead[i] or dead[j]:
                corrs.append(0.0)
            else:
                corrs.append(float(np.mean(xc[:, i] * xc[:, j]) / (sd[i] * sd[j])))

    signs = np.sign(xc)
    signs[np.abs(xc) <= _ZERO_TOL * (1.0 + np.abs(mu))[None, :]] = 0.0
    zcr = np.sum(signs[1:] * signs[:-1] < 0, axis=0) / (n - 1)

    if n >= LOCAL_VAR_WIN:
        starts = range(0, n - LOCAL_VAR_WIN + 1, LOCAL_VAR_STRIDE)
        local = np.array([x[s:s + LOCAL_VAR_WIN].var(axis=0) for s in starts])
        local_range = local.max(axis=0) - local.min(axis=0)
    else:
        local_range = np.zeros(m)

    return np.concatenate([np.asarray(corrs), var, mad, zcr, local_range])


@dataclass(frozen=True)
class FeatureNormalizer:
    """Per-dimension mean and (floored) population standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise DimMismatchError("mean and std must be 1-D and equal length")
        if np.any(std <= 0):
            raise ValueError("std entries must be positive")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_normalizer(feature_set: Iterable[np.ndarray]) -> FeatureNormalizer:
    """Fit per-dimension mean/std over a set of feature vectors.

    Standard deviations are population (divide by n) and floored at 1e-8 so a
    single sample still yields a usable normalizer.
    """
    mat = np.asarray(list(feature_set), dtype=np.float64)
    if mat.size == 0:
        raise EmptySetError("cannot fit a normalizer on an empty set")
    if mat.ndim != 2:
        raise DimMismatchError("feature set must be a sequence of equal-length vectors")
    mean = mat.mean(axis=0)
    std = np.maximum(mat.std(axis=0), STD_FLOOR)
    return FeatureNormalizer(mean=mean, std=std)


def normalize(phi: np.ndarray, normalizer: FeatureNormalizer) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != normalizer.mean.shape:
        raise DimMismatchError(
            f"feature dim {phi.shape} does not match normalizer dim "
            f"{normalizer.mean.shape}")
    return (phi - normalizer.mean) / normalizer.std
