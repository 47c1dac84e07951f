"""Embedding producers: signal encoders, text hashing, PCA projection.

Every producer emits unit-norm vectors so cosine similarity reduces to an
inner product downstream. The statistical signal encoder is a deterministic
stand-in for a pretrained network; real encoder outputs enter through
load_external_embeddings, and label text enters either through a table file
or the hashing fallback.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    CountMismatchError,
    DimInconsistentError,
    DimMismatchError,
    EmptyTextError,
    TooFewSamplesError,
    UnknownLabelError,
)
from .features import extract_features
from .signals import LabeledDataset, SensorWindow

DEFAULT_TEXT_DIM = 64

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class Embedding:
    """A finite real vector, unit-norm when the normalized flag is set."""

    vector: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1:
            raise DimMismatchError("embedding vector must be 1-D")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding vector must be finite")
        if self.normalized and abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ValueError("normalized embedding must have unit L2 norm")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


def _unit(v: np.ndarray) -> np.ndarray:
    """L2-normalize; an all-zero vector maps to the first basis vector."""
    norm = np.linalg.norm(v)
    if norm == 0.0:
        out = np.zeros_like(v, dtype=np.float64)
        out[0] = 1.0
        return out
    return v / norm


def encode_statistical(window: SensorWindow) -> Embedding:
    """Deterministic reference encoder.

    Concatenates the physics feature vector with per-channel
    [mean, min, max, RMS] and L2-normalizes; dimension is
    M(M-1)/2 + 8M for M channels.
    """
    x = window.samples
    stats = np.concatenate([
        x.mean(axis=0),
        x.min(axis=0),
        x.max(axis=0),
        np.sqrt(np.mean(x ** 2, axis=0)),
    ])
    return Embedding(vector=_unit(np.concatenate([extract_features(window), stats])))


def load_external_embeddings(path, dataset: LabeledDataset) -> list[Embedding]:
    """Load one embedding per dataset window from a whitespace-separated file.

    Row order matches window order; rows are L2-normalized on load.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = np.array([float(tok) for tok in line.split()])
            except ValueError as exc:
                raise DimInconsistentError(f"{path}:{ln}: unparseable value") from exc
            if not np.all(np.isfinite(row)):
                raise DimInconsistentError(f"{path}:{ln}: non-finite value")
            if np.linalg.norm(row) == 0.0:
                raise DimInconsistentError(f"{path}:{ln}: zero vector cannot be normalized")
            rows.append(row)
    if len(rows) != len(dataset):
        raise CountMismatchError(
            f"{path}: {len(rows)} rows for {len(dataset)} windows")
    dims = {r.shape[0] for r in rows}
    if len(dims) > 1:
        raise DimInconsistentError(f"{path}: inconsistent dimensions {sorted(dims)}")
    return [Embedding(vector=_unit(r)) for r in rows]


@dataclass(frozen=True)
class PcaModel:
    """Mean vector plus orthonormal principal directions."""

    mean: np.ndarray
    components: np.ndarray          # (d_out, d_in), rows orthonormal
    explained_variances: np.ndarray  # non-increasing

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        comp = np.asarray(self.components, dtype=np.float64)
        ev = np.asarray(self.explained_variances, dtype=np.float64)
        if comp.ndim != 2 or comp.shape[1] != mean.shape[0]:
            raise DimMismatchError("components must be (d_out, d_in) matching mean")
        if comp.shape[0] > comp.shape[1]:
            raise DimMismatchError("d_out must not exceed d_in")
        gram = comp @ comp.T
        if not np.allclose(gram, np.eye(comp.shape[0]), atol=1e-6):
            raise ValueError("component rows must be orthonormal")
        if np.any(np.diff(ev) > 1e-9):
            raise ValueError("explained variances must be non-increasing")
        for a in (mean, comp, ev):
            a.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comp)
        object.__setattr__(self, "explained_variances", ev)

    @property
    def d_out(self) -> int:
        return self.components.shape[0]


def pca_fit(embeddings, d_out: int) -> PcaModel:
    """Fit PCA via SVD of the centered embedding matrix.

    Components are the top-d_out right singular vectors with a deterministic
    sign convention (largest-magnitude entry positive); explained variances
    are population variances along each component.
    """
    vecs = [e.vector if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64)
            for e in embeddings]
    if d_out < 1:
        raise ValueError("d_out must be >= 1")
    if len(vecs) < d_out:
        raise TooFewSamplesError(f"{len(vecs)} samples < d_out={d_out}")
    mat = np.asarray(vecs)
    if mat.ndim != 2:
        raise DimMismatchError("embeddings must share a common dimension")
    if d_out > mat.shape[1]:
        raise DimMismatchError("d_out must not exceed the input dimension")
    mean = mat.mean(axis=0)
    centered = mat - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    comp = vt[:d_out]
    # stable sign: make each row's largest-|.| coefficient positive
    pivot = np.argmax(np.abs(comp), axis=1)
    flip = np.sign(comp[np.arange(d_out), pivot])
    flip[flip == 0] = 1.0
    comp = comp * flip[:, None]
    ev = (svals[:d_out] ** 2) / mat.shape[0]
    return PcaModel(mean=mean, components=comp, explained_variances=ev)


def pca_transform(model: PcaModel, vector: np.ndarray) -> np.ndarray:
    """Raw linear projection components @ (v - mean), without re-normalization."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != model.mean.shape:
        raise DimMismatchError(
            f"vector dim {v.shape} does not match model dim {model.mean.shape}")
    return model.components @ (v - model.mean)


def pca_project(model: PcaModel, embedding: Embedding) -> Embedding:
    """Project into the principal subspace and re-normalize to unit length."""
    return Embedding(vector=_unit(pca_transform(model, embedding.vector)))


def _fnv1a64(token: str) -> int:
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def _tokenize(text: str) -> list[str]:
    # lowercase, split on whitespace, strip surrounding punctuation so that
    # joined label lists ("walk, sit") tokenize like the bare labels
    stripped = (raw.strip(string.punctuation) for raw in text.lower().split())
    return [tok for tok in stripped if tok]


def hash_embed_text(text: str, d_text: int = DEFAULT_TEXT_DIM) -> Embedding:
    """Deterministic signed feature-hashing text embedding.

    Each token is hashed with 64-bit FNV-1a; the hash picks a coordinate
    (mod d_text) and a sign (bit 63), token contributions are summed and the
    result L2-normalized. Bag-of-words: token order does not matter.
    """
    if d_text < 1:
        raise ValueError("d_text must be >= 1")
    tokens = _tokenize(text)
    if not tokens:
        raise EmptyTextError(f"no tokens in text {text!r}")
    acc = np.zeros(d_text)
    for tok in tokens:
        h = _fnv1a64(tok)
        sign = -1.0 if (h >> 63) & 1 else 1.0
        acc[h % d_text] += sign
    return Embedding(vector=_unit(acc))


@dataclass(frozen=True)
class LabelEmbeddingTable:
    """Label -> embedding rows with an optional hashing fallback."""

    rows: dict[str, np.ndarray] = field(default_factory=dict)
    d_text: int = DEFAULT_TEXT_DIM
    fallback_enabled: bool = True

    def __post_init__(self):
        fixed = {}
        for label, vec in self.rows.items():
            v = _unit(np.asarray(vec, dtype=np.float64))
            if v.shape[0] != self.d_text:
                raise DimInconsistentError(
                    f"label {label!r} has dim {v.shape[0]}, table dim {self.d_text}")
            v.setflags(write=False)
            fixed[label] = v
        object.__setattr__(self, "rows", fixed)

    @classmethod
    def hashed(cls, d_text: int = DEFAULT_TEXT_DIM) -> "LabelEmbeddingTable":
        """Empty table: every lookup goes through the hashing fallback."""
        return cls(rows={}, d_text=d_text, fallback_enabled=True)

    @classmethod
    def from_file(cls, path, fallback_enabled: bool = True) -> "LabelEmbeddingTable":
        """Load a tab-separated table: `label<TAB>f_0 f_1 ... f_{d-1}`."""
        rows: dict[str, np.ndarray] = {}
        d_text: Optional[int] = None
        with open(path, encoding="utf-8") as fh:
            for ln, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                try:
                    label, payload = line.split("\t", 1)
                except ValueError:
                    raise DimInconsistentError(f"{path}:{ln}: missing tab separator") from None
                try:
                    vec = np.array([float(tok) for tok in payload.split()])
                except ValueError as exc:
                    raise DimInconsistentError(f"{path}:{ln}: unparseable value") from exc
                if not np.all(np.isfinite(vec)) or vec.size == 0:
                    raise DimInconsistentError(f"{path}:{ln}: invalid embedding row")
                if d_text is None:
                    d_text = vec.size
                elif vec.size != d_text:
                    raise DimInconsistentError(
                        f"{path}:{ln}: dim {vec.size} != {d_text}")
                rows[label] = vec
        if d_text is None:
            raise DimInconsistentError(f"{path}: empty label table")
        return cls(rows=rows, d_text=d_text, fallback_enabled=fallback_enabled)


def embed_label(table: LabelEmbeddingTable, label: str) -> Embedding:
    """Look up a label embedding, hashing it when absent and fallback is on."""
    if not label:
        raise EmptyTextError("label must be non-empty")
    row = table.rows.get(label)
    if row is not None:
        return Embedding(vector=row)
    if table.fallback_enabled:
        return hash_embed_text(label, table.d_text)
    raise UnknownLabelError(f"label {label!r} not in table and fallback disabled")
