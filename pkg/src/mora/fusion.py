"""Label-space distributions: retrieval semantics, base models, static fusion.

Retrieved neighbor labels are turned into a class distribution by embedding
label text and softmaxing temperature-scaled similarities against the
class-text matrix. The final prediction mixes the base model's distribution
with the retrieval distribution:

    final = alpha * base + (1 - alpha) * retrieval,  alpha in [0, 1]

Label-utilization strategies: "combine" joins the retrieved labels into one
text and embeds it once; "independent" embeds each retrieved label and
averages the per-label distributions; "weighted" does the same with weights
decaying exponentially in retrieval rank.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .encoders import Embedding, LabelEmbeddingTable, embed_label, encode_statistical
from .errors import (
    AlphaOutOfRangeError,
    ClassAbsentError,
    LengthMismatchError,
    NoNeighborsError,
    NotFittedError,
    RowMissingError,
)
from .signals import ClassCatalog, LabeledDataset, SensorWindow
from .store import Neighbor

STRATEGIES = ("combine", "independent", "weighted")


@dataclass(frozen=True)
class FusionConfig:
    """Static fusion hyperparameters (defaults: alpha 0.5, k 5, tau 20)."""

    alpha: float = 0.5
    k: int = 5
    tau: float = 20.0
    strategy: str = "combine"
    decay: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise AlphaOutOfRangeError(f"alpha {self.alpha} outside [0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def entropy(dist) -> float:
    """Shannon entropy in nats; 0 log 0 counts as 0."""
    p = np.asarray(dist, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def fuse_static(c_ref, c_rag, alpha: float) -> np.ndarray:
    """Convex mix alpha * c_ref + (1 - alpha) * c_rag."""
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRangeError(f"alpha {alpha} outside [0, 1]")
    a = np.asarray(c_ref, dtype=np.float64)
    b = np.asarray(c_rag, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatchError(f"distribution lengths {a.shape} != {b.shape}")
    return alpha * a + (1.0 - alpha) * b


def class_text_matrix(catalog: ClassCatalog, table: LabelEmbeddingTable) -> np.ndarray:
    """One unit-norm text-embedding row per catalog class, in catalog order."""
    return np.asarray([embed_label(table, name).vector for name in catalog.names])


def rag_distribution(neighbors: Sequence[Neighbor], catalog: ClassCatalog,
                     table: LabelEmbeddingTable, text_matrix: np.ndarray,
                     config: FusionConfig) -> np.ndarray:
    """Distribution over classes from retrieved neighbor labels.

    Only the labels and their ranks matter; neighbor similarity values do not
    enter. tau = 0 yields the uniform distribution.
    """
    if len(neighbors) == 0:
        raise NoNeighborsError("retrieval returned no neighbors")
    labels = [catalog.names[nb.label_id] for nb in neighbors]
    if config.strategy == "combine":
        joined = ", ".join(labels)
        t_q = embed_label(table, joined).vector
        return softmax(config.tau * (text_matrix @ t_q))
    per_label = np.asarray([
        softmax(config.tau * (text_matrix @ embed_label(table, lb).vector))
        for lb in labels])
    if config.strategy == "independent":
        return per_label.mean(axis=0)
    weights = config.decay ** np.arange(len(labels))
    weights = weights / weights.sum()
    return weights @ per_label


class CentroidModel:
    """Nearest-centroid base model over signal embeddings.

    Prediction is a softmax over negative Euclidean distances to the per-class
    centroids, so far-from-everything queries come out near-uniform.
    """

    def __init__(self, centroids: np.ndarray,
                 encoder: Callable[[SensorWindow], Embedding] = encode_statistical):
        self.centroids = np.asarray(centroids, dtype=np.float64)
        self.centroids.setflags(write=False)
        self.encoder = encoder

    @classmethod
    def fit(cls, dataset: LabeledDataset,
            encoder: Callable[[SensorWindow], Embedding] = encode_statistical
            ) -> "CentroidModel":
        vecs = np.asarray([encoder(w).vector for w in dataset.windows])
        labels = np.asarray([w.label_id for w in dataset.windows])
        cents = []
        for c in range(len(dataset.catalog)):
            members = vecs[labels == c]
            if len(members) == 0:
                raise ClassAbsentError(
                    f"class {dataset.catalog.names[c]!r} has no training windows")
            cents.append(members.mean(axis=0))
        return cls(centroids=np.asarray(cents), encoder=encoder)

    @classmethod
    def from_database(cls, kb, encoder: Callable[[SensorWindow], Embedding]
                      = encode_statistical) -> "CentroidModel":
        """Fit centroids directly from knowledge-base records."""
        emb = kb.embeddings.astype(np.float64)
        cents = []
        for c in range(len(kb.catalog)):
            members = emb[kb.label_ids == c]
            if len(members) == 0:
                raise ClassAbsentError(f"class {kb.catalog.names[c]!r} has no records")
            cents.append(members.mean(axis=0))
        return cls(centroids=np.asarray(cents), encoder=encoder)

    def predict(self, window: SensorWindow) -> np.ndarray:
        if self.centroids.size == 0:
            raise NotFittedError("centroid model has no centroids")
        z = self.encoder(window).vector
        dists = np.linalg.norm(self.centroids - z, axis=1)
        return softmax(-dists)

    def state_digest(self) -> str:
        return hashlib.sha256(self.centroids.tobytes()).hexdigest()


class ExternalProbsModel:
    """Base distributions supplied row-per-query by an external file."""

    def __init__(self, rows: np.ndarray):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2:
            raise RowMissingError("external probabilities must be a (n, C) matrix")
        rows.setflags(write=False)
        self.rows = rows

    @classmethod
    def from_file(cls, path, n_classes: Optional[int] = None) -> "ExternalProbsModel":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for ln, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rows.append([float(tok) for tok in line.split()])
                except ValueError as exc:
                    raise RowMissingError(f"{path}:{ln}: unparseable value") from exc
        if not rows:
            raise RowMissingError(f"{path}: no rows")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise RowMissingError(f"{path}: inconsistent row widths {sorted(widths)}")
        mat = np.asarray(rows)
        if n_classes is not None and mat.shape[1] != n_classes:
            raise RowMissingError(
                f"{path}: rows have {mat.shape[1]} entries, expected {n_classes}")
        return cls(mat)

    def predict(self, index: int) -> np.ndarray:
        if not 0 <= index < self.rows.shape[0]:
            raise RowMissingError(f"no probability row for query {index}")
        row = self.rows[index]
        total = row.sum()
        if np.any(row < 0) or total <= 0:
            raise RowMissingError(f"row {index} is not a usable distribution")
        return row / total

    def state_digest(self) -> str:
        return hashlib.sha256(self.rows.tobytes()).hexdigest()


def base_predict(model, query) -> np.ndarray:
    """Base-model distribution for a query window (or row index for
    file-backed models)."""
    return model.predict(query)
