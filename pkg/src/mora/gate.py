"""Uncertainty-adaptive gate: per-instance fusion ratio, trained end to end.

A small network maps normalized physics features to alpha in (0, 1):

    alpha = sigmoid(w2 . tanh(W1 phi + b1) + b2)

Training minimizes three batch-mean losses: cross-entropy of the fused
distribution at the true label, binary cross-entropy between alpha and an
entropy-derived target alpha_hat = 1 - H(c_ref)/ln(C), and a sparsity term
beta_y * alpha * (1 - alpha) with a learnable positive per-class beta. The
loss weights are learned jointly via homoscedastic uncertainty weighting,

    total = sum_k exp(-s_k) * L_k + s_k,

which keeps each effective weight exp(-s_k) strictly positive and cannot
collapse to zero. Gradients are analytic (see grad_total) and the optimizer
is adaptive-moment gradient descent with decoupled weight decay of zero; the
retrieval database and the base model are never touched.
"""

from __future__ import annotations

import hashlib
import struct
import time
import zlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .encoders import Embedding, LabelEmbeddingTable, encode_statistical
from .errors import (
    BadMagicError,
    ChecksumMismatchError,
    DimMismatchError,
    EmptyBatchError,
    EmptyDatasetError,
    UnlabeledWindowError,
    VersionUnsupportedError,
)
from .features import FeatureNormalizer, extract_features, fit_normalizer, normalize
from .fusion import (
    ExternalProbsModel,
    FusionConfig,
    class_text_matrix,
    entropy,
    rag_distribution,
)
from .signals import LabeledDataset, SensorWindow
from .store import KnowledgeBase, knn_exact

GATE_MAGIC = b"MORAGT01"
GATE_VERSION = 1

DEFAULT_HIDDEN = 64
_BETA_RAW_ONE = float(np.log(np.e - 1.0))  # softplus(x) = 1


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


@dataclass
class GateNetwork:
    """Trainable gate parameters. Mutated in place by train_gate."""

    w1: np.ndarray        # (hidden, d_phi)
    b1: np.ndarray        # (hidden,)
    w2: np.ndarray        # (hidden,)
    b2: float
    beta_raw: np.ndarray  # (n_classes,); beta = softplus(beta_raw)
    s: np.ndarray         # (3,) loss log-variances, order [cls, align, sparse]

    @classmethod
    def init(cls, d_phi: int, n_classes: int, hidden: int = DEFAULT_HIDDEN,
             seed: int = 0) -> "GateNetwork":
        rng = np.random.default_rng(seed)
        return cls(
            w1=rng.normal(0.0, 1.0 / np.sqrt(d_phi), size=(hidden, d_phi)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, 1.0 / np.sqrt(hidden), size=hidden),
            b2=0.0,
            beta_raw=np.full(n_classes, _BETA_RAW_ONE),
            s=np.zeros(3),
        )

    @property
    def d_phi(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.beta_raw.shape[0]

    @property
    def param_count(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + 1 + self.beta_raw.size + self.s.size

    def beta(self) -> np.ndarray:
        return _softplus(self.beta_raw)

    def effective_lambda(self) -> np.ndarray:
        return np.exp(-self.s)

    # flat parameter vector, fixed order; used by the finite-difference checks
    def params_vector(self) -> np.ndarray:
        return np.concatenate([
            self.w1.ravel(), self.b1, self.w2, [self.b2], self.beta_raw, self.s])

    def set_params_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.param_count,):
            raise DimMismatchError("parameter vector has the wrong length")
        h, d, c = self.hidden, self.d_phi, self.n_classes
        pos = 0
        self.w1 = vec[pos:pos + h * d].reshape(h, d).copy(); pos += h * d
        self.b1 = vec[pos:pos + h].copy(); pos += h
        self.w2 = vec[pos:pos + h].copy(); pos += h
        self.b2 = float(vec[pos]); pos += 1
        self.beta_raw = vec[pos:pos + c].copy(); pos += c
        self.s = vec[pos:pos + 3].copy()

    def state_digest(self) -> bytes:
        return hashlib.sha256(self.params_vector().tobytes()).digest()


@dataclass(frozen=True)
class TrainingBatch:
    """Precomputed gate inputs: features, distributions, true labels."""

    phi: np.ndarray     # (n, d_phi), already normalized
    c_ref: np.ndarray   # (n, C)
    c_rag: np.ndarray   # (n, C)
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64)
        c_ref = np.asarray(self.c_ref, dtype=np.float64)
        c_rag = np.asarray(self.c_rag, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if phi.ndim != 2 or phi.shape[0] == 0:
            raise EmptyBatchError("batch must contain at least one instance")
        n = phi.shape[0]
        if c_ref.shape[0] != n or c_rag.shape[0] != n or labels.shape != (n,):
            raise DimMismatchError("batch arrays disagree on instance count")
        if c_ref.shape != c_rag.shape:
            raise DimMismatchError("c_ref and c_rag must have equal shapes")
        for a in (phi, c_ref, c_rag, labels):
            a.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "c_ref", c_ref)
        object.__setattr__(self, "c_rag", c_rag)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.phi.shape[0]

    def select(self, ids: np.ndarray) -> "TrainingBatch":
        return TrainingBatch(phi=self.phi[ids], c_ref=self.c_ref[ids],
                             c_rag=self.c_rag[ids], labels=self.labels[ids])


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 100
    batch_size: Optional[int] = None  # None = full batch
    seed: int = 0
    eps_clamp: float = 1e-7

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.eps_clamp < 0.5:
            raise ValueError("eps_clamp must lie in (0, 0.5)")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    cls: float
    align: float
    sparse: float


@dataclass(frozen=True)
class GateGradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    beta_raw: np.ndarray
    s: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([
            self.w1.ravel(), self.b1, self.w2, [self.b2], self.beta_raw, self.s])


@dataclass
class TrainReport:
    """Per-epoch loss curves and the final loss weighting."""

    loss_total: np.ndarray
    loss_cls: np.ndarray
    loss_align: np.ndarray
    loss_sparse: np.ndarray
    lambdas: np.ndarray          # (epochs, 3) effective weights per epoch
    final_lambda: np.ndarray     # (3,)
    wall_time_s: float
    normalizer: Optional[FeatureNormalizer] = None


def gate_forward(gate: GateNetwork, phi_normalized: np.ndarray) -> float:
    """Per-instance fusion ratio alpha in (0, 1)."""
    phi = np.asarray(phi_normalized, dtype=np.float64)
    if phi.shape != (gate.d_phi,):
        raise DimMismatchError(
            f"feature dim {phi.shape} does not match gate input ({gate.d_phi},)")
    hidden = np.tanh(gate.w1 @ phi + gate.b1)
    return float(_sigmoid(gate.w2 @ hidden + gate.b2))


def gate_forward_batch(gate: GateNetwork, phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 2 or phi.shape[1] != gate.d_phi:
        raise DimMismatchError("phi must be (n, d_phi)")
    hidden = np.tanh(phi @ gate.w1.T + gate.b1)
    return _sigmoid(hidden @ gate.w2 + gate.b2)


def alpha_target(c_ref) -> float:
    """Entropy-derived supervision target: 1 - H(c_ref)/ln(C), clamped to [0, 1].

    A uniform (maximally uncertain) base distribution maps to 0, shifting all
    weight to retrieval; a one-hot distribution maps to 1.
    """
    p = np.asarray(c_ref, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise DimMismatchError("c_ref must be a distribution over >= 2 classes")
    return float(np.clip(1.0 - entropy(p) / np.log(p.shape[0]), 0.0, 1.0))


def _forward_pieces(gate: GateNetwork, batch: TrainingBatch, eps: float):
    n = len(batch)
    z = batch.phi @ gate.w1.T + gate.b1
    hidden = np.tanh(z)
    u = hidden @ gate.w2 + gate.b2
    alpha = _sigmoid(u)

    c_final = alpha[:, None] * batch.c_ref + (1.0 - alpha[:, None]) * batch.c_rag
    rows = np.arange(n)
    p_true = c_final[rows, batch.labels]
    p_clip = np.clip(p_true, eps, 1.0 - eps)
    l_cls = -np.log(p_clip)

    a_hat = np.array([alpha_target(batch.c_ref[i]) for i in range(n)])
    a_clip = np.clip(alpha, eps, 1.0 - eps)
    l_align = -(a_hat * np.log(a_clip) + (1.0 - a_hat) * np.log(1.0 - a_clip))

    beta = gate.beta()
    beta_y = beta[batch.labels]
    l_sparse = beta_y * alpha * (1.0 - alpha)

    comps = np.array([l_cls.mean(), l_align.mean(), l_sparse.mean()])
    lam = gate.effective_lambda()
    total = float(np.sum(lam * comps + gate.s))
    return {
        "hidden": hidden, "alpha": alpha, "p_true": p_true, "p_clip": p_clip,
        "a_hat": a_hat, "a_clip": a_clip, "beta_y": beta_y, "comps": comps,
        "lam": lam, "total": total,
    }


def loss_total(gate: GateNetwork, batch: TrainingBatch,
               eps: float = 1e-7) -> LossBreakdown:
    """Composite training loss and its components (batch means)."""
    f = _forward_pieces(gate, batch, eps)
    comps = f["comps"]
    return LossBreakdown(total=f["total"], cls=float(comps[0]),
                         align=float(comps[1]), sparse=float(comps[2]))


def grad_total(gate: GateNetwork, batch: TrainingBatch,
               eps: float = 1e-7) -> GateGradients:
    """Analytic gradient of loss_total for every trainable parameter.

    Clamped log arguments contribute zero gradient outside the clamp range
    (hard clipping), matching the loss exactly. Nothing upstream of the gate
    (encoder, database, base model) receives a gradient.
    """
    f = _forward_pieces(gate, batch, eps)
    n = len(batch)
    alpha, hidden = f["alpha"], f["hidden"]
    lam = f["lam"]

    dp_dalpha = batch.c_ref[np.arange(n), batch.labels] - \
        batch.c_rag[np.arange(n), batch.labels]
    inside_p = (f["p_true"] > eps) & (f["p_true"] < 1.0 - eps)
    dcls = np.where(inside_p, -dp_dalpha / f["p_clip"], 0.0)

    inside_a = (alpha > eps) & (alpha < 1.0 - eps)
    dalign = np.where(
        inside_a,
        -f["a_hat"] / f["a_clip"] + (1.0 - f["a_hat"]) / (1.0 - f["a_clip"]),
        0.0)

    dsparse = f["beta_y"] * (1.0 - 2.0 * alpha)

    g_alpha = (lam[0] * dcls + lam[1] * dalign + lam[2] * dsparse) / n
    g_u = g_alpha * alpha * (1.0 - alpha)

    grad_w2 = hidden.T @ g_u
    grad_b2 = float(g_u.sum())
    g_z = (g_u[:, None] * gate.w2[None, :]) * (1.0 - hidden ** 2)
    grad_w1 = g_z.T @ batch.phi
    grad_b1 = g_z.sum(axis=0)

    grad_beta_raw = np.zeros_like(gate.beta_raw)
    np.add.at(grad_beta_raw, batch.labels, alpha * (1.0 - alpha))
    grad_beta_raw *= lam[2] / n * _sigmoid(gate.beta_raw)

    grad_s = 1.0 - lam * f["comps"]

    return GateGradients(w1=grad_w1, b1=grad_b1, w2=grad_w2, b2=grad_b2,
                         beta_raw=grad_beta_raw, s=grad_s)


def prepare_training_batch(dataset: LabeledDataset, kb: KnowledgeBase, base_model,
                           fusion: FusionConfig,
                           label_table: Optional[LabelEmbeddingTable] = None,
                           encoder: Callable[[SensorWindow], Embedding] = encode_statistical,
                           normalizer: Optional[FeatureNormalizer] = None,
                           ) -> tuple[TrainingBatch, FeatureNormalizer]:
    """Precompute (phi, c_ref, c_rag, y) for every labeled window.

    The normalizer is fitted on this dataset's raw features unless one is
    supplied (e.g. at inference time).
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    if label_table is None:
        label_table = LabelEmbeddingTable.hashed()
    text_matrix = class_text_matrix(kb.catalog, label_table)

    raw_phi = [extract_features(w) for w in dataset.windows]
    if normalizer is None:
        normalizer = fit_normalizer(raw_phi)

    phi, c_ref, c_rag, labels = [], [], [], []
    for i, w in enumerate(dataset.windows):
        if w.label_id is None:
            raise UnlabeledWindowError(f"window {i} has no label")
        phi.append(normalize(raw_phi[i], normalizer))
        if isinstance(base_model, ExternalProbsModel):
            c_ref.append(base_model.predict(i))
        else:
            c_ref.append(base_model.predict(w))
        neighbors = knn_exact(kb, encoder(w), fusion.k)
        c_rag.append(rag_distribution(neighbors, kb.catalog, label_table,
                                      text_matrix, fusion))
        labels.append(w.label_id)
    batch = TrainingBatch(phi=np.asarray(phi), c_ref=np.asarray(c_ref),
                          c_rag=np.asarray(c_rag), labels=np.asarray(labels))
    return batch, normalizer


class _AdamState:
    def __init__(self, shapes):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0


def _adam_step(params: list[np.ndarray], grads: list[np.ndarray],
               state: _AdamState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    state.t += 1
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / (1.0 - beta1 ** state.t)
        v_hat = state.v[i] / (1.0 - beta2 ** state.t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def train_gate(gate: GateNetwork, dataset, kb: KnowledgeBase, base_model,
               config: TrainConfig,
               fusion: Optional[FusionConfig] = None,
               label_table: Optional[LabelEmbeddingTable] = None,
               encoder: Callable[[SensorWindow], Embedding] = encode_statistical,
               ) -> TrainReport:
    """Train the gate in place; database and base model stay frozen.

    Accepts either a LabeledDataset (inputs are precomputed once) or an
    already-prepared TrainingBatch. Deterministic for a fixed config seed.
    """
    t_start = time.perf_counter()
    if fusion is None:
        fusion = FusionConfig()
    if isinstance(dataset, TrainingBatch):
        batch, normalizer = dataset, None
    else:
        batch, normalizer = prepare_training_batch(
            dataset, kb, base_model, fusion, label_table, encoder)

    rng = np.random.default_rng(config.seed)
    b2_arr = np.array([gate.b2])
    arrs = [gate.w1, gate.b1, gate.w2, b2_arr, gate.beta_raw, gate.s]
    state = _AdamState([a.shape for a in arrs])

    n = len(batch)
    bsz = config.batch_size or n
    totals = np.empty(config.epochs)
    comps = np.empty((config.epochs, 3))
    lambdas = np.empty((config.epochs, 3))
    for epoch in range(config.epochs):
        order = rng.permutation(n) if bsz < n else np.arange(n)
        for start in range(0, n, bsz):
            sub = batch.select(order[start:start + bsz])
            g = grad_total(gate, sub, eps=config.eps_clamp)
            grads = [g.w1, g.b1, g.w2, np.array([g.b2]), g.beta_raw, g.s]
            _adam_step(arrs, grads, state, config.lr)
            gate.b2 = float(b2_arr[0])
        breakdown = loss_total(gate, batch, eps=config.eps_clamp)
        totals[epoch] = breakdown.total
        comps[epoch] = (breakdown.cls, breakdown.align, breakdown.sparse)
        lambdas[epoch] = gate.effective_lambda()

    return TrainReport(
        loss_total=totals,
        loss_cls=comps[:, 0],
        loss_align=comps[:, 1],
        loss_sparse=comps[:, 2],
        lambdas=lambdas,
        final_lambda=lambdas[-1].copy(),
        wall_time_s=time.perf_counter() - t_start,
        normalizer=normalizer,
    )


# --- checkpoint persistence ----------------------------------------------------


def save_gate(gate: GateNetwork, path,
              normalizer: Optional[FeatureNormalizer] = None) -> None:
    """Write a gate checkpoint: all parameters as little-endian f64 plus an
    optional feature normalizer, guarded by a trailing CRC32."""
    parts = [GATE_MAGIC,
             struct.pack("<IIII", GATE_VERSION, gate.d_phi, gate.hidden,
                         gate.n_classes),
             struct.pack("<B", 1 if normalizer is not None else 0)]
    parts.append(gate.params_vector().astype("<f8").tobytes())
    if normalizer is not None:
        if normalizer.dim != gate.d_phi:
            raise DimMismatchError("normalizer dim does not match gate input dim")
        parts.append(normalizer.mean.astype("<f8").tobytes())
        parts.append(normalizer.std.astype("<f8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_gate(path) -> tuple[GateNetwork, Optional[FeatureNormalizer]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(GATE_MAGIC) or blob[:len(GATE_MAGIC)] != GATE_MAGIC:
        raise BadMagicError(f"{path}: not a mora gate checkpoint")
    if len(blob) < len(GATE_MAGIC) + 4:
        raise ChecksumMismatchError(f"{path}: truncated file")
    body, crc_bytes = blob[:-4], blob[-4:]
    if zlib.crc32(body) != struct.unpack("<I", crc_bytes)[0]:
        raise ChecksumMismatchError(f"{path}: checksum mismatch")
    pos = len(GATE_MAGIC)
    version, d_phi, hidden, n_classes = struct.unpack_from("<IIII", body, pos)
    pos += 16
    if version != GATE_VERSION:
        raise VersionUnsupportedError(f"{path}: version {version} unsupported")
    (has_norm,) = struct.unpack_from("<B", body, pos)
    pos += 1
    n_params = hidden * d_phi + 2 * hidden + 1 + n_classes + 3
    need = n_params * 8 + (2 * d_phi * 8 if has_norm else 0)
    if len(body) - pos != need:
        raise ChecksumMismatchError(f"{path}: body size mismatch")
    vec = np.frombuffer(body, dtype="<f8", count=n_params, offset=pos).copy()
    pos += n_params * 8
    gate = GateNetwork.init(d_phi, n_classes, hidden=hidden, seed=0)
    gate.set_params_vector(vec)
    normalizer = None
    if has_norm:
        mean = np.frombuffer(body, dtype="<f8", count=d_phi, offset=pos).copy()
        pos += d_phi * 8
        std = np.frombuffer(body, dtype="<f8", count=d_phi, offset=pos).copy()
        normalizer = FeatureNormalizer(mean=mean, std=std)
    return gate, normalizer
