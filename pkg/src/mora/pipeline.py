"""End-to-end inference pipeline, evaluation metrics, significance testing,
and retrieval latency benchmarking.

For each query the pipeline computes the base distribution, retrieves
neighbors, forms the retrieval distribution, picks the fusion ratio (static,
or per instance from a trained gate), fuses, and predicts the argmax class
with lowest-index tie-breaking. All shared state is read-only, so queries are
independent.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .encoders import Embedding, LabelEmbeddingTable, encode_statistical
from .errors import (
    AllZeroDifferencesError,
    LengthMismatchError,
    NoQueriesError,
    TooFewPairsError,
)
from .features import FeatureNormalizer, extract_features, normalize
from .fusion import (
    ExternalProbsModel,
    FusionConfig,
    class_text_matrix,
    fuse_static,
    rag_distribution,
)
from .gate import GateNetwork, gate_forward
from .signals import LabeledDataset, SensorWindow
from .store import KnowledgeBase, knn_exact, knn_ivf


@dataclass(frozen=True)
class EvalReport:
    """Accuracy, macro-F1, per-class scores and the confusion matrix."""

    accuracy: float
    macro_f1: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    confusion: np.ndarray  # (C, C); rows = truth, columns = prediction
    config_echo: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.confusion.shape[0]


@dataclass(frozen=True)
class BenchReport:
    query_count: int
    p50_us: float
    p95_us: float
    p99_us: float
    db_size: int
    dim: int
    index_kind: str


@dataclass(frozen=True)
class WilcoxonResult:
    w_statistic: float
    p_two_sided: float
    p_one_sided: float
    n_effective: int
    exact: bool


@dataclass
class RunConfig:
    """Everything run_pipeline needs besides the database and the queries.

    When a gate (and its feature normalizer) is present, the per-instance
    gate output overrides the static fusion alpha.
    """

    fusion: FusionConfig = field(default_factory=FusionConfig)
    base_model: object = None
    encoder: Callable[[SensorWindow], Embedding] = encode_statistical
    label_table: Optional[LabelEmbeddingTable] = None
    gate: Optional[GateNetwork] = None
    normalizer: Optional[FeatureNormalizer] = None
    index_kind: str = "exact"       # "exact" | "ivf"
    nprobe: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.index_kind not in ("exact", "ivf"):
            raise ValueError("index_kind must be 'exact' or 'ivf'")
        if self.gate is not None and self.normalizer is None:
            raise ValueError("a gate requires its feature normalizer")

    def echo(self) -> dict:
        return {
            "alpha": self.fusion.alpha,
            "k": self.fusion.k,
            "tau": self.fusion.tau,
            "strategy": self.fusion.strategy,
            "decay": self.fusion.decay,
            "index_kind": self.index_kind,
            "gated": self.gate is not None,
            "seed": self.seed,
        }


def _query_windows(queries) -> list[SensorWindow]:
    if isinstance(queries, LabeledDataset):
        return list(queries.windows)
    return list(queries)


def run_pipeline(run_config: RunConfig, kb: KnowledgeBase,
                 queries) -> tuple[list[int], Optional[EvalReport]]:
    """Predict a class for every query window.

    Returns (predictions, report); the report is present only when every
    query carries a label.
    """
    windows = _query_windows(queries)
    table = run_config.label_table or LabelEmbeddingTable.hashed()
    text_matrix = class_text_matrix(kb.catalog, table)
    base = run_config.base_model

    predictions = []
    for i, w in enumerate(windows):
        if isinstance(base, ExternalProbsModel):
            c_ref = base.predict(i)
        else:
            c_ref = base.predict(w)
        emb = run_config.encoder(w)
        if run_config.index_kind == "ivf":
            neighbors = knn_ivf(kb, emb, run_config.fusion.k, run_config.nprobe)
        else:
            neighbors = knn_exact(kb, emb, run_config.fusion.k)
        c_rag = rag_distribution(neighbors, kb.catalog, table, text_matrix,
                                 run_config.fusion)
        if run_config.gate is not None:
            phi = normalize(extract_features(w), run_config.normalizer)
            alpha = gate_forward(run_config.gate, phi)
        else:
            alpha = run_config.fusion.alpha
        c_final = fuse_static(c_ref, c_rag, alpha)
        predictions.append(int(np.argmax(c_final)))  # first max wins ties

    report = None
    labels = [w.label_id for w in windows]
    if windows and all(lb is not None for lb in labels):
        report = evaluate(predictions, labels, len(kb.catalog),
                          config_echo=run_config.echo())
    return predictions, report


def evaluate(predictions: Sequence[int], truths: Sequence[int], n_classes: int,
             config_echo: Optional[dict] = None) -> EvalReport:
    """Accuracy, per-class precision/recall/F1 and macro-F1.

    Classes with no support and no predictions score F1 = 0 (macro-F1 stays
    balance-sensitive rather than skipping absent classes).
    """
    preds = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(truths, dtype=np.int64)
    if preds.shape != truth.shape:
        raise LengthMismatchError(
            f"{preds.shape[0]} predictions vs {truth.shape[0]} truths")
    if preds.size == 0:
        raise ValueError("need at least one prediction")
    if np.any((preds < 0) | (preds >= n_classes)) or np.any((truth < 0) | (truth >= n_classes)):
        raise ValueError("labels must lie in [0, n_classes)")

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (truth, preds), 1)

    tp = np.diag(confusion).astype(np.float64)
    pred_count = confusion.sum(axis=0).astype(np.float64)
    support = confusion.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_count > 0, tp / pred_count, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2.0 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)

    return EvalReport(
        accuracy=float(tp.sum() / preds.size),
        macro_f1=float(f1.mean()),
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_f1=f1,
        confusion=confusion,
        config_echo=dict(config_echo or {}),
    )


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_cdf_leq(doubled_ranks: np.ndarray, w2: int) -> float:
    """P(T <= w2) where T is a signed-rank sum over doubled (integer) ranks."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    return float(counts[:min(w2, total) + 1].sum() / 2.0 ** len(doubled_ranks))


def _norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def wilcoxon_signed_rank(paired_a, paired_b) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped. For n <= 20 the p-value comes from the
    exact null distribution of the rank sum (ties handled through midranks);
    beyond that a tie-corrected normal approximation with continuity
    correction is used. The statistic is min(W+, W-); the one-sided p is the
    tail of the observed direction and the two-sided p is its double,
    capped at 1.
    """
    a = np.asarray(paired_a, dtype=np.float64)
    b = np.asarray(paired_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatchError("need two equal-length 1-D samples")
    diff = a - b
    diff = diff[diff != 0.0]
    if diff.size == 0:
        raise AllZeroDifferencesError("all paired differences are zero")
    if diff.size < 5:
        raise TooFewPairsError(f"only {diff.size} non-zero differences (< 5)")

    n = diff.size
    ranks = _midranks(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    w = min(w_plus, w_minus)

    if n <= 20:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        p_one = _exact_cdf_leq(doubled, int(round(2.0 * w)))
        exact = True
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(diff), return_counts=True)
        tie_term = float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
        z = (w - mean + 0.5) / math.sqrt(var)
        p_one = _norm_cdf(z)
        exact = False
    return WilcoxonResult(
        w_statistic=w,
        p_two_sided=min(1.0, 2.0 * p_one),
        p_one_sided=p_one,
        n_effective=n,
        exact=exact,
    )


def bench_latency(kb: KnowledgeBase, queries, k: int = 5,
                  index_kind: str = "exact", warmup: int = 10,
                  fusion: Optional[FusionConfig] = None,
                  label_table: Optional[LabelEmbeddingTable] = None,
                  encoder: Callable[[SensorWindow], Embedding] = encode_statistical,
                  ) -> BenchReport:
    """Per-query wall time of retrieval + distribution building + fusion.

    Queries may be windows (encoded on the fly, encoding excluded from the
    timed region) or precomputed embeddings. Warmup iterations are excluded
    from the percentile statistics.
    """
    items = _query_windows(queries) if not _all_embeddings(queries) else list(queries)
    if not items:
        raise NoQueriesError("benchmark needs at least one query")
    if index_kind not in ("exact", "ivf"):
        raise ValueError("index_kind must be 'exact' or 'ivf'")
    fusion = fusion or FusionConfig(k=k)
    table = label_table or LabelEmbeddingTable.hashed()
    text_matrix = class_text_matrix(kb.catalog, table)
    uniform = np.full(len(kb.catalog), 1.0 / len(kb.catalog))

    embs = [it if isinstance(it, Embedding) else encoder(it) for it in items]

    def one(emb: Embedding) -> None:
        if index_kind == "ivf":
            neighbors = knn_ivf(kb, emb, k)
        else:
            neighbors = knn_exact(kb, emb, k)
        c_rag = rag_distribution(neighbors, kb.catalog, table, text_matrix, fusion)
        fuse_static(uniform, c_rag, fusion.alpha)

    for i in range(warmup):
        one(embs[i % len(embs)])
    micros = np.empty(len(embs))
    for i, emb in enumerate(embs):
        t0 = time.perf_counter()
        one(emb)
        micros[i] = (time.perf_counter() - t0) * 1e6

    p50, p95, p99 = np.percentile(micros, [50, 95, 99])
    return BenchReport(query_count=len(embs), p50_us=float(p50),
                       p95_us=float(p95), p99_us=float(p99),
                       db_size=len(kb), dim=kb.dim, index_kind=index_kind)


def _all_embeddings(queries) -> bool:
    try:
        return len(queries) > 0 and all(isinstance(q, Embedding) for q in queries)
    except TypeError:
        return False


# --- report formatting -----------------------------------------------------------


def format_eval_report(report: EvalReport, class_names: Optional[Sequence[str]] = None) -> str:
    names = list(class_names) if class_names else [
        f"class_{i}" for i in range(report.n_classes)]
    err_acc = 1.0 - report.accuracy
    err_f1 = 1.0 - report.macro_f1
    lines = [
        f"accuracy      {report.accuracy:.4f}",
        f"macro_f1      {report.macro_f1:.4f}",
        f"error_rate (1 - accuracy) {err_acc:.4f}",
        f"error_rate (1 - macro_f1) {err_f1:.4f}",
        "",
        f"{'class':<20s} {'precision':>9s} {'recall':>9s} {'f1':>9s} {'support':>8s}",
    ]
    support = report.confusion.sum(axis=1)
    for i, name in enumerate(names):
        lines.append(
            f"{name:<20s} {report.per_class_precision[i]:>9.4f} "
            f"{report.per_class_recall[i]:>9.4f} {report.per_class_f1[i]:>9.4f} "
            f"{support[i]:>8d}")
    return "\n".join(lines)


def eval_report_kv(report: EvalReport) -> str:
    """Machine-readable key = value lines."""
    lines = [
        f"accuracy = {report.accuracy:.10f}",
        f"macro_f1 = {report.macro_f1:.10f}",
        f"error_rate_accuracy = {1.0 - report.accuracy:.10f}",
        f"error_rate_macro_f1 = {1.0 - report.macro_f1:.10f}",
        f"n_classes = {report.n_classes}",
    ]
    for key, val in sorted(report.config_echo.items()):
        lines.append(f"config.{key} = {val}")
    for i in range(report.n_classes):
        lines.append(f"f1.class_{i} = {report.per_class_f1[i]:.10f}")
    return "\n".join(lines)


def confusion_csv(report: EvalReport, class_names: Optional[Sequence[str]] = None) -> str:
    names = list(class_names) if class_names else [
        f"class_{i}" for i in range(report.n_classes)]
    lines = ["truth\\pred," + ",".join(names)]
    for i, name in enumerate(names):
        lines.append(name + "," + ",".join(str(int(v)) for v in report.confusion[i]))
    return "\n".join(lines)


def bench_report_kv(report: BenchReport) -> str:
    return "\n".join([
        f"query_count = {report.query_count}",
        f"p50_us = {report.p50_us:.3f}",
        f"p95_us = {report.p95_us:.3f}",
        f"p99_us = {report.p99_us:.3f}",
        f"db_size = {report.db_size}",
        f"dim = {report.dim}",
        f"index_kind = {report.index_kind}",
    ])
