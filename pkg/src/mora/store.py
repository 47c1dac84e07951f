"""Key-value knowledge base: exact/approximate retrieval and persistence.

Records are unit-norm float32 embeddings paired with label ids; similarity is
cosine, which on unit vectors is a plain inner product. Results are always
sorted by similarity descending with ties broken by ascending record id, so
retrieval is deterministic across runs and platforms. The optional IVF index
is a seeded spherical k-means coarse quantizer with one posting list per
centroid.

Raw-series similarity baselines (DTW, Pearson, windowed cross-correlation)
live here too so that embedding retrieval and signal retrieval share one
ranking contract.
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .encoders import Embedding
from .errors import (
    BadMagicError,
    ChecksumMismatchError,
    CountMismatchError,
    DimMismatchError,
    EmptyDatasetError,
    EmptySeriesError,
    IndexMissingError,
    LengthMismatchError,
    UnlabeledWindowError,
    VersionUnsupportedError,
)
from .signals import ClassCatalog, LabeledDataset, SensorWindow

DB_MAGIC = b"MORADB01"
DB_VERSION = 1

KMEANS_MAX_ITERS = 25


@dataclass(frozen=True)
class Neighbor:
    record_id: int
    label_id: int
    similarity: float


class IvfIndex:
    """Inverted-file index: spherical k-means centroids plus posting lists."""

    def __init__(self, centroids: np.ndarray, postings: list[np.ndarray],
                 nprobe_default: int, seed: int):
        self.centroids = np.ascontiguousarray(centroids, dtype=np.float32)
        self.postings = [np.ascontiguousarray(p, dtype=np.int64) for p in postings]
        self.nprobe_default = int(nprobe_default)
        self.seed = int(seed)
        if not 1 <= self.nprobe_default <= self.nlist:
            raise ValueError("nprobe_default must lie in [1, nlist]")

    @property
    def nlist(self) -> int:
        return self.centroids.shape[0]


class KnowledgeBase:
    """Immutable store of (embedding, label_id) records over a class catalog."""

    def __init__(self, embeddings: np.ndarray, label_ids: np.ndarray,
                 catalog: ClassCatalog, index: Optional[IvfIndex] = None):
        emb = np.ascontiguousarray(embeddings, dtype=np.float32)
        if emb.ndim != 2:
            raise DimMismatchError("embeddings must be a (m, d) matrix")
        labels = np.ascontiguousarray(label_ids, dtype=np.int64)
        if labels.shape != (emb.shape[0],):
            raise DimMismatchError("one label id per record required")
        if emb.shape[0] == 0:
            raise EmptyDatasetError("knowledge base needs at least one record")
        if np.any(labels < 0) or np.any(labels >= len(catalog)):
            raise ValueError("label ids must index into the catalog")
        emb.setflags(write=False)
        labels.setflags(write=False)
        self.embeddings = emb
        self.label_ids = labels
        self.catalog = catalog
        self.index = index

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def build_database(dataset: LabeledDataset,
                   encoder: Callable[[SensorWindow], Embedding],
                   ivf_nlist: Optional[int] = None,
                   seed: int = 0) -> KnowledgeBase:
    """Encode every window and store (embedding, label) in insertion order.

    Duplicates are retained; every window must be labeled. When ivf_nlist is
    given an IVF index is built on the result.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot build a database from an empty dataset")
    vectors = []
    labels = []
    for i, w in enumerate(dataset.windows):
        if w.label_id is None:
            raise UnlabeledWindowError(f"window {i} has no label")
        vectors.append(encoder(w).vector)
        labels.append(w.label_id)
    kb = KnowledgeBase(
        embeddings=np.asarray(vectors, dtype=np.float32),
        label_ids=np.asarray(labels),
        catalog=dataset.catalog,
    )
    if ivf_nlist is not None:
        kb.index = build_ivf_index(kb, ivf_nlist, seed=seed)
    return kb


def database_from_embeddings(dataset: LabeledDataset,
                             embeddings: Sequence[Embedding]) -> KnowledgeBase:
    """Build a knowledge base from precomputed (file-loaded) embeddings."""
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot build a database from an empty dataset")
    if len(embeddings) != len(dataset):
        raise CountMismatchError(
            f"{len(embeddings)} embeddings for {len(dataset)} windows")
    labels = []
    for i, w in enumerate(dataset.windows):
        if w.label_id is None:
            raise UnlabeledWindowError(f"window {i} has no label")
        labels.append(w.label_id)
    return KnowledgeBase(
        embeddings=np.asarray([e.vector for e in embeddings], dtype=np.float32),
        label_ids=np.asarray(labels),
        catalog=dataset.catalog,
    )


def _query_vector(query, dim: int) -> np.ndarray:
    v = query.vector if isinstance(query, Embedding) else np.asarray(query)
    v = np.ascontiguousarray(v, dtype=np.float32)
    if v.shape != (dim,):
        raise DimMismatchError(f"query dim {v.shape} does not match database dim ({dim},)")
    return v


def _rank_top_k(sims: np.ndarray, ids: np.ndarray, label_ids: np.ndarray,
                k: int) -> list[Neighbor]:
    """Top-k by similarity desc, ties by ascending record id (deterministic)."""
    n = sims.shape[0]
    k = min(k, n)
    if k == n:
        cand = np.arange(n)
    else:
        kth = np.partition(sims, n - k)[n - k]
        cand = np.where(sims >= kth)[0]  # keep every tie at the boundary
    order = np.lexsort((ids[cand], -sims[cand]))
    picked = cand[order[:k]]
    return [Neighbor(record_id=int(ids[i]), label_id=int(label_ids[i]),
                     similarity=float(sims[i])) for i in picked]


def knn_exact(kb: KnowledgeBase, query, k: int) -> list[Neighbor]:
    """Exact top-k cosine scan over every record."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = _query_vector(query, kb.dim)
    if k > len(kb):
        warnings.warn(f"k={k} exceeds database size {len(kb)}; clamping",
                      RuntimeWarning, stacklevel=2)
    sims = kb.embeddings @ q
    ids = np.arange(len(kb))
    return _rank_top_k(sims, ids, kb.label_ids, k)


def build_ivf_index(kb: KnowledgeBase, nlist: int, seed: int = 0,
                    nprobe_default: Optional[int] = None) -> IvfIndex:
    """Seeded spherical k-means over the records, at most 25 Lloyd iterations.

    Every record lands in exactly one posting list (its nearest centroid by
    inner product); empty clusters are re-seeded from random records.
    """
    if not 1 <= nlist <= len(kb):
        raise ValueError(f"nlist must lie in [1, {len(kb)}]")
    x = kb.embeddings.astype(np.float64)
    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(len(kb), size=nlist, replace=False)].copy()
    assign = np.full(len(kb), -1)
    for _ in range(KMEANS_MAX_ITERS):
        new_assign = np.argmax(x @ centroids.T, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(nlist):
            members = x[assign == c]
            if len(members) == 0:
                centroids[c] = x[rng.integers(len(kb))]
                continue
            mean = members.sum(axis=0)
            norm = np.linalg.norm(mean)
            centroids[c] = mean / norm if norm > 0 else x[rng.integers(len(kb))]
    assign = np.argmax(x @ centroids.T, axis=1)
    postings = [np.where(assign == c)[0] for c in range(nlist)]
    if nprobe_default is None:
        nprobe_default = max(1, min(nlist, int(round(np.sqrt(nlist)))))
    return IvfIndex(centroids=centroids.astype(np.float32), postings=postings,
                    nprobe_default=nprobe_default, seed=seed)


def knn_ivf(kb: KnowledgeBase, query, k: int,
            nprobe: Optional[int] = None) -> list[Neighbor]:
    """Approximate top-k: exact scan restricted to the nprobe nearest cells.

    With nprobe == nlist this visits every record and returns exactly the
    knn_exact result. Fewer than k results are possible when the probed lists
    are small; that is not an error.
    """
    if kb.index is None:
        raise IndexMissingError("knowledge base has no IVF index")
    if k < 1:
        raise ValueError("k must be >= 1")
    index = kb.index
    if nprobe is None:
        nprobe = index.nprobe_default
    if not 1 <= nprobe <= index.nlist:
        raise ValueError(f"nprobe must lie in [1, {index.nlist}]")
    q = _query_vector(query, kb.dim)
    cent_sims = index.centroids @ q
    cent_ids = np.arange(index.nlist)
    probe_order = np.lexsort((cent_ids, -cent_sims))[:nprobe]
    if nprobe == index.nlist:
        # every record is a candidate; scan the stored matrix directly
        sims = kb.embeddings @ q
        ids = np.arange(len(kb))
        return _rank_top_k(sims, ids, kb.label_ids, k)
    cand = np.sort(np.concatenate([index.postings[c] for c in probe_order]))
    if cand.size == 0:
        return []
    sims = np.ascontiguousarray(kb.embeddings[cand]) @ q
    return _rank_top_k(sims, cand, kb.label_ids, min(k, cand.size))


# --- raw-series similarity baselines -----------------------------------------


def _as_channels(series) -> np.ndarray:
    """Coerce to a (T, M) float array; 1-D input becomes a single channel."""
    if isinstance(series, SensorWindow):
        arr = series.samples
    else:
        arr = np.asarray(series, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimMismatchError("series must be 1-D or (T, M)")
    if arr.shape[0] == 0:
        raise EmptySeriesError("series is empty")
    return arr


def _dtw_1d(a: np.ndarray, b: np.ndarray, band: Optional[int]) -> float:
    """Classic DTW with |a_i - b_j| local cost, computed over anti-diagonals.

    Cells outside the Sakoe-Chiba band |i - j| > band are unreachable; if the
    band disconnects the endpoints the distance is +inf.
    """
    n, m = len(a), len(b)
    inf = np.inf
    prev2 = np.full(n, inf)
    prev1 = np.full(n, inf)
    cur = np.full(n, inf)
    for s in range(n + m - 1):
        lo = max(0, s - (m - 1))
        hi = min(n - 1, s)
        cur.fill(inf)
        i_idx = np.arange(lo, hi + 1)
        cost = np.abs(a[lo:hi + 1] - b[s - i_idx])
        if s == 0:
            cur[0] = cost[0]
        else:
            up = np.full(hi - lo + 1, inf)      # D[i-1, j]   on diagonal s-1
            left = np.full(hi - lo + 1, inf)    # D[i, j-1]   on diagonal s-1
            diag = np.full(hi - lo + 1, inf)    # D[i-1, j-1] on diagonal s-2
            has_prev_row = i_idx - 1 >= 0
            up[has_prev_row] = prev1[i_idx[has_prev_row] - 1]
            has_prev_col = (s - i_idx) - 1 >= 0
            left[has_prev_col] = prev1[i_idx[has_prev_col]]
            both = has_prev_row & has_prev_col
            diag[both] = prev2[i_idx[both] - 1]
            cur[lo:hi + 1] = cost + np.minimum(np.minimum(up, left), diag)
        if band is not None:
            off = np.abs(2 * i_idx - s) > band
            cur[i_idx[off]] = inf
        prev2, prev1, cur = prev1, cur, prev2
    return float(prev1[n - 1])


def dtw_distance(a, b, band: Optional[int] = None) -> float:
    """Dynamic time warping distance; multichannel input sums per-channel DTW."""
    xa, xb = _as_channels(a), _as_channels(b)
    if xa.shape[1] != xb.shape[1]:
        raise DimMismatchError("series must share the channel count")
    if band is not None and band < 0:
        raise ValueError("band must be >= 0")
    return float(sum(_dtw_1d(xa[:, c], xb[:, c], band) for c in range(xa.shape[1])))


def pearson_similarity(a, b) -> float:
    """Pearson r, averaged over channels; constant inputs contribute 0."""
    xa, xb = _as_channels(a), _as_channels(b)
    if xa.shape != xb.shape:
        raise LengthMismatchError(f"shapes {xa.shape} and {xb.shape} differ")
    if xa.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    vals = []
    for c in range(xa.shape[1]):
        u = xa[:, c] - xa[:, c].mean()
        v = xb[:, c] - xb[:, c].mean()
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        vals.append(float(u @ v / (nu * nv)) if nu > 0 and nv > 0 else 0.0)
    return float(np.mean(vals))


def ccf_profile(a: np.ndarray, b: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalized cross-correlation of two mean-removed 1-D series per lag.

    Entry ell + max_lag holds the correlation at lag ell in
    [-max_lag, max_lag], where positive ell means b trails a by ell samples.
    Overlaps are normalized wrap-free by the overlapping segments' norms.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatchError("profile needs two equal-length 1-D series")
    n = a.shape[0]
    if not 0 <= max_lag < n:
        raise ValueError("max_lag must lie in [0, T)")
    a = a - a.mean()
    b = b - b.mean()
    out = np.zeros(2 * max_lag + 1)
    for ell in range(-max_lag, max_lag + 1):
        if ell >= 0:
            x, y = a[:n - ell], b[ell:]
        else:
            x, y = a[-ell:], b[:n + ell]
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        out[ell + max_lag] = x @ y / (nx * ny) if nx > 0 and ny > 0 else 0.0
    return out


def ccf_similarity(a, b, max_lag: int) -> float:
    """Best cross-correlation over lags, averaged over channels."""
    xa, xb = _as_channels(a), _as_channels(b)
    if xa.shape != xb.shape:
        raise LengthMismatchError(f"shapes {xa.shape} and {xb.shape} differ")
    best = [float(ccf_profile(xa[:, c], xb[:, c], max_lag).max())
            for c in range(xa.shape[1])]
    return float(np.mean(best))


RAW_METRICS = ("dtw", "ccf", "pearson")


def raw_series_knn(dataset: LabeledDataset, query: SensorWindow, k: int,
                   metric: str, max_lag: Optional[int] = None,
                   band: Optional[int] = None) -> list[Neighbor]:
    """Top-k windows by a raw-series metric, same ranking rules as knn_exact.

    DTW distances enter the ranking negated. max_lag defaults to a quarter of
    the query length for the ccf metric.
    """
    if metric not in RAW_METRICS:
        raise ValueError(f"metric must be one of {RAW_METRICS}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(dataset) == 0:
        raise EmptyDatasetError("dataset has no windows")
    if max_lag is None:
        max_lag = max(0, query.n_samples // 4)
    sims = np.empty(len(dataset))
    labels = np.empty(len(dataset), dtype=np.int64)
    for i, w in enumerate(dataset.windows):
        if w.label_id is None:
            raise UnlabeledWindowError(f"window {i} has no label")
        if metric == "dtw":
            sims[i] = -dtw_distance(query, w, band=band)
        elif metric == "ccf":
            sims[i] = ccf_similarity(query.samples, w.samples, max_lag)
        else:
            sims[i] = pearson_similarity(query.samples, w.samples)
        labels[i] = w.label_id
    return _rank_top_k(sims, np.arange(len(dataset)), labels, min(k, len(dataset)))


# --- persistence --------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ChecksumMismatchError("file body shorter than declared contents")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        arr = np.frombuffer(self.take(count * np.dtype(dtype).itemsize), dtype=dtype)
        return arr.copy()


def persist_database(kb: KnowledgeBase, path) -> None:
    """Write the database in the versioned little-endian binary format.

    Layout: magic, u32 version, u32 d, u64 m, catalog (length-prefixed UTF-8
    strings), u8 index flag, interleaved records (d x f32 + u32 label), the
    optional index block, and a trailing CRC32 of everything before it.
    """
    parts = [DB_MAGIC, struct.pack("<IIQ", DB_VERSION, kb.dim, len(kb))]
    parts.append(struct.pack("<I", len(kb.catalog)))
    parts.extend(_pack_str(name) for name in kb.catalog.names)
    parts.append(struct.pack("<B", 1 if kb.index is not None else 0))
    rec = np.zeros(len(kb), dtype=np.dtype([("e", "<f4", (kb.dim,)), ("y", "<u4")]))
    rec["e"] = kb.embeddings
    rec["y"] = kb.label_ids.astype(np.uint32)
    parts.append(rec.tobytes())
    if kb.index is not None:
        ix = kb.index
        parts.append(struct.pack("<IIq", ix.nlist, ix.nprobe_default, ix.seed))
        parts.append(ix.centroids.astype("<f4").tobytes())
        for post in ix.postings:
            parts.append(struct.pack("<Q", len(post)))
            parts.append(post.astype("<u8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_database(path) -> KnowledgeBase:
    """Read a persisted database; the round trip is bit-lossless."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(DB_MAGIC) or blob[:len(DB_MAGIC)] != DB_MAGIC:
        raise BadMagicError(f"{path}: not a mora database file")
    if len(blob) < len(DB_MAGIC) + 4:
        raise ChecksumMismatchError(f"{path}: truncated file")
    body, crc_bytes = blob[:-4], blob[-4:]
    if zlib.crc32(body) != struct.unpack("<I", crc_bytes)[0]:
        raise ChecksumMismatchError(f"{path}: checksum mismatch")
    r = _Reader(body)
    r.take(len(DB_MAGIC))
    version, dim, m = r.unpack("<IIQ")
    if version != DB_VERSION:
        raise VersionUnsupportedError(f"{path}: version {version} unsupported")
    (n_names,) = r.unpack("<I")
    names = []
    for _ in range(n_names):
        (ln,) = r.unpack("<I")
        names.append(r.take(ln).decode("utf-8"))
    (has_index,) = r.unpack("<B")
    rec = np.frombuffer(
        r.take(m * (4 * dim + 4)),
        dtype=np.dtype([("e", "<f4", (dim,)), ("y", "<u4")]))
    emb = rec["e"].reshape(m, dim).copy()
    labels = rec["y"].astype(np.int64)
    index = None
    if has_index:
        nlist, nprobe_default, seed = r.unpack("<IIq")
        centroids = r.array("<f4", nlist * dim).reshape(nlist, dim)
        postings = []
        for _ in range(nlist):
            (cnt,) = r.unpack("<Q")
            postings.append(r.array("<u8", cnt).astype(np.int64))
        index = IvfIndex(centroids=centroids, postings=postings,
                         nprobe_default=nprobe_default, seed=seed)
    return KnowledgeBase(embeddings=emb, label_ids=labels,
                         catalog=ClassCatalog(tuple(names)), index=index)
