"""Feature store and the online search engine.

Offline, every surviving proposal of every document is embedded exactly
once and persisted. Online, a query is embedded and ranked against all
stored records by exhaustive Euclidean distance. Differences are taken
in float32 (the stored precision) and squares accumulated in float64;
ties are broken by (doc_id, record index), so rankings are reproducible
bit for bit regardless of worker count.
"""

from __future__ import annotations

import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, CorpusError, FormatError, InputError
from .geometry import AspectGate, BBox, aspect_gate
from .images import as_gray, crop, read_pgm, resize_bilinear
from .proposals import ProposalParams, propose
from .siamese import SiameseModel, embed_batch


class FeatureStore:
    """Ordered collection of (doc_id, bbox, feature) records.

    Record order is insertion order and survives save/load. The feature
    matrix and the lexicographic doc-id codes used for tie-breaking are
    materialized lazily and cached.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise InputError(f"feature dimension must be >= 1, got {dim}")
        self.dim = int(dim)
        self.doc_ids: list[str] = []
        self.bboxes: list[BBox] = []
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None
        self._doc_codes: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.doc_ids)

    def add(self, doc_id: str, bbox: BBox, feature) -> None:
        f = np.asarray(feature, dtype=np.float32).reshape(-1)
        if f.size != self.dim:
            raise InputError(f"feature length {f.size} does not match store dim {self.dim}")
        self.doc_ids.append(doc_id)
        self.bboxes.append(bbox)
        self._rows.append(f)
        self._matrix = None
        self._doc_codes = None

    def record(self, i: int) -> tuple[str, BBox, np.ndarray]:
        return self.doc_ids[i], self.bboxes[i], self._rows[i]

    def records(self) -> Iterable[tuple[str, BBox, np.ndarray]]:
        for i in range(len(self)):
            yield self.record(i)

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            if self._rows:
                self._matrix = np.vstack(self._rows)
            else:
                self._matrix = np.empty((0, self.dim), dtype=np.float32)
        return self._matrix

    @property
    def doc_codes(self) -> np.ndarray:
        # integer codes whose order equals lexicographic doc_id order
        if self._doc_codes is None:
            _, inv = np.unique(np.array(self.doc_ids, dtype=object), return_inverse=True)
            self._doc_codes = inv.astype(np.int64)
        return self._doc_codes

    def equals(self, other: "FeatureStore") -> bool:
        return (
            self.dim == other.dim
            and self.doc_ids == other.doc_ids
            and self.bboxes == other.bboxes
            and self.matrix.tobytes() == other.matrix.tobytes()
        )


@dataclass(frozen=True)
class RankedHit:
    """One search result: 1-based rank, source document, box, distance."""

    rank: int
    doc_id: str
    bbox: BBox
    distance: float


@dataclass(frozen=True)
class QueryRequest:
    """A search request.

    ``query_box_dims`` carries the query's original box (its aspect
    ratio drives the gate). ``mode`` is 'retrieval' (one hit per
    document) or 'spotting' (localized hits, one per distinct box).
    """

    query_patch: np.ndarray
    query_box_dims: BBox
    topk: int
    mode: str = "retrieval"
    gate: AspectGate | None = None

    def __post_init__(self):
        if self.topk < 1:
            raise InputError(f"topk must be >= 1, got {self.topk}")
        if self.mode not in ("retrieval", "spotting"):
            raise InputError(f"mode must be 'retrieval' or 'spotting', got {self.mode!r}")


def _gate_mask(store: FeatureStore, query_box: BBox, gate: AspectGate | None) -> np.ndarray:
    if gate is None:
        return np.ones(len(store), dtype=bool)
    return np.fromiter(
        (aspect_gate(query_box, b, gate) for b in store.bboxes), dtype=bool, count=len(store)
    )


def gate_survivors(store: FeatureStore, query_box: BBox, gate: AspectGate | None) -> int:
    """Number of records that would survive the aspect gate."""
    return int(_gate_mask(store, query_box, gate).sum())


def _squared_distances(matrix: np.ndarray, q: np.ndarray, workers: int = 1) -> np.ndarray:
    """Per-record squared distance: float32 differences, float64 sums.

    The per-record value is independent of how records are partitioned
    across workers, so results are invariant to ``workers``.
    """
    q32 = q.astype(np.float32, copy=False)

    def chunk_d2(rows: np.ndarray) -> np.ndarray:
        diff = rows - q32  # float32 arithmetic: the stored precision
        sq = diff.astype(np.float64)
        np.square(sq, out=sq)
        return sq.sum(axis=1)

    n = matrix.shape[0]
    if workers <= 1 or n < 2 * workers:
        return chunk_d2(matrix)
    bounds = np.linspace(0, n, workers + 1, dtype=int)
    parts = [matrix[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(chunk_d2, parts))
    return np.concatenate(results)


def _rank_hits(
    store: FeatureStore,
    d2: np.ndarray,
    keep: np.ndarray,
    topk: int,
    mode: str,
) -> list[RankedHit]:
    """Order kept records by (distance, doc_id, index), dedupe, cut to topk."""
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return []
    codes = store.doc_codes[idx]
    order = np.lexsort((idx, codes, d2))
    hits: list[RankedHit] = []
    seen: set = set()
    for pos in order.tolist():
        i = int(idx[pos])
        doc_id = store.doc_ids[i]
        bbox = store.bboxes[i]
        key = doc_id if mode == "retrieval" else (doc_id, bbox)
        if key in seen:
            continue
        seen.add(key)
        hits.append(RankedHit(len(hits) + 1, doc_id, bbox, float(np.sqrt(d2[pos]))))
        if len(hits) == topk:
            break
    return hits


def search_by_vector(
    store: FeatureStore,
    query_vec,
    topk: int,
    mode: str = "retrieval",
    gate: AspectGate | None = None,
    query_box: BBox | None = None,
    workers: int = 1,
    exclude: tuple[str, BBox] | None = None,
) -> list[RankedHit]:
    """Exhaustive ranking of a pre-computed query embedding.

    ``exclude`` drops records exactly matching one (doc_id, bbox) before
    ranking; the evaluation protocol uses it to keep a query's own
    source instance out of its candidate pool.
    """
    q = np.asarray(query_vec, dtype=np.float32).reshape(-1)
    if q.size != store.dim:
        raise ConfigurationError(
            f"query dimension {q.size} does not match store dimension {store.dim}"
        )
    if gate is not None and query_box is None:
        raise InputError("aspect gate requires the query box dimensions")
    keep = _gate_mask(store, query_box, gate) if gate is not None else np.ones(len(store), bool)
    if exclude is not None:
        ex_doc, ex_box = exclude
        for i in range(len(store)):
            if keep[i] and store.doc_ids[i] == ex_doc and store.bboxes[i] == ex_box:
                keep[i] = False
    if not keep.any():
        return []
    sub = store.matrix if bool(keep.all()) else store.matrix[keep]
    d2_kept = _squared_distances(sub, q, workers)
    return _rank_hits(store, d2_kept, keep, topk, mode)


def search(
    store: FeatureStore,
    req: QueryRequest,
    model: SiameseModel,
    workers: int = 1,
    exclude: tuple[str, BBox] | None = None,
) -> list[RankedHit]:
    """Embed the query once, then rank every surviving record.

    Retrieval mode keeps each document's minimum-distance candidate;
    spotting mode keeps at most one hit per (document, box).
    """
    if store.dim != model.embed_dim:
        raise ConfigurationError(
            f"store dimension {store.dim} does not match model dimension {model.embed_dim}"
        )
    q = _embed_patch(model, req.query_patch)
    return search_by_vector(
        store, q, req.topk, req.mode, req.gate, req.query_box_dims, workers, exclude
    )


def _embed_patch(model: SiameseModel, patch) -> np.ndarray:
    a = np.asarray(patch)
    if a.shape != model.input_hw:
        a = resize_bilinear(a, *model.input_hw)
    return embed_batch(model, [a])[0]


def search_via_pair_head(
    store: FeatureStore,
    req: QueryRequest,
    model: SiameseModel,
    docs: Mapping[str, np.ndarray],
    batch: int = 256,
) -> list[RankedHit]:
    """Rank by running the full two-branch network once per pair.

    Nothing is reused from the store's feature matrix: for every
    candidate, the source crop and the query patch are both pushed
    through the encoder again. Embeddings are rounded to float32 (the
    exported precision), so distances, ties and ranks agree exactly
    with :func:`search`. This is the slow path measured by the
    benchmarks.
    """
    if store.dim != model.embed_dim:
        raise ConfigurationError(
            f"store dimension {store.dim} does not match model dimension {model.embed_dim}"
        )
    keep = (
        _gate_mask(store, req.query_box_dims, req.gate)
        if req.gate is not None
        else np.ones(len(store), bool)
    )
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return []
    qa = np.asarray(req.query_patch)
    if qa.shape != model.input_hw:
        qa = resize_bilinear(qa, *model.input_hw)

    d2_kept = np.empty(idx.size, dtype=np.float64)
    for start in range(0, idx.size, batch):
        chunk = idx[start : start + batch]
        crops = []
        for i in chunk.tolist():
            doc_id = store.doc_ids[i]
            if doc_id not in docs:
                raise InputError(f"no source image for document {doc_id!r}")
            patch = crop(docs[doc_id], store.bboxes[i])
            crops.append(resize_bilinear(patch, *model.input_hw))
        # both branches recomputed per pair
        emb_q = embed_batch(model, [qa] * len(crops))
        emb_c = embed_batch(model, crops)
        diff = emb_q - emb_c
        sq = diff.astype(np.float64)
        np.square(sq, out=sq)
        d2_kept[start : start + len(crops)] = sq.sum(axis=1)
    return _rank_hits(store, d2_kept, keep, req.topk, req.mode)


# ---------------------------------------------------------------------------
# corpus indexing


@dataclass
class IndexResult:
    """Store plus the per-document errors hit while indexing."""

    store: FeatureStore
    errors: list[tuple[str, str]] = field(default_factory=list)


def index_corpus(
    docs: Sequence[tuple[str, object]],
    params: ProposalParams,
    model: SiameseModel,
    workers: int = 1,
) -> IndexResult:
    """Propose and embed every document once; build the feature store.

    ``docs`` holds (doc_id, image-or-path) entries. Unreadable documents
    are recorded in the result and skipped. Records are finalized in
    (doc_id, emission index) order, so the store is identical for any
    worker count.
    """
    if not docs:
        raise CorpusError("no documents to index")
    ids = [d[0] for d in docs]
    if len(set(ids)) != len(ids):
        raise CorpusError("duplicate doc_id in corpus")

    def process(item: tuple[str, object]):
        doc_id, src = item
        img = read_pgm(src) if isinstance(src, (str, os.PathLike)) else as_gray(src)
        cands = propose(img, params, doc_id)
        crops = [resize_bilinear(crop(img, c.bbox), *model.input_hw) for c in cands]
        feats = embed_batch(model, crops)
        return doc_id, [(c.bbox, feats[i]) for i, c in enumerate(cands)]

    results: dict[str, list[tuple[BBox, np.ndarray]]] = {}
    errors: list[tuple[str, str]] = []

    def run_one(item):
        try:
            doc_id, recs = process(item)
            results[doc_id] = recs
        except Exception as e:  # per-document failure is recorded, not fatal
            errors.append((item[0], str(e)))

    if workers <= 1:
        for item in docs:
            run_one(item)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_one, docs))

    store = FeatureStore(model.embed_dim)
    for doc_id in sorted(results):
        for bbox, feat in results[doc_id]:
            store.add(doc_id, bbox, feat)
    errors.sort()
    if len(store) == 0:
        raise CorpusError("indexing produced an empty store")
    return IndexResult(store=store, errors=errors)


# ---------------------------------------------------------------------------
# benchmarks


@dataclass(frozen=True)
class ThroughputRow:
    """Distance throughput and end-to-end latency at one feature size."""

    dim: int
    n_records: int
    candidates_per_sec: float
    query_latency_s: float


def bench_throughput(
    stores: Mapping[int, FeatureStore],
    models: Mapping[int, SiameseModel],
    query_patches: Sequence[np.ndarray],
    topk: int = 10,
    repeats: int = 3,
) -> list[ThroughputRow]:
    """Measure candidates/second of the distance computation per dim.

    All stores should come from the same corpus. Hit lists are
    deterministic; timings of course are not. ``candidates_per_sec``
    uses the fastest pass; ``query_latency_s`` times one full search
    (embed + gate-free ranking) per query and averages.
    """
    if not query_patches:
        raise InputError("need at least one query patch")
    rows = []
    for dim in sorted(stores):
        store = stores[dim]
        if dim not in models:
            raise ConfigurationError(f"no model provided for dim {dim}")
        model = models[dim]
        if model.embed_dim != dim or store.dim != dim:
            raise ConfigurationError(
                f"dim {dim}: store dim {store.dim}, model dim {model.embed_dim}"
            )
        qvecs = [_embed_patch(model, p) for p in query_patches]
        matrix = store.matrix
        best = float("inf")
        for q in qvecs:
            for _ in range(repeats):
                t0 = time.perf_counter()
                _squared_distances(matrix, q)
                best = min(best, time.perf_counter() - t0)
        latencies = []
        for p in query_patches:
            t0 = time.perf_counter()
            search(
                store,
                QueryRequest(p, BBox(0, 0, *reversed(model.input_hw)), topk, "spotting"),
                model,
            )
            latencies.append(time.perf_counter() - t0)
        rows.append(
            ThroughputRow(
                dim=dim,
                n_records=len(store),
                candidates_per_sec=len(store) / best if best > 0 else float("inf"),
                query_latency_s=float(np.mean(latencies)),
            )
        )
    return rows


# ---------------------------------------------------------------------------
# store serialization

_MAGIC = b"SPOT"
_VERSION = 1


def save_store(store: FeatureStore, path: str | os.PathLike) -> None:
    """Write the little-endian binary store file.

    Layout: magic "SPOT", version u16, dim u32, count u64; per record a
    u16 doc-id length + UTF-8 bytes, x/y/w/h as u32, and dim float32s.
    """
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<HIQ", _VERSION, store.dim, len(store))
    for doc_id, bbox, feat in store.records():
        enc = doc_id.encode("utf-8")
        if len(enc) > 0xFFFF:
            raise InputError(f"doc_id too long to serialize: {doc_id[:32]!r}...")
        out += struct.pack("<H", len(enc))
        out += enc
        out += struct.pack("<IIII", bbox.x, bbox.y, bbox.w, bbox.h)
        out += np.ascontiguousarray(feat, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_store(path: str | os.PathLike) -> FeatureStore:
    """Read a store file; validates magic, version and exact length."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("truncated store file")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != _MAGIC:
        raise FormatError("bad store magic (expected 'SPOT')")
    version, dim, count = struct.unpack("<HIQ", take(14))
    if version != _VERSION:
        raise FormatError(f"unsupported store version {version}")
    store = FeatureStore(dim)
    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2))
        doc_id = take(id_len).decode("utf-8")
        x, y, w, h = struct.unpack("<IIII", take(16))
        feat = np.frombuffer(take(4 * dim), dtype="<f4").copy()
        store.add(doc_id, BBox(x, y, w, h), feat)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after store payload")
    return store


def import_features(
    matrix_path: str | os.PathLike, manifest_path: str | os.PathLike, dim: int
) -> FeatureStore:
    """Build a store from a raw float32 matrix plus a manifest.

    The matrix file holds row-major little-endian float32s; the manifest
    maps each row to ``doc_id<TAB>x<TAB>y<TAB>w<TAB>h``. The byte count
    must equal rows * dim * 4 exactly.
    """
    if dim < 1:
        raise InputError(f"dim must be >= 1, got {dim}")
    rows = []
    for ln, line in enumerate(Path(manifest_path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"manifest line {ln}: expected 5 tab-separated fields")
        try:
            rows.append((parts[0], BBox(int(parts[1]), int(parts[2]), int(parts[3]), int(parts[4]))))
        except ValueError as e:
            raise FormatError(f"manifest line {ln}: {e}") from e
    data = Path(matrix_path).read_bytes()
    expected = len(rows) * dim * 4
    if len(data) != expected:
        raise FormatError(
            f"matrix holds {len(data)} bytes but manifest implies {expected} "
            f"({len(rows)} rows x {dim} x 4)"
        )
    matrix = np.frombuffer(data, dtype="<f4").reshape(len(rows), dim)
    store = FeatureStore(dim)
    for (doc_id, bbox), feat in zip(rows, matrix):
        store.add(doc_id, bbox, feat.copy())
    return store
