"""Ground-truth ingestion and the two evaluation protocols.

Retrieval: a hit is relevant when its document holds another instance
of the query's category. Spotting: a hit must additionally localize an
instance, i.e. overlap an unmatched same-category box at or above the
IoU threshold (each ground-truth instance can be claimed by at most one
hit, best overlap first, in rank order). Per-query average precision
and recall are aggregated into mAP tables over the Top-k set and, for
spotting, the IoU grid.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import FormatError, InputError, ParameterError
from .geometry import AspectGate, BBox, iou
from .images import crop
from .index import FeatureStore, QueryRequest, RankedHit, gate_survivors, search
from .siamese import SiameseModel

log = logging.getLogger(__name__)

DEFAULT_TOPK_SET = (5, 10, 25, 50, 100)
DEFAULT_IOU_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


@dataclass(frozen=True)
class GtEntry:
    doc_id: str
    category: str
    bbox: BBox


@dataclass
class GroundTruth:
    """Labeled pattern instances: (document, category, box) triples."""

    entries: list[GtEntry]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if not e.category:
                raise InputError(f"empty category for entry on {e.doc_id!r}")
            key = (e.doc_id, e.bbox)
            if key in seen:
                raise InputError(f"duplicate ground-truth box {e.bbox} on {e.doc_id!r}")
            seen.add(key)

    def category_count(self, category: str) -> int:
        return sum(1 for e in self.entries if e.category == category)

    def categories(self) -> list[str]:
        return sorted({e.category for e in self.entries})


@dataclass(frozen=True)
class QuerySpec:
    """One query: an identifier plus the ground-truth instance it crops."""

    query_id: str
    category: str
    doc_id: str
    bbox: BBox


def load_ground_truth(path: str | os.PathLike) -> GroundTruth:
    """Parse ``doc_id<TAB>category<TAB>x<TAB>y<TAB>w<TAB>h`` lines."""
    entries = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise FormatError(f"line {ln}: expected 6 tab-separated fields, got {len(parts)}")
        try:
            box = BBox(int(parts[2]), int(parts[3]), int(parts[4]), int(parts[5]))
        except ValueError as e:
            raise FormatError(f"line {ln}: {e}") from e
        entries.append(GtEntry(parts[0], parts[1], box))
    return GroundTruth(entries)


def save_ground_truth(gt: GroundTruth, path: str | os.PathLike) -> None:
    Path(path).write_text(
        "".join(
            f"{e.doc_id}\t{e.category}\t{e.bbox.x}\t{e.bbox.y}\t{e.bbox.w}\t{e.bbox.h}\n"
            for e in gt.entries
        ),
        encoding="utf-8",
    )


def queries_from_ground_truth(gt: GroundTruth, min_occurrences: int = 2) -> list[QuerySpec]:
    """One query per instance of every category with enough occurrences."""
    counts: dict[str, int] = {}
    for e in gt.entries:
        counts[e.category] = counts.get(e.category, 0) + 1
    eligible = [e for e in gt.entries if counts[e.category] >= min_occurrences]
    eligible.sort(key=lambda e: (e.doc_id, e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h))
    return [
        QuerySpec(f"q{i:04d}", e.category, e.doc_id, e.bbox) for i, e in enumerate(eligible)
    ]


def _is_source(entry: GtEntry, q: QuerySpec) -> bool:
    return entry.doc_id == q.doc_id and entry.bbox == q.bbox


def retrieval_relevance(hit: RankedHit, q: QuerySpec, gt: GroundTruth) -> bool:
    """True iff the hit's document holds a same-category instance other
    than the query's own source instance."""
    return any(
        e.doc_id == hit.doc_id and e.category == q.category and not _is_source(e, q)
        for e in gt.entries
    )


def spotting_relevance(
    hit: RankedHit, q: QuerySpec, gt: GroundTruth, iou_thresh: float
) -> bool:
    """True iff the hit overlaps some same-category instance on its
    document (query source excluded) at or above the threshold."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ParameterError(f"iou threshold must be in (0, 1], got {iou_thresh}")
    return any(
        e.doc_id == hit.doc_id
        and e.category == q.category
        and not _is_source(e, q)
        and iou(hit.bbox, e.bbox) >= iou_thresh
        for e in gt.entries
    )


def average_precision(relevance: Sequence[bool | int], total_relevant: int) -> float:
    """Precision averaged at the relevant ranks, over min(R, topk).

    Zero when there are no relevant targets or no relevant hits.
    """
    if total_relevant <= 0:
        return 0.0
    hits = 0
    prec_sum = 0.0
    for i, rel in enumerate(relevance, 1):
        if rel:
            hits += 1
            prec_sum += hits / i
    if hits == 0:
        return 0.0
    return prec_sum / min(total_relevant, len(relevance))


def recall_at_k(relevance: Sequence[bool | int], total_relevant: int) -> float:
    """Fraction of the relevant targets found in the list; 0 when R = 0."""
    if total_relevant <= 0:
        return 0.0
    return sum(1 for r in relevance if r) / total_relevant


def _retrieval_bits_and_total(
    hits: Sequence[RankedHit], q: QuerySpec, gt: GroundTruth
) -> tuple[list[int], int]:
    relevant_docs = {
        e.doc_id for e in gt.entries if e.category == q.category and not _is_source(e, q)
    }
    bits = [1 if h.doc_id in relevant_docs else 0 for h in hits]
    return bits, len(relevant_docs)


def _spotting_bits_and_total(
    hits: Sequence[RankedHit], q: QuerySpec, gt: GroundTruth, iou_thresh: float
) -> tuple[list[int], int]:
    # Greedy unique matching in rank order: each instance is credited to
    # the first hit overlapping it best; later hits cannot reuse it.
    targets = [e for e in gt.entries if e.category == q.category and not _is_source(e, q)]
    matched = [False] * len(targets)
    bits = []
    for h in hits:
        best = -1
        best_iou = 0.0
        for t_i, e in enumerate(targets):
            if matched[t_i] or e.doc_id != h.doc_id:
                continue
            ov = iou(h.bbox, e.bbox)
            if ov >= iou_thresh and ov > best_iou:
                best, best_iou = t_i, ov
        if best >= 0:
            matched[best] = True
            bits.append(1)
        else:
            bits.append(0)
    return bits, len(targets)


@dataclass(frozen=True)
class QueryResult:
    query_id: str
    topk: int
    iou_thresh: float | None
    ap: float
    recall: float


@dataclass
class EvalReport:
    """Per-query results plus their mAP / mean-recall aggregates.

    ``mean_ap`` and ``mean_recall`` are keyed by (topk, iou_thresh),
    with iou_thresh None in retrieval mode. Aggregates are plain
    left-fold sums over query_id order divided by the query count, so
    an independent re-evaluation can match them exactly.
    """

    mode: str
    topk_set: tuple[int, ...]
    iou_grid: tuple[float, ...]
    rows: list[QueryResult]
    mean_ap: dict[tuple[int, float | None], float]
    mean_recall: dict[tuple[int, float | None], float]
    n_queries: int
    skipped: list[str] = field(default_factory=list)
    candidate_counts: dict[str, int] = field(default_factory=dict)
    timing: dict[str, float] = field(default_factory=dict)
    seed: int | None = None

    def machine_lines(self) -> list[str]:
        """Deterministic machine-readable rows (no timings)."""
        lines = [f"# mode = {self.mode}"]
        if self.seed is not None:
            lines.append(f"# seed = {self.seed}")
        lines.append("# query_id\ttopk\tiou\tap\trecall")
        for r in self.rows:
            iou_s = "-" if r.iou_thresh is None else f"{r.iou_thresh:.1f}"
            lines.append(f"{r.query_id}\t{r.topk}\t{iou_s}\t{r.ap:.9f}\t{r.recall:.9f}")
        for key in sorted(self.mean_ap, key=lambda k: (k[0], -1.0 if k[1] is None else k[1])):
            topk, iou_t = key
            iou_s = "-" if iou_t is None else f"{iou_t:.1f}"
            lines.append(
                f"mAP\t{topk}\t{iou_s}\t{self.mean_ap[key]:.9f}\t{self.mean_recall[key]:.9f}"
            )
        return lines

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("\n".join(self.machine_lines()) + "\n", encoding="utf-8")

    def to_table(self) -> str:
        """Aligned plain-text summary of the mAP / mean recall grids."""
        out = [f"mode: {self.mode}   queries: {self.n_queries}   skipped: {len(self.skipped)}"]
        if self.timing:
            out.append(
                "search time: total {total_search_s:.3f}s   per query {mean_query_s:.4f}s".format(
                    **self.timing
                )
            )
        iou_keys: list[float | None] = (
            [None] if self.mode == "retrieval" else list(self.iou_grid)
        )
        header = "mAP      " + "".join(f"top-{k:<7}" for k in self.topk_set)
        out.append(header)
        for iou_t in iou_keys:
            label = "  all  " if iou_t is None else f"IoU {iou_t:.1f}"
            cells = "".join(f"{self.mean_ap[(k, iou_t)]:<11.4f}" for k in self.topk_set)
            out.append(f"{label}  {cells}")
        out.append("recall   " + "".join(f"top-{k:<7}" for k in self.topk_set))
        for iou_t in iou_keys:
            label = "  all  " if iou_t is None else f"IoU {iou_t:.1f}"
            cells = "".join(f"{self.mean_recall[(k, iou_t)]:<11.4f}" for k in self.topk_set)
            out.append(f"{label}  {cells}")
        return "\n".join(out)


def evaluate(
    store: FeatureStore,
    model: SiameseModel,
    gt: GroundTruth,
    queries: Sequence[QuerySpec],
    docs: Mapping[str, np.ndarray],
    topk_set: Sequence[int] = DEFAULT_TOPK_SET,
    iou_grid: Sequence[float] = DEFAULT_IOU_GRID,
    mode: str = "retrieval",
    gate: AspectGate | None = None,
    workers: int = 1,
    seed: int | None = None,
) -> EvalReport:
    """Run every query through search and score it under the protocol.

    Queries whose category has fewer than two ground-truth occurrences
    are skipped with a warning. mAP is the unweighted mean of per-query
    AP over query_id order.
    """
    if mode not in ("retrieval", "spotting"):
        raise InputError(f"mode must be 'retrieval' or 'spotting', got {mode!r}")
    topk_set = tuple(sorted(int(k) for k in topk_set))
    iou_grid = tuple(iou_grid) if mode == "spotting" else ()
    kmax = max(topk_set)

    gt_keys = {(e.doc_id, e.bbox) for e in gt.entries}
    rows: list[QueryResult] = []
    skipped: list[str] = []
    counts: dict[str, int] = {}
    ap_by_key: dict[tuple[int, float | None], list[float]] = {}
    rec_by_key: dict[tuple[int, float | None], list[float]] = {}
    total_search = 0.0
    n_evaluated = 0

    for q in sorted(queries, key=lambda s: s.query_id):
        if (q.doc_id, q.bbox) not in gt_keys:
            raise InputError(f"query {q.query_id} does not reference a ground-truth entry")
        if gt.category_count(q.category) < 2:
            log.warning(
                "skipping query %s: category %r has < 2 occurrences", q.query_id, q.category
            )
            skipped.append(q.query_id)
            continue
        if q.doc_id not in docs:
            raise InputError(f"query {q.query_id}: no source image for {q.doc_id!r}")
        patch = crop(docs[q.doc_id], q.bbox)
        req = QueryRequest(patch, q.bbox, kmax, mode, gate)
        t0 = time.perf_counter()
        # the query's own source instance is not a valid candidate
        hits = search(store, req, model, workers, exclude=(q.doc_id, q.bbox))
        total_search += time.perf_counter() - t0
        counts[q.query_id] = gate_survivors(store, q.bbox, gate)
        n_evaluated += 1

        if mode == "retrieval":
            bits, total = _retrieval_bits_and_total(hits, q, gt)
            for k in topk_set:
                ap = average_precision(bits[:k], total)
                rec = recall_at_k(bits[:k], total)
                rows.append(QueryResult(q.query_id, k, None, ap, rec))
                ap_by_key.setdefault((k, None), []).append(ap)
                rec_by_key.setdefault((k, None), []).append(rec)
        else:
            for iou_t in iou_grid:
                bits, total = _spotting_bits_and_total(hits, q, gt, iou_t)
                for k in topk_set:
                    ap = average_precision(bits[:k], total)
                    rec = recall_at_k(bits[:k], total)
                    rows.append(QueryResult(q.query_id, k, iou_t, ap, rec))
                    ap_by_key.setdefault((k, iou_t), []).append(ap)
                    rec_by_key.setdefault((k, iou_t), []).append(rec)

    mean_ap = {key: sum(vals) / len(vals) for key, vals in ap_by_key.items()}
    mean_recall = {key: sum(vals) / len(vals) for key, vals in rec_by_key.items()}
    return EvalReport(
        mode=mode,
        topk_set=topk_set,
        iou_grid=iou_grid,
        rows=rows,
        mean_ap=mean_ap,
        mean_recall=mean_recall,
        n_queries=n_evaluated,
        skipped=skipped,
        candidate_counts=counts,
        timing={
            "total_search_s": total_search,
            "mean_query_s": total_search / n_evaluated if n_evaluated else 0.0,
        },
        seed=seed,
    )
