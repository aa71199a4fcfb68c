"""Offline candidate generation for document pages.

A local-mean adaptive threshold separates ink from paper, a graph-based
over-segmentation partitions the page at one or more scales, and greedy
hierarchical grouping merges the most-similar adjacent regions while
emitting every region's bounding box as a candidate. Candidates from
all scales are deduplicated and size-filtered.

All steps are deterministic: edge ordering, merge tie-breaks and
emission order are fixed.
"""

from __future__ import annotations

import heapq
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FormatError, ParameterError
from .geometry import AspectGate, BBox, aspect_gate
from .images import as_gray

COLOR_BINS = 25
TEXTURE_BINS = 8


@dataclass(frozen=True)
class ProposalParams:
    """Knobs of the candidate generator.

    ``block``/``offset`` drive the adaptive threshold, ``scales`` the
    segmentation granularities, and ``similarity_weights`` the
    (color, texture, size, fill) mix used during grouping.
    """

    block: int = 241
    offset: float = 0.12
    scales: tuple[float, ...] = (50.0, 100.0)
    min_region_px: int = 50
    max_proposals: int = 2000
    similarity_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.block % 2 == 0 or self.block < 3:
            raise ParameterError(f"block must be odd and >= 3, got {self.block}")
        if not 0.0 <= self.offset < 1.0:
            raise ParameterError(f"offset must be in [0, 1), got {self.offset}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ParameterError(f"every scale must be > 0, got {self.scales}")
        if self.min_region_px < 1:
            raise ParameterError("min_region_px must be >= 1")
        if self.max_proposals < 1:
            raise ParameterError("max_proposals must be >= 1")
        w = self.similarity_weights
        if len(w) != 4 or any(x < 0 for x in w) or not any(x > 0 for x in w):
            raise ParameterError(
                "similarity_weights must be four non-negative values with at least one positive"
            )


@dataclass
class Region:
    """A connected pixel group with its summary statistics.

    Histograms are L1-normalized; ``fg_pixels`` counts member pixels the
    adaptive threshold marked as ink.
    """

    id: int
    bbox: BBox
    size: int
    color_hist: np.ndarray
    texture_hist: np.ndarray
    fg_pixels: int = 0


@dataclass
class Candidate:
    """A proposed sub-image: source document, box, optional embedding."""

    doc_id: str
    bbox: BBox
    feature: np.ndarray | None = field(default=None, compare=False)


def adaptive_threshold(img, block: int = 241, offset: float = 0.12) -> np.ndarray:
    """Mark ink pixels: intensity < local block mean - offset*255.

    The block window is truncated at image borders. Returns a boolean
    mask of the image's shape (True = foreground ink).
    """
    if block % 2 == 0 or block < 3:
        raise ParameterError(f"block must be odd and >= 3, got {block}")
    if not 0.0 <= offset < 1.0:
        raise ParameterError(f"offset must be in [0, 1), got {offset}")
    a = as_gray(img)
    h, w = a.shape
    r = block // 2
    ii = np.zeros((h + 1, w + 1), dtype=np.int64)
    ii[1:, 1:] = np.cumsum(np.cumsum(a, axis=0, dtype=np.int64), axis=1)
    ys = np.arange(h)
    xs = np.arange(w)
    y0 = np.maximum(ys - r, 0)
    y1 = np.minimum(ys + r + 1, h)
    x0 = np.maximum(xs - r, 0)
    x1 = np.minimum(xs + r + 1, w)
    window_sum = (
        ii[np.ix_(y1, x1)] - ii[np.ix_(y0, x1)] - ii[np.ix_(y1, x0)] + ii[np.ix_(y0, x0)]
    )
    window_area = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    mean = window_sum / window_area
    return a < (mean - offset * 255.0)


def _grid_edges(h: int, w: int, intensities: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # 4-connected grid edges as (src, dst, |intensity diff|), src < dst
    flat = intensities.astype(np.int32).reshape(-1)
    idx = np.arange(h * w, dtype=np.int64).reshape(h, w)
    srcs, dsts = [], []
    if w > 1:
        srcs.append(idx[:, :-1].ravel())
        dsts.append(idx[:, 1:].ravel())
    if h > 1:
        srcs.append(idx[:-1, :].ravel())
        dsts.append(idx[1:, :].ravel())
    if not srcs:
        return (np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int32))
    src = np.concatenate(srcs)
    dst = np.concatenate(dsts)
    wgt = np.abs(flat[src] - flat[dst])
    return src, dst, wgt


def segment(img, scale: float) -> np.ndarray:
    """Graph-based over-segmentation of the page at one granularity.

    Classic greedy merging over the 4-connected grid: edges sorted by
    ascending |intensity difference| (ties by source then target index)
    are accepted when the weight does not exceed either component's
    internal difference plus scale/|component|. Returns an int32 label
    map with compact region ids ordered by first pixel occurrence.
    """
    if scale <= 0:
        raise ParameterError(f"scale must be > 0, got {scale}")
    a = as_gray(img)
    h, w = a.shape
    n = h * w
    src, dst, wgt = _grid_edges(h, w, a)
    order = np.lexsort((dst, src, wgt))

    parent = list(range(n))
    comp_size = [1] * n
    internal = [0.0] * n

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    src_l, dst_l, wgt_l = src.tolist(), dst.tolist(), wgt.tolist()
    for e in order.tolist():
        ra = find(src_l[e])
        rb = find(dst_l[e])
        if ra == rb:
            continue
        we = wgt_l[e]
        if we <= internal[ra] + scale / comp_size[ra] and we <= internal[rb] + scale / comp_size[rb]:
            parent[rb] = ra
            comp_size[ra] += comp_size[rb]
            internal[ra] = we  # edges arrive in ascending order

    # compact ids in order of first (row-major) occurrence
    first_seen: dict[int, int] = {}
    labels = np.empty(n, dtype=np.int32)
    for i in range(n):
        lab = first_seen.setdefault(find(i), len(first_seen))
        labels[i] = lab
    return labels.reshape(h, w)


def _texture_bins(img: np.ndarray) -> np.ndarray:
    # orientation of Gaussian-smoothed derivatives, quantized to 8 bins
    sm = gaussian_filter(img.astype(np.float64), sigma=1.0)
    gy, gx = np.gradient(sm)
    theta = np.arctan2(gy, gx)  # [-pi, pi]
    bins = np.floor((theta + np.pi) / (2.0 * np.pi) * TEXTURE_BINS).astype(np.int64)
    return np.clip(bins, 0, TEXTURE_BINS - 1)


def build_regions(img, labels: np.ndarray, mask: np.ndarray | None = None) -> list[Region]:
    """Summarize each label of a segmentation into a Region."""
    a = as_gray(img)
    h, w = a.shape
    flat = labels.reshape(-1).astype(np.int64)
    n_regions = int(flat.max()) + 1

    sizes = np.bincount(flat, minlength=n_regions)
    ys, xs = np.divmod(np.arange(h * w, dtype=np.int64), w)
    x_min = np.full(n_regions, w, dtype=np.int64)
    x_max = np.full(n_regions, -1, dtype=np.int64)
    y_min = np.full(n_regions, h, dtype=np.int64)
    y_max = np.full(n_regions, -1, dtype=np.int64)
    np.minimum.at(x_min, flat, xs)
    np.maximum.at(x_max, flat, xs)
    np.minimum.at(y_min, flat, ys)
    np.maximum.at(y_max, flat, ys)

    color_bin = (a.reshape(-1).astype(np.int64) * COLOR_BINS) // 256
    color = np.bincount(flat * COLOR_BINS + color_bin, minlength=n_regions * COLOR_BINS)
    color = color.reshape(n_regions, COLOR_BINS).astype(np.float64)
    color /= sizes[:, None]

    tex_bin = _texture_bins(a).reshape(-1)
    texture = np.bincount(flat * TEXTURE_BINS + tex_bin, minlength=n_regions * TEXTURE_BINS)
    texture = texture.reshape(n_regions, TEXTURE_BINS).astype(np.float64)
    texture /= sizes[:, None]

    if mask is not None:
        fg = np.bincount(flat[mask.reshape(-1)], minlength=n_regions)
    else:
        fg = sizes

    return [
        Region(
            id=i,
            bbox=BBox(int(x_min[i]), int(y_min[i]), int(x_max[i] - x_min[i] + 1), int(y_max[i] - y_min[i] + 1)),
            size=int(sizes[i]),
            color_hist=color[i],
            texture_hist=texture[i],
            fg_pixels=int(fg[i]),
        )
        for i in range(n_regions)
    ]


def region_adjacency(labels: np.ndarray) -> list[tuple[int, int]]:
    """Unordered pairs of region ids sharing a 4-connected border."""
    a = labels
    pairs = []
    if a.shape[1] > 1:
        left, right = a[:, :-1].ravel(), a[:, 1:].ravel()
        diff = left != right
        pairs.append(np.stack([left[diff], right[diff]], axis=1))
    if a.shape[0] > 1:
        top, bottom = a[:-1, :].ravel(), a[1:, :].ravel()
        diff = top != bottom
        pairs.append(np.stack([top[diff], bottom[diff]], axis=1))
    if not pairs:
        return []
    p = np.concatenate(pairs).astype(np.int64)
    lo = p.min(axis=1)
    hi = p.max(axis=1)
    n = int(labels.max()) + 1
    keys = np.unique(lo * n + hi)
    return [(int(k // n), int(k % n)) for k in keys]


def region_similarity(
    a: Region,
    b: Region,
    weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0),
    img_area: int = 1,
) -> float:
    """Weighted grouping similarity of two regions of one document.

    Components: histogram intersection of the color and texture
    histograms, a size term favoring small pairs, and a fill term
    favoring pairs that tile their joint bounding box.
    """
    wc, wt, ws, wf = weights
    s_color = float(np.minimum(a.color_hist, b.color_hist).sum())
    s_texture = float(np.minimum(a.texture_hist, b.texture_hist).sum())
    s_size = 1.0 - (a.size + b.size) / img_area
    joint = a.bbox.union_bbox(b.bbox)
    s_fill = 1.0 - (joint.area - a.size - b.size) / img_area
    return wc * s_color + wt * s_texture + ws * s_size + wf * s_fill


def _merge_regions(a: Region, b: Region, new_id: int) -> Region:
    total = a.size + b.size
    return Region(
        id=new_id,
        bbox=a.bbox.union_bbox(b.bbox),
        size=total,
        color_hist=(a.size * a.color_hist + b.size * b.color_hist) / total,
        texture_hist=(a.size * a.texture_hist + b.size * b.texture_hist) / total,
        fg_pixels=a.fg_pixels + b.fg_pixels,
    )


def hierarchical_group(
    regions: Sequence[Region],
    adjacency: Iterable[tuple[int, int]],
    weights: Sequence[float],
    img_area: int,
) -> list[Region]:
    """Greedy agglomeration of adjacent regions.

    Repeatedly merges the most-similar adjacent pair (ties broken by the
    smaller (min id, max id) pair) until one region remains; returns the
    merged regions in merge order. Input regions are never mutated.
    """
    regs = {r.id: r for r in regions}
    nbrs: dict[int, set[int]] = {r.id: set() for r in regions}
    heap: list[tuple[float, int, int]] = []
    for a, b in adjacency:
        lo, hi = (a, b) if a < b else (b, a)
        if hi in nbrs[lo]:
            continue
        nbrs[lo].add(hi)
        nbrs[hi].add(lo)
        heap.append((-region_similarity(regs[lo], regs[hi], weights, img_area), lo, hi))
    heapq.heapify(heap)

    alive = set(regs)
    next_id = max(regs) + 1 if regs else 0
    merged: list[Region] = []
    while heap:
        _, lo, hi = heapq.heappop(heap)
        if lo not in alive or hi not in alive:
            continue
        new = _merge_regions(regs[lo], regs[hi], next_id)
        next_id += 1
        alive.discard(lo)
        alive.discard(hi)
        alive.add(new.id)
        regs[new.id] = new
        new_nbrs = (nbrs[lo] | nbrs[hi]) - {lo, hi}
        nbrs[new.id] = new_nbrs
        for n in new_nbrs:
            nbrs[n].discard(lo)
            nbrs[n].discard(hi)
            nbrs[n].add(new.id)
            a, b = (n, new.id) if n < new.id else (new.id, n)
            heapq.heappush(
                heap, (-region_similarity(regs[a], regs[b], weights, img_area), a, b)
            )
        merged.append(new)
    return merged


def propose(img, params: ProposalParams = ProposalParams(), doc_id: str = "") -> list[Candidate]:
    """Generate candidate boxes for one page.

    Per scale: segment, emit every initial region, then emit each merged
    region produced by hierarchical grouping. Regions without any ink
    pixel or smaller than ``min_region_px`` are dropped; boxes are
    deduplicated across scales (exact equality, first emission wins) and
    truncated to ``max_proposals``. If nothing survives, the whole page
    is emitted as a single fallback candidate.
    """
    a = as_gray(img)
    h, w = a.shape
    mask = adaptive_threshold(a, params.block, params.offset)
    img_area = h * w

    seen: set[tuple[int, int, int, int]] = set()
    out: list[Candidate] = []

    def emit(region: Region) -> bool:
        # returns False once the proposal budget is exhausted
        if region.fg_pixels == 0 or region.size < params.min_region_px:
            return True
        key = (region.bbox.x, region.bbox.y, region.bbox.w, region.bbox.h)
        if key in seen:
            return True
        seen.add(key)
        out.append(Candidate(doc_id, region.bbox))
        return len(out) < params.max_proposals

    budget_left = True
    for scale in params.scales:
        if not budget_left:
            break
        labels = segment(a, scale)
        regions = build_regions(a, labels, mask)
        for r in regions:
            budget_left = emit(r)
            if not budget_left:
                break
        if not budget_left:
            break
        adjacency = region_adjacency(labels)
        for merged in hierarchical_group(regions, adjacency, params.similarity_weights, img_area):
            budget_left = emit(merged)
            if not budget_left:
                break

    if not out:
        out.append(Candidate(doc_id, BBox(0, 0, w, h)))
    return out


def filter_candidates(
    cands: Sequence[Candidate], query_box: BBox, gate: AspectGate
) -> list[Candidate]:
    """Order-preserving subsequence of candidates passing the aspect gate."""
    return [c for c in cands if aspect_gate(query_box, c.bbox, gate)]


def write_proposals(path: str | os.PathLike, cands: Iterable[Candidate]) -> None:
    """Dump candidates as ``doc_id<TAB>x<TAB>y<TAB>w<TAB>h`` lines."""
    lines = [f"{c.doc_id}\t{c.bbox.x}\t{c.bbox.y}\t{c.bbox.w}\t{c.bbox.h}\n" for c in cands]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_proposals(path: str | os.PathLike) -> list[Candidate]:
    """Parse a proposal dump written by :func:`write_proposals`."""
    out = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"line {ln}: expected 5 tab-separated fields, got {len(parts)}")
        try:
            box = BBox(int(parts[1]), int(parts[2]), int(parts[3]), int(parts[4]))
        except ValueError as e:
            raise FormatError(f"line {ln}: {e}") from e
        out.append(Candidate(parts[0], box))
    return out
