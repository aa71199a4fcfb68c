"""Deterministic synthetic document pages with planted category stamps.

Each category is a distinct dark shape (disk, ring, frame, plus,
triangle, banded square) drawn on white paper with intensity jitter,
plus a few thin distractor lines standing in for text. The ground
truth records the tight ink bounds of every stamp. Output is
bit-identical for a given seed.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .evaluation import GroundTruth, GtEntry, save_ground_truth
from .geometry import BBox
from .images import write_pgm

CATEGORIES = ("disk", "ring", "frame", "plus", "triangle", "bands")

_PAPER = 255
_MARGIN = 10  # clearance between plants and from page borders


def _stamp_mask(category: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Ink intensity tile (0 = no ink) for one stamp category."""
    s = size
    tile = np.zeros((s, s), dtype=np.int64)
    base = int(rng.integers(30, 81))
    yy, xx = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2.0
    if category == "disk":
        r = s / 2.0 - 1.0
        tile[(yy - c) ** 2 + (xx - c) ** 2 <= r * r] = base
    elif category == "ring":
        r_out = s / 2.0 - 1.0
        r_in = max(r_out - max(3.0, s / 5.0), 1.0)
        d2 = (yy - c) ** 2 + (xx - c) ** 2
        tile[(d2 <= r_out * r_out) & (d2 >= r_in * r_in)] = base
    elif category == "frame":
        t = max(3, s // 7)
        tile[:t, :] = base
        tile[-t:, :] = base
        tile[:, :t] = base
        tile[:, -t:] = base
    elif category == "plus":
        t = max(3, s // 5)
        lo = int(c - t / 2.0)
        hi = lo + t
        tile[lo:hi, :] = base
        tile[:, lo:hi] = base
    elif category == "triangle":
        half = (yy + 1) * (s / 2.0) / s
        tile[np.abs(xx - c) <= half] = base
    elif category == "bands":
        tile[:, :] = base
        band = max(3, s // 5)
        second = base + 45
        for y0 in range(0, s, 2 * band):
            tile[y0 : y0 + band, :] = second
    else:
        raise ParameterError(f"unknown stamp category {category!r}")
    return tile


def _tight_bounds(tile: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(tile)
    return int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)


def _boxes_clear(box: BBox, others: list[BBox], margin: int) -> bool:
    for o in others:
        if (
            box.x < o.right + margin
            and o.x < box.right + margin
            and box.y < o.bottom + margin
            and o.y < box.bottom + margin
        ):
            return False
    return True


def make_page(
    rng: np.random.Generator,
    height: int = 200,
    width: int = 200,
    max_plants: int = 3,
    categories: tuple[str, ...] = CATEGORIES,
) -> tuple[np.ndarray, list[tuple[str, BBox]]]:
    """One page plus its (category, tight ink bbox) plants."""
    page = np.full((height, width), _PAPER, dtype=np.uint8)
    placed: list[BBox] = []
    plants: list[tuple[str, BBox]] = []

    n_plants = int(rng.integers(1, max_plants + 1))
    for _ in range(n_plants):
        category = categories[int(rng.integers(0, len(categories)))]
        size = int(rng.integers(26, 45))
        tile = _stamp_mask(category, size, rng)
        bx, by, bw, bh = _tight_bounds(tile)
        for _attempt in range(200):
            x = int(rng.integers(_MARGIN, width - size - _MARGIN + 1))
            y = int(rng.integers(_MARGIN, height - size - _MARGIN + 1))
            box = BBox(x + bx, y + by, bw, bh)
            if _boxes_clear(box, placed, _MARGIN):
                ink = tile > 0
                region = page[y : y + size, x : x + size]
                region[ink] = tile[ink]
                placed.append(box)
                plants.append((category, box))
                break

    n_lines = int(rng.integers(2, 6))
    for _ in range(n_lines):
        length = int(rng.integers(20, 61))
        thick = int(rng.integers(1, 3))
        shade = int(rng.integers(90, 151))
        for _attempt in range(50):
            x = int(rng.integers(2, max(3, width - length - 2)))
            y = int(rng.integers(2, height - thick - 2))
            box = BBox(x, y, length, thick)
            if _boxes_clear(box, placed, _MARGIN // 2):
                page[y : y + thick, x : x + length] = shade
                placed.append(box)
                break

    return page, plants


def generate_corpus(
    pages: int,
    plants_per_page: int = 3,
    seed: int = 0,
    height: int = 200,
    width: int = 200,
) -> tuple[list[tuple[str, np.ndarray]], GroundTruth]:
    """In-memory corpus: (doc_id, page) list and its ground truth."""
    if pages < 1:
        raise ParameterError(f"pages must be >= 1, got {pages}")
    if plants_per_page < 1:
        raise ParameterError(f"plants_per_page must be >= 1, got {plants_per_page}")
    rng = np.random.default_rng(seed)
    docs: list[tuple[str, np.ndarray]] = []
    entries: list[GtEntry] = []
    for p in range(pages):
        doc_id = f"page_{p:03d}"
        page, plants = make_page(rng, height, width, plants_per_page)
        docs.append((doc_id, page))
        for category, box in plants:
            entries.append(GtEntry(doc_id, category, box))
    return docs, GroundTruth(entries)


def write_corpus(
    out_dir: str | os.PathLike,
    docs: list[tuple[str, np.ndarray]],
    gt: GroundTruth,
) -> tuple[list[Path], Path]:
    """Write pages as PGM files plus ``ground_truth.tsv``; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for doc_id, img in docs:
        p = out / f"{doc_id}.pgm"
        write_pgm(p, img)
        paths.append(p)
    gt_path = out / "ground_truth.tsv"
    save_ground_truth(gt, gt_path)
    return paths, gt_path
