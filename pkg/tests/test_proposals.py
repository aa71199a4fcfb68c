import numpy as np
import pytest

import docspot as ds
from docspot import BBox, ParameterError
from docspot.proposals import (
    Region,
    adaptive_threshold,
    build_regions,
    hierarchical_group,
    read_proposals,
    region_adjacency,
    region_similarity,
    segment,
    write_proposals,
)


class TestAdaptiveThreshold:
    def test_uniform_image_empty_mask(self):
        assert not adaptive_threshold(np.full((20, 20), 200, np.uint8)).any()

    def test_all_black_empty_mask(self):
        # 0 is not below 0 - 30.6
        assert not adaptive_threshold(np.zeros((20, 20), np.uint8)).any()

    def test_single_dark_pixel(self):
        # white 9x9 page with one black center pixel, block covering all:
        # center window mean (80*255)/81 = 251.85, threshold 221.25 -> only
        # the center pixel (0) is below it.
        img = np.full((9, 9), 255, np.uint8)
        img[4, 4] = 0
        mask = adaptive_threshold(img, block=9, offset=0.12)
        assert mask.sum() == 1 and mask[4, 4]

    def test_mask_shape_matches(self):
        img = np.zeros((5, 9), np.uint8)
        assert adaptive_threshold(img, block=3).shape == (5, 9)

    def test_parameter_errors(self):
        img = np.zeros((5, 5), np.uint8)
        with pytest.raises(ParameterError):
            adaptive_threshold(img, block=4)
        with pytest.raises(ParameterError):
            adaptive_threshold(img, block=1)
        with pytest.raises(ParameterError):
            adaptive_threshold(img, offset=1.5)


class TestSegment:
    def test_uniform_single_region(self):
        labels = segment(np.full((6, 6), 7, np.uint8), 50)
        assert labels.max() == 0

    def test_two_halves(self):
        # 4x2 image, left half 0 / right half 255: the ten grid edges
        # merge each half; the two cross edges (weight 255) exceed the
        # merge threshold 50/4.
        img = np.zeros((2, 4), np.uint8)
        img[:, 2:] = 255
        labels = segment(img, 50)
        assert np.array_equal(labels, [[0, 0, 1, 1], [0, 0, 1, 1]])

    def test_checkerboard_merges_at_huge_scale(self):
        img = (np.indices((6, 6)).sum(axis=0) % 2 * 255).astype(np.uint8)
        labels = segment(img, 255 * 36)
        assert labels.max() == 0

    def test_partition_property(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, (24, 30), dtype=np.uint8)
        labels = segment(img, 100)
        ids = np.unique(labels)
        assert ids[0] == 0 and ids[-1] == len(ids) - 1  # compact ids
        assert labels.shape == img.shape  # every pixel labeled exactly once

    def test_region_count_non_increasing_in_scale(self):
        rng = np.random.default_rng(4)
        img = rng.integers(0, 256, (20, 20), dtype=np.uint8)
        counts = [segment(img, k).max() + 1 for k in (10, 50, 200, 1000, 10000)]
        assert counts == sorted(counts, reverse=True)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 256, (15, 17), dtype=np.uint8)
        assert np.array_equal(segment(img, 80), segment(img, 80))

    def test_scale_validation(self):
        with pytest.raises(ParameterError):
            segment(np.zeros((4, 4), np.uint8), 0)


class TestRegions:
    def test_build_regions_invariants(self):
        rng = np.random.default_rng(6)
        img = rng.integers(0, 256, (18, 22), dtype=np.uint8)
        labels = segment(img, 60)
        regions = build_regions(img, labels)
        assert sum(r.size for r in regions) == img.size
        for r in regions:
            assert abs(r.color_hist.sum() - 1.0) < 1e-6
            assert abs(r.texture_hist.sum() - 1.0) < 1e-6
            ys, xs = np.nonzero(labels == r.id)
            assert r.bbox == BBox(
                xs.min(), ys.min(), np.ptp(xs) + 1, np.ptp(ys) + 1
            )

    def test_similarity_identical_histograms(self):
        h = np.full(25, 1 / 25)
        t = np.full(8, 1 / 8)
        a = Region(0, BBox(0, 0, 4, 4), 16, h, t)
        b = Region(1, BBox(8, 8, 4, 4), 16, h.copy(), t.copy())
        assert region_similarity(a, b, (1, 1, 0, 0), 100) == pytest.approx(2.0)

    def test_similarity_disjoint_histograms(self):
        ha = np.zeros(25)
        ha[0] = 1.0
        hb = np.zeros(25)
        hb[24] = 1.0
        ta = np.zeros(8)
        ta[0] = 1.0
        tb = np.zeros(8)
        tb[7] = 1.0
        a = Region(0, BBox(0, 0, 4, 4), 16, ha, ta)
        b = Region(1, BBox(8, 8, 4, 4), 16, hb, tb)
        assert region_similarity(a, b, (1, 1, 0, 0), 100) == 0.0

    def test_similarity_size_and_fill(self):
        # two 10x10 regions exactly tiling their 10x20 joint bbox in a
        # 100x100 image: s_size = 1 - 200/10000, s_fill = 1 - 0/10000
        h = np.full(25, 1 / 25)
        t = np.full(8, 1 / 8)
        a = Region(0, BBox(0, 0, 10, 10), 100, h, t)
        b = Region(1, BBox(10, 0, 10, 10), 100, h, t)
        got = region_similarity(a, b, (0, 0, 1, 1), 100 * 100)
        assert got == pytest.approx(1.98)

    def test_adjacency(self):
        labels = np.array([[0, 0, 1], [2, 2, 1]], dtype=np.int32)
        assert region_adjacency(labels) == [(0, 1), (0, 2), (1, 2)]

    def test_grouping_runs_to_single_region(self):
        rng = np.random.default_rng(8)
        img = rng.integers(0, 256, (12, 12), dtype=np.uint8)
        labels = segment(img, 30)
        regions = build_regions(img, labels)
        merged = hierarchical_group(
            regions, region_adjacency(labels), (1, 1, 1, 1), img.size
        )
        if len(regions) > 1:
            assert len(merged) == len(regions) - 1
            assert merged[-1].size == img.size


class TestPropose:
    def test_uniform_page_single_fallback_proposal(self):
        page = np.full((40, 50), 200, np.uint8)
        cands = ds.propose(page, ds.ProposalParams(), "u")
        assert len(cands) <= len(ds.ProposalParams().scales)
        assert len(cands) == 1
        assert cands[0].bbox == BBox(0, 0, 50, 40)

    def test_planted_rectangle_recovered(self):
        page = np.full((200, 200), 255, np.uint8)
        page[60:90, 100:140] = 40
        plant = BBox(100, 60, 40, 30)
        cands = ds.propose(page, ds.ProposalParams(), "p")
        assert max(ds.iou(c.bbox, plant) for c in cands) >= 0.9

    def test_aspect_filter_excludes_planted_ratio(self):
        page = np.full((200, 200), 255, np.uint8)
        page[60:90, 100:140] = 40  # ratio 0.75
        cands = ds.propose(page, ds.ProposalParams(), "p")
        tall_query = BBox(0, 0, 4, 40)  # ratio 10
        kept = ds.filter_candidates(cands, tall_query, ds.AspectGate(0.25))
        assert all(c.bbox != BBox(100, 60, 40, 30) for c in kept)

    def test_within_bounds_and_duplicate_free(self):
        rng = np.random.default_rng(9)
        page = np.full((120, 150), 255, np.uint8)
        for _ in range(4):
            x, y = rng.integers(5, 100, 2)
            page[y : y + 20, x : x + 25] = int(rng.integers(20, 120))
        cands = ds.propose(page, ds.ProposalParams(), "d")
        boxes = [(c.bbox.x, c.bbox.y, c.bbox.w, c.bbox.h) for c in cands]
        assert len(set(boxes)) == len(boxes)
        for c in cands:
            assert c.bbox.right <= 150 and c.bbox.bottom <= 120

    def test_deterministic(self):
        docs, _ = ds.generate_corpus(1, 3, seed=42)
        _, img = docs[0]
        a = ds.propose(img, ds.ProposalParams(), "x")
        b = ds.propose(img, ds.ProposalParams(), "x")
        assert [c.bbox for c in a] == [c.bbox for c in b]

    def test_max_proposals_cap(self):
        rng = np.random.default_rng(10)
        img = rng.integers(0, 256, (40, 40), dtype=np.uint8)
        params = ds.ProposalParams(min_region_px=1, max_proposals=7)
        cands = ds.propose(img, params, "cap")
        assert len(cands) <= 7

    def test_small_planted_corpus_recall(self):
        docs, gt = ds.generate_corpus(6, 3, seed=77)
        dmap = dict(docs)
        found = 0
        for e in gt.entries:
            cands = ds.propose(dmap[e.doc_id], ds.ProposalParams(), e.doc_id)
            if max(ds.iou(c.bbox, e.bbox) for c in cands) >= 0.7:
                found += 1
        assert found / len(gt.entries) >= 0.9


class TestFilterCandidates:
    def _cands(self, ratios):
        return [ds.Candidate("d", BBox(0, 0, 100, int(100 * r))) for r in ratios]

    def test_empty(self):
        assert ds.filter_candidates([], BBox(0, 0, 10, 10), ds.AspectGate()) == []

    def test_same_ratio_identity(self):
        cands = self._cands([0.5, 0.5, 0.5])
        q = BBox(0, 0, 20, 10)
        assert ds.filter_candidates(cands, q, ds.AspectGate()) == cands

    def test_mixed_ratios_in_order(self):
        cands = self._cands([0.30, 0.40, 0.50, 0.60, 0.70])
        q = BBox(0, 0, 20, 10)  # ratio 0.5 -> [0.375, 0.625]
        kept = ds.filter_candidates(cands, q, ds.AspectGate(0.25))
        assert kept == [cands[1], cands[2], cands[3]]

    def test_idempotent(self):
        rng = np.random.default_rng(11)
        cands = self._cands(rng.uniform(0.1, 2.0, 40).tolist())
        q = BBox(0, 0, 10, 10)
        gate = ds.AspectGate(0.25)
        once = ds.filter_candidates(cands, q, gate)
        assert ds.filter_candidates(once, q, gate) == once


class TestProposalDump:
    def test_round_trip(self, tmp_path):
        cands = [
            ds.Candidate("doc a", BBox(1, 2, 3, 4)),
            ds.Candidate("doc_b", BBox(0, 0, 10, 20)),
        ]
        p = tmp_path / "props.tsv"
        write_proposals(p, cands)
        back = read_proposals(p)
        assert [(c.doc_id, c.bbox) for c in back] == [(c.doc_id, c.bbox) for c in cands]

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("doc\t1\t2\t3\n", encoding="utf-8")
        with pytest.raises(ds.FormatError):
            read_proposals(p)
