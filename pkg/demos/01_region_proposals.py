"""Candidate generation, step by step.

Builds one synthetic page, walks through the preprocessing mask, the
graph-based over-segmentation at both scales, hierarchical grouping,
and the aspect-ratio gate.
"""

import numpy as np

import docspot as ds
from docspot.proposals import adaptive_threshold, build_regions, region_adjacency, segment

# one page with three planted stamps
docs, gt = ds.generate_corpus(pages=1, plants_per_page=3, seed=8)
doc_id, page = docs[0]
print(f"page {doc_id}: {page.shape[1]}x{page.shape[0]} px, "
      f"{len(gt.entries)} planted patterns")
for e in gt.entries:
    print(f"  plant {e.category:9s} at {e.bbox}")

# 1. adaptive threshold: ink vs paper
mask = adaptive_threshold(page, block=241, offset=0.12)
print(f"\nadaptive threshold marks {mask.sum()} ink pixels "
      f"({100 * mask.mean():.2f}% of the page)")

# 2. over-segmentation at the two default scales
for scale in (50.0, 100.0):
    labels = segment(page, scale)
    regions = build_regions(page, labels, mask)
    adj = region_adjacency(labels)
    print(f"scale {scale:5.0f}: {labels.max() + 1} regions, {len(adj)} adjacent pairs")

# 3. full proposal run (segment + greedy grouping + dedup + filters)
params = ds.ProposalParams()
cands = ds.propose(page, params, doc_id)
print(f"\npropose() emits {len(cands)} candidates")
for e in gt.entries:
    best = max(ds.iou(c.bbox, e.bbox) for c in cands)
    print(f"  best IoU against {e.category:9s}: {best:.3f}")

# 4. the aspect gate drops candidates whose h/w ratio strays >25%
query_box = gt.entries[0].bbox
kept = ds.filter_candidates(cands, query_box, ds.AspectGate(0.25))
print(f"\naspect gate for a query of ratio {query_box.ratio:.2f}: "
      f"{len(cands)} -> {len(kept)} candidates")
