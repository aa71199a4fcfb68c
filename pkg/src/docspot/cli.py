"""Command-line surface composing the pipeline end to end.

Subcommands: synth, propose, train, index, query, eval, bench.
Configuration comes from flat ``key = value`` files (# comments);
command-line flags override file values. All randomness flows from a
single --seed per command.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, CorpusError, DocspotError, FormatError
from .evaluation import evaluate, load_ground_truth, queries_from_ground_truth
from .geometry import AspectGate, BBox
from .images import crop, read_pgm, resize_bilinear
from .index import (
    FeatureStore,
    QueryRequest,
    bench_throughput,
    index_corpus,
    load_store,
    save_store,
    search,
    search_via_pair_head,
)
from .proposals import ProposalParams, propose, write_proposals
from .siamese import (
    TrainConfig,
    default_encoder,
    grad_check,
    init_model,
    load_model,
    make_pairs,
    save_model,
    train,
)
from .synth import generate_corpus, write_corpus


def load_config(path) -> dict[str, str]:
    """Parse a flat ``key = value`` config file with # comments."""
    cfg: dict[str, str] = {}
    for ln, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {ln}: expected 'key = value'")
        key, value = line.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


class Settings:
    """Flag > config file > default resolution for one command."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = load_config(args.config) if getattr(args, "config", None) else {}

    def get(self, key: str, default, cast=None):
        cli_val = getattr(self.args, key, None)
        if cli_val is not None:
            return cli_val
        if key in self.config:
            raw = self.config[key]
            if cast is not None:
                return cast(raw)
            if default is not None:
                return type(default)(raw)
            return raw
        return default


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _proposal_params(s: Settings) -> ProposalParams:
    return ProposalParams(
        block=s.get("block", 241),
        offset=s.get("offset", 0.12),
        scales=_parse_floats(s.get("scales", "50,100", cast=str)),
        min_region_px=s.get("min_region_px", 50),
        max_proposals=s.get("max_proposals", 2000),
        similarity_weights=_parse_floats(s.get("weights", "1,1,1,1", cast=str)),
    )


def _train_config(s: Settings) -> TrainConfig:
    return TrainConfig(
        lr0=s.get("lr0", 1e-3),
        decay=s.get("decay", 0.95),
        epochs=s.get("epochs", 30),
        batch=s.get("batch", 16),
        neg_ratio=s.get("neg_ratio", 1.5),
        split=s.get("split", 0.70),
        seed=s.get("seed", 0),
    )


def _gate(s: Settings) -> AspectGate | None:
    if getattr(s.args, "no_gate", False):
        return None
    return AspectGate(s.get("gate_tolerance", 0.25))


def _corpus_docs(corpus_dir: str) -> list[tuple[str, Path]]:
    root = Path(corpus_dir)
    if not root.is_dir():
        raise CorpusError(f"corpus directory not found: {corpus_dir}")
    paths = sorted(root.glob("*.pgm"))
    if not paths:
        raise CorpusError(f"no .pgm pages in {corpus_dir}")
    return [(p.stem, p) for p in paths]


def _load_docs(corpus_dir: str) -> dict[str, np.ndarray]:
    return {doc_id: read_pgm(p) for doc_id, p in _corpus_docs(corpus_dir)}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    s = Settings(args)
    pages = s.get("pages", 20)
    plants = s.get("plants", 3)
    seed = s.get("seed", 0)
    out = s.get("out", None, cast=str)
    if out is None:
        raise ConfigurationError("synth requires --out DIR")
    docs, gt = generate_corpus(
        pages, plants, seed, height=s.get("height", 200), width=s.get("width", 200)
    )
    paths, gt_path = write_corpus(out, docs, gt)
    print(f"wrote {len(paths)} pages and {len(gt.entries)} ground-truth entries to {out}")
    return 0


def cmd_propose(args) -> int:
    s = Settings(args)
    corpus = s.get("corpus", None, cast=str)
    out = s.get("out", None, cast=str)
    if corpus is None or out is None:
        raise ConfigurationError("propose requires --corpus DIR and --out FILE")
    params = _proposal_params(s)
    cands = []
    for doc_id, path in _corpus_docs(corpus):
        cands.extend(propose(read_pgm(path), params, doc_id))
    write_proposals(out, cands)
    print(f"wrote {len(cands)} proposals to {out}")
    return 0


def cmd_train(args) -> int:
    s = Settings(args)
    corpus = s.get("corpus", None, cast=str)
    gt_path = s.get("gt", None, cast=str)
    out = s.get("out", None, cast=str)
    if corpus is None or gt_path is None or out is None:
        raise ConfigurationError("train requires --corpus DIR, --gt FILE and --out FILE")
    cfg = _train_config(s)
    embed_dim = s.get("embed_dim", 128)
    input_size = s.get("input_size", 32)

    docs = _load_docs(corpus)
    gt = load_ground_truth(gt_path)
    counts: dict[str, int] = {}
    for e in gt.entries:
        counts[e.category] = counts.get(e.category, 0) + 1
    dataset = []
    for e in gt.entries:
        if counts[e.category] < 2:
            continue
        if e.doc_id not in docs:
            raise CorpusError(f"ground truth references missing page {e.doc_id!r}")
        patch = resize_bilinear(crop(docs[e.doc_id], e.bbox), input_size, input_size)
        dataset.append((patch, e.category))

    model = init_model(
        default_encoder(None if embed_dim == 0 else embed_dim),
        input_shape=(1, input_size, input_size),
        seed=cfg.seed,
    )
    train_pairs, test_pairs = make_pairs(dataset, cfg)
    check = grad_check(model, train_pairs[0])
    if check.skipped:
        check = grad_check(model, next(p for p in train_pairs if p.label == 0))
    print(f"gradient check: max relative error {check.max_rel_error:.2e} "
          f"({check.checked} params)")
    if not check.max_rel_error < 1e-4:
        raise ConfigurationError(
            f"gradient check failed ({check.max_rel_error:.2e} >= 1e-4); refusing to train"
        )
    trained, trace = train(model, train_pairs, cfg)
    save_model(trained, out)
    print(
        f"trained on {len(train_pairs)} pairs ({len(test_pairs)} held out), "
        f"{cfg.epochs} epochs: loss {trace[0]:.4f} -> {trace[-1]:.4f}"
    )
    print(f"wrote model ({trained.embed_dim} dims) to {out}")
    return 0


def cmd_index(args) -> int:
    s = Settings(args)
    corpus = s.get("corpus", None, cast=str)
    model_path = s.get("model", None, cast=str)
    out = s.get("out", None, cast=str)
    if corpus is None or model_path is None or out is None:
        raise ConfigurationError("index requires --corpus DIR, --model FILE and --out FILE")
    model = load_model(model_path)
    params = _proposal_params(s)
    result = index_corpus(_corpus_docs(corpus), params, model, workers=s.get("threads", 1))
    for doc_id, msg in result.errors:
        print(f"warning: skipped {doc_id}: {msg}", file=sys.stderr)
    save_store(result.store, out)
    print(f"indexed {len(result.store)} candidates from {corpus} into {out}")
    return 0


def cmd_query(args) -> int:
    s = Settings(args)
    store_path = s.get("store", None, cast=str)
    model_path = s.get("model", None, cast=str)
    patch_path = s.get("patch", None, cast=str)
    if store_path is None or model_path is None or patch_path is None:
        raise ConfigurationError("query requires --store FILE, --model FILE and --patch FILE")
    store = load_store(store_path)
    model = load_model(model_path)
    patch = read_pgm(patch_path)
    h, w = patch.shape
    req = QueryRequest(
        query_patch=patch,
        query_box_dims=BBox(0, 0, w, h),
        topk=s.get("topk", 10),
        mode=s.get("mode", "retrieval"),
        gate=_gate(s),
    )
    hits = search(store, req, model, workers=s.get("threads", 1))
    for hit in hits:
        b = hit.bbox
        print(f"{hit.rank}\t{hit.doc_id}\t{b.x}\t{b.y}\t{b.w}\t{b.h}\t{hit.distance:.6f}")
    return 0


def cmd_eval(args) -> int:
    s = Settings(args)
    corpus = s.get("corpus", None, cast=str)
    gt_path = s.get("gt", None, cast=str)
    store_path = s.get("store", None, cast=str)
    model_path = s.get("model", None, cast=str)
    out = s.get("out", None, cast=str)
    if None in (corpus, gt_path, store_path, model_path, out):
        raise ConfigurationError(
            "eval requires --corpus DIR, --gt FILE, --store FILE, --model FILE and --out FILE"
        )
    docs = _load_docs(corpus)
    gt = load_ground_truth(gt_path)
    store = load_store(store_path)
    model = load_model(model_path)
    report = evaluate(
        store,
        model,
        gt,
        queries_from_ground_truth(gt),
        docs,
        topk_set=_parse_ints(s.get("topk_set", "5,10,25,50,100", cast=str)),
        iou_grid=_parse_floats(s.get("iou_grid", "0.1,0.2,0.3,0.4,0.5,0.6,0.7", cast=str)),
        mode=s.get("mode", "retrieval"),
        gate=_gate(s),
        workers=s.get("threads", 1),
        seed=s.get("seed", 0),
    )
    report.save(out)
    print(report.to_table())
    print(f"wrote per-query report to {out}")
    return 0


def cmd_bench(args) -> int:
    s = Settings(args)
    kind = s.get("kind", "dims")
    seed = s.get("seed", 0)
    if kind not in ("dims", "paths", "both"):
        raise ConfigurationError(f"bench kind must be dims, paths or both, got {kind!r}")

    if kind in ("dims", "both"):
        dims = _parse_ints(s.get("dims", "128,256,512", cast=str))
        n_records = s.get("records", 20000)
        n_queries = s.get("queries", 3)
        rng = np.random.default_rng(seed)
        stores, models = {}, {}
        for dim in dims:
            models[dim] = init_model(default_encoder(dim), seed=seed)
            store = FeatureStore(dim)
            feats = rng.random((n_records, dim), dtype=np.float32)
            for i in range(n_records):
                store.add(f"doc_{i % 97:03d}", BBox(0, 0, 8, 8), feats[i])
            stores[dim] = store
        patches = [rng.integers(0, 256, (32, 32), dtype=np.uint8) for _ in range(n_queries)]
        print("dim\trecords\tcandidates_per_sec\tquery_latency_s")
        for row in bench_throughput(stores, models, patches, repeats=s.get("repeats", 3)):
            print(
                f"{row.dim}\t{row.n_records}\t{row.candidates_per_sec:.0f}"
                f"\t{row.query_latency_s:.6f}"
            )

    if kind in ("paths", "both"):
        corpus = s.get("corpus", None, cast=str)
        model_path = s.get("model", None, cast=str)
        if corpus is None:
            raise ConfigurationError("bench --kind paths requires --corpus DIR")
        docs = _load_docs(corpus)
        model = (
            load_model(model_path)
            if model_path
            else init_model(default_encoder(s.get("embed_dim", 128)), seed=seed)
        )
        result = index_corpus(list(docs.items()), _proposal_params(s), model)
        store = result.store
        rng = np.random.default_rng(seed)
        n_queries = max(2, s.get("queries", 3))
        patches = []
        doc_list = sorted(docs)
        for _ in range(n_queries):
            img = docs[doc_list[int(rng.integers(0, len(doc_list)))]]
            hh, ww = img.shape
            bw = int(rng.integers(16, min(64, ww)))
            bh = int(rng.integers(16, min(64, hh)))
            x = int(rng.integers(0, ww - bw))
            y = int(rng.integers(0, hh - bh))
            patches.append(crop(img, BBox(x, y, bw, bh)))
        reqs = [
            QueryRequest(p, BBox(0, 0, p.shape[1], p.shape[0]), s.get("topk", 10), "spotting")
            for p in patches
        ]
        t0 = time.perf_counter()
        fast = [search(store, r, model) for r in reqs]
        t_fast = time.perf_counter() - t0
        t0 = time.perf_counter()
        slow = [search_via_pair_head(store, r, model, docs) for r in reqs]
        t_slow = time.perf_counter() - t0
        same = all(
            [(h.doc_id, h.bbox) for h in a] == [(h.doc_id, h.bbox) for h in b]
            for a, b in zip(fast, slow)
        )
        print(f"path\tqueries\tcandidates\ttotal_s\tper_query_s")
        print(f"feature_extractor\t{len(reqs)}\t{len(store)}\t{t_fast:.4f}\t{t_fast/len(reqs):.4f}")
        print(f"pair_head\t{len(reqs)}\t{len(store)}\t{t_slow:.4f}\t{t_slow/len(reqs):.4f}")
        print(f"rank_identical\t{same}\tspeedup\t{t_slow / t_fast:.2f}x")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="seed for all randomness of this command")
    p.add_argument("--threads", type=int, help="worker threads")
    p.add_argument("--out", help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docspot", description="document image retrieval and pattern spotting"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus with ground truth")
    _add_common(p)
    p.add_argument("--pages", type=int)
    p.add_argument("--plants", type=int, help="maximum plants per page")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("propose", help="dump region proposals for a corpus")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--block", type=int)
    p.add_argument("--offset", type=float)
    p.add_argument("--scales")
    p.add_argument("--min-region-px", dest="min_region_px", type=int)
    p.add_argument("--max-proposals", dest="max_proposals", type=int)
    p.add_argument("--weights")
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("train", help="train the pair-similarity model on ground-truth crops")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--gt")
    p.add_argument("--embed-dim", dest="embed_dim", type=int, help="0 selects unreduced mode")
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--neg-ratio", dest="neg_ratio", type=float)
    p.add_argument("--split", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="propose + embed a corpus into a feature store")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--model")
    p.add_argument("--block", type=int)
    p.add_argument("--offset", type=float)
    p.add_argument("--scales")
    p.add_argument("--min-region-px", dest="min_region_px", type=int)
    p.add_argument("--max-proposals", dest="max_proposals", type=int)
    p.add_argument("--weights")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="rank stored candidates against a query patch")
    _add_common(p)
    p.add_argument("--store")
    p.add_argument("--model")
    p.add_argument("--patch")
    p.add_argument("--topk", type=int)
    p.add_argument("--mode", choices=("retrieval", "spotting"))
    p.add_argument("--gate-tolerance", dest="gate_tolerance", type=float)
    p.add_argument("--no-gate", dest="no_gate", action="store_true")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="evaluate retrieval or spotting over all queries")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--gt")
    p.add_argument("--store")
    p.add_argument("--model")
    p.add_argument("--mode", choices=("retrieval", "spotting"))
    p.add_argument("--topk-set", dest="topk_set")
    p.add_argument("--iou-grid", dest="iou_grid")
    p.add_argument("--gate-tolerance", dest="gate_tolerance", type=float)
    p.add_argument("--no-gate", dest="no_gate", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="throughput and extract-once-vs-rescore benchmarks")
    _add_common(p)
    p.add_argument("--kind", choices=("dims", "paths", "both"))
    p.add_argument("--dims")
    p.add_argument("--records", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--corpus")
    p.add_argument("--model")
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--block", type=int)
    p.add_argument("--offset", type=float)
    p.add_argument("--scales")
    p.add_argument("--min-region-px", dest="min_region_px", type=int)
    p.add_argument("--max-proposals", dest="max_proposals", type=int)
    p.add_argument("--weights")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DocspotError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
