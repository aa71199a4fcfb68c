import numpy as np
import pytest

import docspot as ds
from docspot.cli import load_config, main
from docspot.images import crop, read_pgm


class TestSynth:
    def test_deterministic(self):
        a_docs, a_gt = ds.generate_corpus(3, 3, seed=5)
        b_docs, b_gt = ds.generate_corpus(3, 3, seed=5)
        assert a_gt.entries == b_gt.entries
        for (ida, imga), (idb, imgb) in zip(a_docs, b_docs):
            assert ida == idb and np.array_equal(imga, imgb)

    def test_single_page_single_plant(self):
        docs, gt = ds.generate_corpus(1, 1, seed=0)
        assert len(docs) == 1
        assert len(gt.entries) == 1

    def test_plants_within_bounds(self):
        docs, gt = ds.generate_corpus(8, 3, seed=1)
        dmap = dict(docs)
        for e in gt.entries:
            h, w = dmap[e.doc_id].shape
            assert e.bbox.right <= w and e.bbox.bottom <= h

    def test_contrast_at_least_100(self):
        docs, gt = ds.generate_corpus(6, 3, seed=2)
        dmap = dict(docs)
        for e in gt.entries:
            patch = crop(dmap[e.doc_id], e.bbox)
            assert 255 - int(patch.min()) >= 100

    def test_tight_bounds(self):
        # every gt box edge touches ink
        docs, gt = ds.generate_corpus(4, 2, seed=3)
        dmap = dict(docs)
        for e in gt.entries:
            patch = crop(dmap[e.doc_id], e.bbox)
            ink = patch < 200
            assert ink[0, :].any() and ink[-1, :].any()
            assert ink[:, 0].any() and ink[:, -1].any()


class TestConfig:
    def test_parse(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("pages = 4  # comment\n\n# full line comment\nseed = 9\n", "utf-8")
        assert load_config(p) == {"pages": "4", "seed": "9"}

    def test_malformed(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("pages 4\n", "utf-8")
        with pytest.raises(ds.FormatError):
            load_config(p)

    def test_config_drives_synth_and_flags_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("pages = 2\nplants = 1\nseed = 3\n", "utf-8")
        out1 = tmp_path / "c1"
        assert main(["synth", "--config", str(cfg), "--out", str(out1)]) == 0
        assert len(list(out1.glob("*.pgm"))) == 2
        out2 = tmp_path / "c2"
        assert main(["synth", "--config", str(cfg), "--out", str(out2), "--pages", "3"]) == 0
        assert len(list(out2.glob("*.pgm"))) == 3


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> propose -> train -> index via the CLI, kept for reuse."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    rc = main(["synth", "--out", str(corpus), "--pages", "6", "--plants", "3", "--seed", "21"])
    assert rc == 0
    gt = corpus / "ground_truth.tsv"

    props = root / "proposals.tsv"
    assert main(["propose", "--corpus", str(corpus), "--out", str(props)]) == 0

    model = root / "model.bin"
    rc = main(
        [
            "train", "--corpus", str(corpus), "--gt", str(gt), "--out", str(model),
            "--epochs", "4", "--embed-dim", "32", "--seed", "2",
        ]
    )
    assert rc == 0

    store = root / "store.bin"
    assert main(["index", "--corpus", str(corpus), "--model", str(model), "--out", str(store)]) == 0
    return root, corpus, gt, props, model, store


class TestPipelineCommands:
    def test_outputs_exist(self, pipeline):
        root, corpus, gt, props, model, store = pipeline
        assert props.read_text("utf-8").strip()
        assert model.stat().st_size > 0
        assert ds.load_store(store).dim == 32

    def test_proposals_parse(self, pipeline):
        _, _, _, props, _, _ = pipeline
        cands = ds.read_proposals(props)
        assert cands and all(c.doc_id.startswith("page_") for c in cands)

    def test_query_prints_ranked_hits(self, pipeline, capsys, tmp_path):
        root, corpus, gt, props, model, store = pipeline
        entries = ds.load_ground_truth(gt).entries
        page = read_pgm(corpus / f"{entries[0].doc_id}.pgm")
        from docspot.images import write_pgm

        qpath = tmp_path / "q.pgm"
        write_pgm(qpath, crop(page, entries[0].bbox))
        rc = main(
            ["query", "--store", str(store), "--model", str(model),
             "--patch", str(qpath), "--topk", "4", "--mode", "spotting"]
        )
        assert rc == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l]
        assert 1 <= len(lines) <= 4
        first = lines[0].split("\t")
        assert len(first) == 7 and first[0] == "1"
        float(first[6])

    def test_index_reruns_byte_identical(self, pipeline, tmp_path):
        root, corpus, gt, props, model, store = pipeline
        again = tmp_path / "store2.bin"
        assert main(["index", "--corpus", str(corpus), "--model", str(model), "--out", str(again)]) == 0
        assert store.read_bytes() == again.read_bytes()

    def test_eval_writes_report(self, pipeline, capsys, tmp_path):
        root, corpus, gt, props, model, store = pipeline
        rep = tmp_path / "report.tsv"
        rc = main(
            ["eval", "--corpus", str(corpus), "--gt", str(gt), "--store", str(store),
             "--model", str(model), "--mode", "spotting", "--topk-set", "1,5",
             "--iou-grid", "0.1,0.5", "--out", str(rep), "--seed", "4"]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "mAP" in out
        lines = rep.read_text("utf-8").splitlines()
        assert any(l.startswith("mAP\t5\t0.5\t") for l in lines)
        rep2 = tmp_path / "report2.tsv"
        main(
            ["eval", "--corpus", str(corpus), "--gt", str(gt), "--store", str(store),
             "--model", str(model), "--mode", "spotting", "--topk-set", "1,5",
             "--iou-grid", "0.1,0.5", "--out", str(rep2), "--seed", "4"]
        )
        assert rep.read_bytes() == rep2.read_bytes()

    def test_query_dim_mismatch_names_both(self, pipeline, capsys, tmp_path):
        root, corpus, gt, props, model, store = pipeline
        # 4-dim store against the 32-dim model
        matrix = tmp_path / "m.f32"
        matrix.write_bytes(np.zeros((2, 4), dtype="<f4").tobytes())
        manifest = tmp_path / "manifest.tsv"
        manifest.write_text("a\t0\t0\t2\t2\nb\t0\t0\t2\t2\n", "utf-8")
        bad_store = tmp_path / "bad_store.bin"
        ds.save_store(ds.import_features(matrix, manifest, dim=4), bad_store)
        page = sorted(corpus.glob("*.pgm"))[0]
        rc = main(["query", "--store", str(bad_store), "--model", str(model), "--patch", str(page)])
        assert rc != 0
        err = capsys.readouterr().err
        assert "4" in err and "32" in err

    def test_missing_input_fails_cleanly(self, capsys, tmp_path):
        rc = main(["index", "--corpus", str(tmp_path / "nope"), "--model", "x", "--out", "y"])
        assert rc != 0
        assert "error:" in capsys.readouterr().err


class TestBenchCommand:
    def test_dims_rows(self, capsys):
        rc = main(
            ["bench", "--kind", "dims", "--dims", "16,32", "--records", "400",
             "--queries", "1", "--repeats", "1", "--seed", "0"]
        )
        assert rc == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l]
        rows = [l for l in lines if l.split("\t")[0].isdigit()]
        assert len(rows) == 2

    def test_paths_rank_identical(self, pipeline, capsys):
        root, corpus, gt, props, model, store = pipeline
        rc = main(
            ["bench", "--kind", "paths", "--corpus", str(corpus), "--model", str(model),
             "--queries", "2", "--seed", "1"]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "rank_identical\tTrue" in out
