import json
import os

import numpy as np
import pytest

from clustertab.cli import main
from clustertab.docmodel import load_page_json
from clustertab.model import ModelConfig, init_params
from clustertab.render import render_overlay
from clustertab.synthgen import GenConfig, generate_split
from clustertab.tokenizer import load_vocab
from clustertab.trainer import TrainConfig, save_train_checkpoint, AdamState


SMALL_GEN = {
    "tables_range": [1, 1],
    "rows_range": [2, 3],
    "cols_range": [2, 3],
    "words_per_cell": [1, 1],
    "noise_words_range": [0, 4],
    "span_prob": 0.0,
}


def _gen(tmp_path, n=4, seed=3, name="data"):
    out = tmp_path / name
    generate_split(GenConfig.from_dict({**SMALL_GEN, "seed": seed}), n, out)
    return out


def _train_tiny(tmp_path, data_dir, steps=30):
    out = tmp_path / "run"
    rc = main([
        "train", "--data", str(data_dir), "--out", str(out),
        "--seq-len", "16", "--batch-size", "2",
        "--layers", "1", "--d-model", "16", "--dff", "32", "--heads", "2", "--c-out", "8",
        "--epochs1", "1", "--epochs2", "0", "--steps-per-epoch", str(steps),
        "--lr1", "3e-3", "--dropout", "0.0",
    ])
    assert rc == 0
    return out / "checkpoint.bin", out / "vocab.txt"


class TestBasicCommands:
    def test_gen_data_deterministic(self, tmp_path, capsys):
        out1 = tmp_path / "d1"
        out2 = tmp_path / "d2"
        for out in (out1, out2):
            rc = main(["gen-data", "--seed", "7", "--pages", "5", "--out", str(out)])
            assert rc == 0
        files1 = sorted(p.name for p in out1.glob("*.json"))
        assert len(files1) == 6
        for name in files1:
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_build_vocab(self, tmp_path):
        data = _gen(tmp_path)
        vocab_path = tmp_path / "vocab.txt"
        rc = main(["build-vocab", "--input", str(data), "--size", "50",
                   "--output", str(vocab_path)])
        assert rc == 0
        vocab = load_vocab(vocab_path)
        assert len(vocab) >= 2

    def test_unknown_command_is_validation_error(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_missing_data_dir_is_validation_error(self, tmp_path):
        rc = main(["build-vocab", "--input", str(tmp_path / "nope"), "--output",
                   str(tmp_path / "v.txt")])
        assert rc == 1

    def test_bad_config_file_is_validation_error(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("[1, 2, 3]")
        rc = main(["gen-data", "--pages", "1", "--out", str(tmp_path / "x"),
                   "--config", str(cfg)])
        assert rc == 1

    def test_config_file_provides_defaults_flags_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"pages": 2, "seed": 9, **SMALL_GEN}))
        out = tmp_path / "with_cfg"
        rc = main(["gen-data", "--out", str(out), "--config", str(cfg)])
        assert rc == 0
        assert len(list(out.glob("page_*.json"))) == 2
        out2 = tmp_path / "override"
        rc = main(["gen-data", "--out", str(out2), "--config", str(cfg), "--pages", "3"])
        assert rc == 0
        assert len(list(out2.glob("page_*.json"))) == 3


class TestPredictEvaluate:
    def test_predict_then_evaluate_composes(self, tmp_path):
        data = _gen(tmp_path, n=4)
        ckpt, vocab = _train_tiny(tmp_path, data)
        pred_dir = tmp_path / "preds"
        rc = main(["predict", "--data", str(data), "--checkpoint", str(ckpt),
                   "--out", str(pred_dir), "--k", "0.9"])
        assert rc == 0
        pred_files = list(pred_dir.glob("*.pred.json"))
        assert len(pred_files) == 4

        report_a = tmp_path / "report_files.json"
        rc = main(["evaluate", "--data", str(data), "--predictions", str(pred_dir),
                   "--out", str(report_a), "--k", "0.9"])
        assert rc == 0
        report_b = tmp_path / "report_ckpt.json"
        per_page = tmp_path / "per_page.csv"
        rc = main(["evaluate", "--data", str(data), "--checkpoint", str(ckpt),
                   "--out", str(report_b), "--k", "0.9", "--per-page", str(per_page)])
        assert rc == 0

        a = json.loads(report_a.read_text())
        b = json.loads(report_b.read_text())
        for cls in a:
            for key in ("ap", "ap50", "ar", "n_gt", "n_pred"):
                assert a[cls][key] == b[cls][key], (cls, key)
            assert a[cls]["dice"] is None
            assert b[cls]["dice"] is not None
        assert per_page.exists()
        header = per_page.read_text().splitlines()[0]
        assert header.startswith("page,dice_table")

    def test_evaluate_requires_a_source(self, tmp_path):
        data = _gen(tmp_path)
        assert main(["evaluate", "--data", str(data)]) == 1

    def test_jobs_parallel_output_identical(self, tmp_path):
        data = _gen(tmp_path, n=4)
        ckpt, vocab = _train_tiny(tmp_path, data)
        p1 = tmp_path / "p1"
        p2 = tmp_path / "p2"
        main(["predict", "--data", str(data), "--checkpoint", str(ckpt), "--out", str(p1)])
        main(["predict", "--data", str(data), "--checkpoint", str(ckpt), "--out", str(p2),
              "--jobs", "2"])
        for f in sorted(p1.glob("*.json")):
            assert f.read_bytes() == (p2 / f.name).read_bytes()


class TestSweep:
    def test_grid_rows(self, tmp_path):
        data = _gen(tmp_path, n=3)
        ckpt, vocab = _train_tiny(tmp_path, data, steps=10)
        out = tmp_path / "sweep.json"
        rc = main(["sweep-threshold", "--data", str(data), "--checkpoint", str(ckpt),
                   "--grid", "0.5:0.95:0.05", "--out", str(out)])
        assert rc == 0
        rows = json.loads(out.read_text())
        assert len(rows) == 10
        assert [r["k"] for r in rows] == pytest.approx(list(np.arange(0.5, 0.951, 0.05)))
        for r in rows:
            assert set(r) == {"k", "dice", "ap50"}

    def test_bad_grid_is_validation_error(self, tmp_path):
        data = _gen(tmp_path, n=2)
        rc = main(["sweep-threshold", "--data", str(data), "--checkpoint", "x",
                   "--grid", "nope"])
        assert rc == 1


class TestRender:
    def test_labels_overlay_element_counts(self, tmp_path):
        data = _gen(tmp_path, n=1, seed=12)
        page_file = next(data.glob("page_*.json"))
        out = tmp_path / "overlay.svg"
        rc = main(["render", "--page", str(page_file), "--labels", "--out", str(out)])
        assert rc == 0
        svg = out.read_text()
        page, ann = load_page_json(page_file)
        assert svg.count("<rect") >= page.n_words + len(ann.tables[0].rows)
        assert svg.startswith("<svg")

    def test_render_deterministic(self, tmp_path):
        data = _gen(tmp_path, n=1, seed=12)
        page_file = next(data.glob("page_*.json"))
        a = tmp_path / "a.svg"
        b = tmp_path / "b.svg"
        main(["render", "--page", str(page_file), "--labels", "--out", str(a)])
        main(["render", "--page", str(page_file), "--labels", "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_empty_prediction_words_only(self, tmp_path):
        data = _gen(tmp_path, n=1, seed=12)
        page_file = next(data.glob("page_*.json"))
        pred_file = tmp_path / "empty.pred.json"
        pred_file.write_text("{}")
        out = tmp_path / "o.svg"
        rc = main(["render", "--page", str(page_file), "--prediction", str(pred_file),
                   "--out", str(out)])
        assert rc == 0
        page, _ = load_page_json(page_file)
        assert out.read_text().count("<rect") == page.n_words


class TestConvertCommand:
    def test_convert_html_via_cli(self, tmp_path):
        rec = {
            "html": {
                "structure": {"tokens": ["<tr>", "<td>", "</td>", "<td>", "</td>", "</tr>"]},
                "cells": [
                    {"tokens": ["a"], "bbox": [0, 0, 40, 20]},
                    {"tokens": ["b"], "bbox": [50, 0, 90, 20]},
                ],
            }
        }
        src = tmp_path / "src"
        src.mkdir()
        (src / "r1.json").write_text(json.dumps(rec))
        out = tmp_path / "out"
        rc = main(["convert", "--format", "html-cells", "--input", str(src),
                   "--output", str(out)])
        assert rc == 0
        assert (out / "r1.json").exists()
        assert (out / "conversion_summary.json").exists()


def test_corrupt_checkpoint_is_runtime_failure(tmp_path):
    data = _gen(tmp_path, n=2)
    bad = tmp_path / "ckpt.bin"
    bad.write_bytes(b"\x00" * 64)
    rc = main(["predict", "--data", str(data), "--checkpoint", str(bad),
               "--out", str(tmp_path / "p")])
    assert rc == 2


def test_checkpoint_config_mismatch_refused(tmp_path):
    data = _gen(tmp_path, n=2)
    config = ModelConfig(vocab_size=5, num_layers=1, d_model=16, dff=32,
                         num_heads=2, c_out=8, max_seq_len=16)
    params = init_params(config, seed=0)
    ckpt = tmp_path / "ckpt.bin"
    save_train_checkpoint(
        ckpt, params, AdamState.for_params(params),
        config, TrainConfig(seq_len=16), step=0, epoch=0, phase=1,
    )
    from clustertab.trainer import load_model_params

    with pytest.raises(ValueError, match="disagrees"):
        load_model_params(ckpt, ModelConfig(vocab_size=5, num_layers=2, d_model=16,
                                            dff=32, num_heads=2, c_out=8, max_seq_len=16))
