import json
from pathlib import Path

import numpy as np
import pytest

from convcap.cli import main
from convcap.image import load_ppm


def run_config(tmp, **overrides):
    cfg = {
        "model": {"decoder": "conv", "num_layers": 1, "emb_dim": 16, "hidden": 16,
                  "kernel": 5, "feature_dim": 16, "regions": 16, "max_len": 22},
        "train": {"batch_size": 10, "epochs": 2, "learning_rate": 3e-3, "seed": 0},
        "data": {"captions": str(tmp / "corpus" / "captions.jsonl"),
                 "features": str(tmp / "features.icf"),
                 "vocab": str(tmp / "vocab.json")},
        "inference": {"beam_width": 3},
    }
    for section, vals in overrides.items():
        cfg.setdefault(section, {}).update(vals)
    path = tmp / "run.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> vocab -> featurize once for the whole module."""
    tmp = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(tmp / "corpus"), "--count", "24", "--seed", "0"]) == 0
    assert main(["vocab", "--captions", str(tmp / "corpus" / "captions.jsonl"),
                 "--out", str(tmp / "vocab.json")]) == 0
    assert main(["featurize", "--images", str(tmp / "corpus" / "images"),
                 "--out", str(tmp / "features.icf"), "--dim", "16", "--seed", "0"]) == 0
    return tmp


class TestPipeline:
    def test_end_to_end(self, pipeline):
        tmp = pipeline
        cfg = run_config(tmp)
        assert main(["train", "--config", str(cfg), "--out", str(tmp / "run")]) == 0
        assert (tmp / "run" / "final.ckpt").exists()
        assert (tmp / "run" / "train_log.jsonl").exists()
        assert (tmp / "run" / "loss_curve.png").exists()
        assert (tmp / "run" / "config.json").exists()

        assert main(["caption", "--checkpoint", str(tmp / "run" / "final.ckpt"),
                     "--features", str(tmp / "features.icf"),
                     "--vocab", str(tmp / "vocab.json"),
                     "--captions", str(tmp / "corpus" / "captions.jsonl"),
                     "--split", "test", "--out", str(tmp / "cands.jsonl")]) == 0
        lines = [json.loads(l) for l in (tmp / "cands.jsonl").read_text().splitlines()]
        assert lines and all(set(r) == {"id", "rank", "tokens", "logprob"} for r in lines)

        assert main(["eval", "--candidates", str(tmp / "cands.jsonl"),
                     "--captions", str(tmp / "corpus" / "captions.jsonl"),
                     "--split", "test", "--out", str(tmp / "eval")]) == 0
        report = json.loads((tmp / "eval" / "report.json").read_text())
        assert set(report) >= {"bleu1", "bleu4", "cider", "rouge_l", "meteor"}
        assert (tmp / "eval" / "metrics.png").exists()
        assert (tmp / "eval" / "report.csv").exists()
        table = (tmp / "eval" / "report.txt").read_text()
        assert "METEOR" in table and "n/a" in table

    def test_caption_from_untrained_checkpoint(self, pipeline):
        tmp = pipeline
        cfg = run_config(tmp, train={"epochs": 0})
        assert main(["train", "--config", str(cfg), "--out", str(tmp / "run0")]) == 0
        assert (tmp / "run0" / "train_log.jsonl").read_text() == ""
        assert main(["caption", "--checkpoint", str(tmp / "run0" / "final.ckpt"),
                     "--features", str(tmp / "features.icf"),
                     "--vocab", str(tmp / "vocab.json"),
                     "--out", str(tmp / "cands0.jsonl")]) == 0
        lines = [json.loads(l) for l in (tmp / "cands0.jsonl").read_text().splitlines()]
        assert len(lines) == 24  # no --captions: all featurized images
        for rec in lines:
            assert isinstance(rec["tokens"], list) and isinstance(rec["logprob"], float)

    def test_batch_size_defaults_recorded(self, pipeline):
        tmp = pipeline
        cfg = run_config(tmp, train={"epochs": 0, "batch_size": None})
        assert main(["train", "--config", str(cfg), "--out", str(tmp / "bs_conv")]) == 0
        resolved = json.loads((tmp / "bs_conv" / "config.json").read_text())["resolved"]
        assert resolved["batch_size"] == 10

        cfg = run_config(tmp, model={"decoder": "lstm"},
                         train={"epochs": 0, "batch_size": None})
        assert main(["train", "--config", str(cfg), "--out", str(tmp / "bs_lstm")]) == 0
        resolved = json.loads((tmp / "bs_lstm" / "config.json").read_text())["resolved"]
        assert resolved["batch_size"] == 32


class TestDeterminism:
    def test_synth_reruns_byte_identical(self, tmp_path):
        for sub in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / sub), "--count", "8",
                         "--seed", "5"]) == 0
        a = (tmp_path / "a" / "captions.jsonl").read_bytes()
        b = (tmp_path / "b" / "captions.jsonl").read_bytes()
        assert a == b
        for ppm in sorted((tmp_path / "a" / "images").iterdir()):
            other = tmp_path / "b" / "images" / ppm.name
            assert ppm.read_bytes() == other.read_bytes()

    def test_eval_outputs_byte_identical(self, pipeline, tmp_path):
        tmp = pipeline
        for sub in ("e1", "e2"):
            assert main(["eval", "--candidates", str(tmp / "cands.jsonl"),
                         "--captions", str(tmp / "corpus" / "captions.jsonl"),
                         "--split", "test", "--out", str(tmp_path / sub)]) == 0
        for name in ("report.txt", "report.csv", "report.json", "metrics.png"):
            assert (tmp_path / "e1" / name).read_bytes() == \
                (tmp_path / "e2" / name).read_bytes(), name


class TestExitCodes:
    def test_unknown_config_key_is_config_error(self, pipeline, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"model": {"decoder": "conv", "warp_speed": 9}}))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_section_is_config_error(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"model": {}, "extras": {}}))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_missing_captions_file_is_data_error(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model": {"decoder": "conv"},
                                   "data": {"captions": str(tmp_path / "nope.jsonl")}}))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3

    def test_bad_ppm_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.ppm"
        bad.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        assert main(["augment", "--image", str(bad), "--policy", "flip",
                     "--out", str(tmp_path / "s.ppm")]) == 3

    def test_bad_thread_env_is_config_error(self, pipeline, tmp_path, monkeypatch):
        tmp = pipeline
        monkeypatch.setenv("CONVCAP_THREADS", "zero")
        cfg = run_config(tmp)
        assert main(["ablate", "--grid", "layers", "--config", str(cfg),
                     "--out", str(tmp_path / "abl")]) == 2

    def test_vocab_mismatch_is_config_error(self, pipeline, tmp_path):
        tmp = pipeline
        bad_vocab = tmp_path / "tiny_vocab.json"
        bad_vocab.write_text(json.dumps({
            "tokens": ["<start>", "<end>", "<unk>", "<pad>", "a"], "counts": {"a": 9}}))
        assert main(["caption", "--checkpoint", str(tmp / "run" / "final.ckpt"),
                     "--features", str(tmp / "features.icf"),
                     "--vocab", str(bad_vocab),
                     "--out", str(tmp_path / "c.jsonl")]) == 2


class TestAugmentPreview:
    def test_none_policy_tiles_identical(self, pipeline, tmp_path):
        tmp = pipeline
        src = sorted((tmp / "corpus" / "images").iterdir())[0]
        out = tmp_path / "sheet.ppm"
        assert main(["augment", "--image", str(src), "--policy", "none",
                     "--samples", "4", "--seed", "0", "--out", str(out)]) == 0
        sheet = load_ppm(out)
        img = load_ppm(src)
        h, w = img.height, img.width
        tiles = [sheet.pixels[0:h, 0:w], sheet.pixels[0:h, w + 2:2 * w + 2],
                 sheet.pixels[h + 2:2 * h + 2, 0:w],
                 sheet.pixels[h + 2:2 * h + 2, w + 2:2 * w + 2]]
        for tile in tiles:
            np.testing.assert_array_equal(tile, img.pixels)

    def test_seeded_sheets_reproducible(self, pipeline, tmp_path):
        tmp = pipeline
        src = sorted((tmp / "corpus" / "images").iterdir())[0]
        outs = []
        for sub in ("s1.ppm", "s2.ppm"):
            out = tmp_path / sub
            assert main(["augment", "--image", str(src), "--policy", "rotate",
                         "--samples", "9", "--seed", "3", "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_perspective_tiles_differ_from_input(self, pipeline, tmp_path):
        tmp = pipeline
        src = sorted((tmp / "corpus" / "images").iterdir())[0]
        out = tmp_path / "persp.ppm"
        assert main(["augment", "--image", str(src), "--policy", "perspective",
                     "--samples", "9", "--seed", "1", "--out", str(out)]) == 0
        sheet = load_ppm(out)
        img = load_ppm(src)
        h, w = img.height, img.width
        diffs = 0
        for i in range(9):
            r, c = divmod(i, 3)
            tile = sheet.pixels[r * (h + 2):r * (h + 2) + h, c * (w + 2):c * (w + 2) + w]
            if not np.array_equal(tile, img.pixels):
                diffs += 1
        assert diffs >= 3  # half the draws warp, in expectation
