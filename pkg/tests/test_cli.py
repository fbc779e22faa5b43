import json

import numpy as np
import pytest

from tokenmrf import cli, mgtf, verify
from tokenmrf.types import GridGeometry, TokenGrid, VocabSpec

TINY = {
    "corpus": {"kind": "stripes", "height": 4, "width": 4, "vocab": 5, "count": 24, "band": 1, "condition": 1},
    "teacher": {"channels": 16, "layers": 2, "condition_count": 2, "steps": 20, "batch_size": 8},
    "mrf": {"pretrain_steps": 15, "distill_steps": 10, "distill_traces": 6, "batch_size": 4, "learning_rate": 0.01},
    "schedule": {"total_steps": 4, "cut_step": 2, "temperature": 1.0},
    "bench": {"decodes": 2, "repetitions": 3},
    "seed": 3,
}


def write_config(tmp_path, **changes):
    cfg = json.loads(json.dumps(TINY))
    cfg["output_dir"] = str(tmp_path / "out")
    cfg.update(changes)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    conf = write_config(tmp)
    for cmd in ("gen-corpus", "train-teacher", "pretrain-mrf", "distill-mrf"):
        assert run(cmd, "--config", conf) == 0, cmd
    return conf, tmp / "out"


class TestConfig:
    def test_unknown_key_reported_with_path(self, tmp_path, capsys):
        conf = write_config(tmp_path, teacher={"channels": 8, "colour": 1})
        assert run("gen-corpus", "--config", conf) == 2
        assert "teacher.colour" in capsys.readouterr().err

    def test_missing_key_reported_with_path(self, tmp_path, capsys):
        conf = write_config(tmp_path, corpus={"kind": "blobs", "height": 4, "width": 4, "count": 2})
        assert run("gen-corpus", "--config", conf) == 2
        assert "corpus.vocab" in capsys.readouterr().err

    def test_flags_override(self, tmp_path):
        cfg = cli.load_config(write_config(tmp_path), {"seed": 11, "output_dir": "elsewhere"})
        assert cfg.seed == 11 and cfg.output_dir == "elsewhere"

    def test_unreadable(self, tmp_path):
        assert run("gen-corpus", "--config", str(tmp_path / "nope.json")) == 2

    def test_bad_log_level(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MARKOVGEN_LOG", "chatty")
        assert run("gen-corpus", "--config", write_config(tmp_path)) == 2


class TestPipeline:
    def test_artifacts_embed_config(self, pipeline):
        _, out = pipeline
        for name in ("corpus.mgtf", "teacher.mgtf", "mrf_pretrained.mgtf", "mrf_distilled.mgtf"):
            _, meta = mgtf.read(out / name)
            assert meta["config"]["seed"] == 3 and meta["format_version"] == 1
        side = json.loads((out / "corpus.mgtf.json").read_text())
        assert side["spec"]["config"]["corpus"]["kind"] == "stripes"
        assert (out / "metrics_pretrain.tsv").read_text().count("\n") == 15

    def test_rerun_reproduces(self, pipeline):
        conf, out = pipeline
        before = {n: (out / n).read_bytes() for n in ("corpus.mgtf", "mrf_pretrained.mgtf", "teacher.mgtf")}
        for cmd in ("gen-corpus", "pretrain-mrf", "train-teacher"):
            assert run(cmd, "--config", conf) == 0
        for n, b in before.items():
            assert (out / n).read_bytes() == b, n

    def test_early_exit_at_total_matches_full(self, pipeline):
        conf, out = pipeline
        assert run("decode", "--config", conf, "--variant", "full", "--count", "3") == 0
        assert run("decode", "--config", conf, "--variant", "early-exit", "--k", "4", "--count", "3") == 0
        assert (out / "decode_full_k2.mgtf").read_bytes() == (out / "decode_early-exit_k4.mgtf").read_bytes()
        side = json.loads((out / "decode_early-exit_k4.mgtf.json").read_text())
        assert side["variant"] == "early-exit" and side["k"] == 4

    def test_markovgen_decode_and_render(self, pipeline):
        conf, out = pipeline
        assert run("decode", "--config", conf, "--variant", "markovgen", "--png", "--threads", "1") == 0
        tensors, _ = mgtf.read(out / "decode_markovgen_k2.mgtf")
        assert tensors["labels"].shape == (1, 4, 4)
        ppm = (out / "decode_markovgen_k2_000.ppm").read_bytes()
        assert ppm.startswith(b"P6") and (out / "decode_markovgen_k2_000.png").exists()

    def test_bench(self, pipeline, capsys):
        conf, out = pipeline
        assert run("bench", "--config", conf) == 0
        doc = json.loads((out / "bench.json").read_text())
        assert doc["variants"]["full"]["disagreement_vs_full"] == 0.0
        assert doc["run_config"]["bench"]["decodes"] == 2
        assert "markovgen" in capsys.readouterr().out

    def test_missing_input(self, tmp_path):
        conf = write_config(tmp_path)
        assert run("train-teacher", "--config", conf) == 2

    def test_k_out_of_range(self, pipeline):
        conf, _ = pipeline
        assert run("decode", "--config", conf, "--variant", "full", "--k", "9") == 2


def test_verify_exit_codes(tmp_path, monkeypatch, capsys):
    ok = verify.CheckResult("fine", True, "ok")
    bad = verify.CheckResult("broken", False, "no")
    monkeypatch.setattr(verify, "CHECKS", {"X1": lambda seed: ok})
    assert run("verify", "--config", write_config(tmp_path)) == 0
    monkeypatch.setattr(verify, "CHECKS", {"X1": lambda seed: ok, "X2": lambda seed: bad})
    assert run("verify", "--config", write_config(tmp_path)) == 1
    out = capsys.readouterr().out
    assert "PASS  X1 fine" in out and "FAIL  X2 broken" in out


def test_palette_distinct_and_seeded():
    p = cli.palette(64, seed=0)
    assert p.shape == (64, 3) and len({tuple(c) for c in p}) == 64
    assert np.array_equal(p, cli.palette(64, seed=0))
    assert not np.array_equal(p, cli.palette(64, seed=1))


def test_render_scale(tmp_path):
    from PIL import Image

    grid = TokenGrid(GridGeometry(2, 3), VocabSpec(4), [0, 1, 2, 3, 0, 1])
    (ppm,) = cli.render(grid, tmp_path / "g", scale=5)
    img = np.asarray(Image.open(ppm))
    assert img.shape == (10, 15, 3)
    np.testing.assert_array_equal(img[0, 0], img[5, 5])
    assert not np.array_equal(img[0, 0], img[5, 10])
