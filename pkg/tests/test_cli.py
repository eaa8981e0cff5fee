import csv
import io
import json

import numpy as np
import pytest

from hiergen.cli import CACHE_ENV, default_bundle_dir, run
from hiergen.data import make_pair, all_records
from hiergen.imageio import write_image


@pytest.fixture(scope="module")
def cli_bundle(tmp_path_factory):
    """A bundle built end to end through the command line at toy size."""
    d = tmp_path_factory.mktemp("bundle")
    b = ["--bundle", str(d), "--workers", "1"]
    assert run(["tokenize-build", "--n", "24", "--codebook-size", "32", "--clusters", "4", "--patches", "3000"] + b) == 0
    assert run(["train", "--n", "24", "--steps", "2"] + b) == 0
    for stage in ("direct", "iterative"):
        assert run(["finetune-sr", "--stage", stage, "--n", "24", "--steps", "2"] + b) == 0
    return d


@pytest.fixture
def low_png(tmp_path):
    p = tmp_path / "low.png"
    write_image(p, make_pair(all_records()[5], np.random.default_rng(0)).low)
    return p


def test_usage_errors_exit_one(capsys):
    assert run(["no-such-command"]) == 1
    assert run(["schedule-dump", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_help_exits_zero():
    assert run(["--help"]) == 0


def test_schedule_dump_compressed(capsys):
    assert run(["schedule-dump", "--hw", "60", "60", "--sigma", "6"]) == 0
    d = json.loads(capsys.readouterr().out)
    plan = np.array(d["plan"])
    assert d["iterations"] == 6 and plan.shape == (60, 60) and (plan == -1).sum() == 900


def test_schedule_dump_to_file_is_reproducible(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for p in (a, b):
        assert run(["schedule-dump", "--hw", "24", "24", "--pattern", "seeded_random", "--seed", "3",
                    "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_bench_attn_writes_csv(tmp_path):
    out = tmp_path / "bench.csv"
    assert run(["bench-attn", "--grid", "16", "--window", "5", "--reps", "1", "--head-dim", "8",
                "--workers", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert {r["variant"] for r in rows} == {"windowed", "dense"} and rows[0]["workers"] == "1"


def test_check_grad_reports_json(capsys):
    assert run(["check-grad", "--coords", "24"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["pass"] and d["n_coords"] >= 24


def test_missing_checkpoint_is_a_runtime_failure(tmp_path, capsys):
    assert run(["generate", "--text", "red circle", "--bundle", str(tmp_path)]) == 2
    assert "tokenizer" in capsys.readouterr().err


def test_missing_stage_is_named(cli_bundle, tmp_path, capsys):
    partial = tmp_path / "partial"
    partial.mkdir()
    for f in ("codebook.bin", "vocab.json", "coglm.ckpt"):
        (partial / f).write_bytes((cli_bundle / f).read_bytes())
    assert run(["generate", "--text", "red circle", "--bundle", str(partial)]) == 2
    assert "direct" in capsys.readouterr().err


def test_cache_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path))
    assert default_bundle_dir() == tmp_path / "bundle"


def test_generate_is_byte_identical(cli_bundle, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(["generate", "--text", "red circle above blue square", "--candidates", "3", "--keep", "1",
                    "--seed", "7", "--bundle", str(cli_bundle), "--workers", "1", "--out", str(out)]) == 0
        outs.append(out)
    for f in ("image_00.png", "manifest.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    man = json.loads((outs[0] / "manifest.json").read_text())
    assert man["seed"] == 7 and len(man["config_hash"]) == 16


def test_infill_and_superres(cli_bundle, low_png, tmp_path):
    b = ["--bundle", str(cli_bundle), "--workers", "1"]
    assert run(["infill", "--image", str(low_png), "--rect", "2", "2", "5", "6", "--text", "green square",
                "--out", str(tmp_path / "edit.png")] + b) == 0
    assert run(["superres", "--image", str(low_png), "--out", str(tmp_path / "hi.ppm")] + b) == 0
    assert (tmp_path / "hi.ppm").read_bytes()[:2] == b"P6"
    assert run(["superres", "--image", str(tmp_path / "hi.ppm"), "--out", str(tmp_path / "x.png")] + b) == 2
    assert run(["infill", "--image", str(low_png), "--rect", "2", "2", "2", "6", "--text", "green square",
                "--out", str(tmp_path / "e.png")] + b) == 2


def test_training_log_and_plot(cli_bundle, tmp_path):
    log, plot = tmp_path / "log.csv", tmp_path / "loss.png"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps": 2, "batch_size": 2, "warmup": 1}))
    assert run(["train", "--n", "12", "--config", str(cfg), "--log", str(log), "--plot", str(plot),
                "--bundle", str(tmp_path / "copy")]) == 2  # no tokenizer in that directory
    b = ["--bundle", str(cli_bundle)]
    assert run(["train", "--n", "12", "--config", str(cfg), "--log", str(log), "--plot", str(plot)] + b) == 0
    rows = list(csv.DictReader(log.open()))
    assert {"step", "loss", "lr", "n_text_to_image", "n_mask_and_caption"} <= set(rows[0])
    assert plot.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
