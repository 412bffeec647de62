import re

import numpy as np
import pytest

from longvit import cli
from longvit.checkpoint import load_checkpoint
from longvit.image import write_pnm
from longvit.synthetic import make_lvti_stub
from longvit.verify import Check


@pytest.fixture
def small_image(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "img.ppm"
    write_pnm(path, rng.integers(0, 256, size=(128, 96, 3), dtype=np.uint8))
    return path


def test_plan_reports_paper_schedule(tmp_path, capsys):
    path = make_lvti_stub(tmp_path / "s.lvti", 1024)
    assert cli.main(["encode", str(path), "--plan-only"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "N=1024 " in out
    assert "{64, 128, 256, 512, 1024}/{1, 2, 4, 8, 16}" in out


def test_plan_for_2048(tmp_path, capsys):
    path = make_lvti_stub(tmp_path / "s.lvti", 2048)
    assert cli.main(["encode", str(path), "--plan-only"]) == 0
    assert "N=4096 " in capsys.readouterr().out


def test_encode_is_bit_identical(small_image, tmp_path, capsys):
    outs = []
    for name in ("a.lvt", "b.lvt"):
        code = cli.main(["encode", str(small_image), "--preset", "tiny", "--seed", "3",
                         "--out", str(tmp_path / name)])
        assert code == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    assert load_checkpoint(tmp_path / "a.lvt")["pooled"].shape == (32,)
    assert "tokens: N=12 (grid 4x3, patch 32)" in capsys.readouterr().out


def test_encode_resolution_must_fit_patches(small_image, capsys):
    assert cli.main(["encode", str(small_image), "--resolution", "100"]) == cli.EXIT_USER
    assert "error:" in capsys.readouterr().err


def test_missing_file_is_user_error(tmp_path, capsys):
    assert cli.main(["encode", str(tmp_path / "nope.ppm")]) == cli.EXIT_USER
    assert "error:" in capsys.readouterr().err


def test_bad_flag_is_user_error(capsys):
    assert cli.main(["encode"]) == cli.EXIT_USER
    assert cli.main(["verify", "nonsense"]) == cli.EXIT_USER


def test_bad_schedule_is_user_error(small_image, capsys):
    assert cli.main(["encode", str(small_image), "--schedule", "4:2,8:4", "--plan-only"]) == cli.EXIT_USER


def test_threads_warning(small_image, capsys):
    assert cli.main(["encode", str(small_image), "--plan-only", "--threads", "2"]) == 0
    assert "warning:" in capsys.readouterr().err
    assert cli.main(["encode", str(small_image), "--plan-only", "--threads", "0"]) == cli.EXIT_USER


def test_config_file_and_flag_override(small_image, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults for this run\npreset = tiny\nschedule = 4:1,8:2\nplan-only = true\n")
    assert cli.main(["encode", str(small_image), "--config", str(cfg)]) == 0
    assert "schedule: {4, 8}/{1, 2}" in capsys.readouterr().out
    assert cli.main(["encode", str(small_image), "--config", str(cfg), "--schedule", "12:1"]) == 0
    assert "schedule: {12}/{1}" in capsys.readouterr().out


def test_config_file_unknown_key(small_image, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("colour = red\n")
    assert cli.main(["encode", str(small_image), "--config", str(cfg)]) == cli.EXIT_USER


def test_verify_metrics_passes(tmp_path, capsys):
    assert cli.main(["verify", "metrics", "--out", str(tmp_path / "v.txt")]) == 0
    text = (tmp_path / "v.txt").read_text()
    assert "[FAIL]" not in text and "checks passed" in text


def test_verify_failure_exit_code(monkeypatch, capsys):
    monkeypatch.setitem(cli.SUITES, "metrics", lambda seed=0: [Check("broken", False, 1.0, "")])
    assert cli.main(["verify", "metrics"]) == cli.EXIT_VERIFY
    assert "[FAIL] broken" in capsys.readouterr().out


def test_bench_refuses_large_dense(capsys):
    assert cli.main(["bench", "--dense-max", "8192"]) == cli.EXIT_USER


def test_bench_small_run(tmp_path, capsys):
    code = cli.main(["bench", "--n", "64,128", "--repeats", "2", "--kv", "--out", str(tmp_path / "b.txt")])
    assert code == 0
    text = (tmp_path / "b.txt").read_text()
    assert re.search(r"n=128 flops=\d+ seconds=", text)
    assert "dense_baseline=" in text


def test_finetune_separable_manifest(tmp_path, capsys):
    rng = np.random.default_rng(1)
    lines = []
    for i in range(20):
        label = i % 2
        px = np.clip((190 if label else 60) + rng.integers(-20, 21, size=(64, 64, 3)), 0, 255)
        write_pnm(tmp_path / f"{i}.ppm", px.astype(np.uint8))
        lines.append(f"s{i},{i}.ppm,{label}")
    (tmp_path / "m.csv").write_text("id,image,label\n" + "\n".join(lines) + "\n")
    code = cli.main(["finetune", str(tmp_path / "m.csv"), "--preset", "tiny", "--folds", "2", "--lr", "1e-3",
                     "--batch-size", "4", "--out", str(tmp_path / "r.txt")])
    assert code == 0
    mean = float(re.search(r"mean ± std: ([0-9.]+)", (tmp_path / "r.txt").read_text()).group(1))
    assert mean >= 0.99


def test_finetune_bad_manifest(tmp_path, capsys):
    (tmp_path / "m.csv").write_text("a,x.ppm\n")
    assert cli.main(["finetune", str(tmp_path / "m.csv")]) == cli.EXIT_USER
    assert "m.csv:1:" in capsys.readouterr().err
