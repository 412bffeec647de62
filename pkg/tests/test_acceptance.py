"""Acceptance criteria 1-10, each printed as one PASS/FAIL line.

Criteria 6 and 9 are slow (several minutes each); deselect them with
``-m "not slow"`` for a quick pass.
"""
import importlib.util
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from longvit import cli
from longvit.bench import run_bench
from longvit.encoder import EncoderConfig
from longvit.image import ImageConfig, PosEmbedTable, interpolate_pos_embed, token_grid
from longvit.synthetic import make_corner_match_dataset, make_lvti_stub
from longvit.tasks import FinetuneConfig, _Dataset, initial_weights, train_fold
from longvit.tensor import Tensor
from longvit.verify import attention_suite, distributed_suite, gradient_suite, metrics_suite

SCRIPTS = Path(__file__).resolve().parents[1] / "scripts"


def _load_script(name):
    spec = importlib.util.spec_from_file_location(name, SCRIPTS / f"{name}.py")
    mod = importlib.util.module_from_spec(spec)
    sys.modules[name] = mod  # dataclasses look the module up while building the class
    spec.loader.exec_module(mod)
    return mod


def test_criterion_1_token_counts(tmp_path, criterion, capsys):
    expected = {32768: 1_048_576, 16384: 262_144, 1024: 1_024}
    got = {}
    t0 = time.perf_counter()
    for side in expected:
        path = make_lvti_stub(tmp_path / f"{side}.lvti", side)
        rows, cols = token_grid(path, ImageConfig(patch_size=32))
        got[side] = rows * cols
    code = cli.main(["encode", str(tmp_path / "32768.lvti"), "--plan-only"])
    cli_ok = code == 0 and "N=1048576 " in capsys.readouterr().out
    secs = time.perf_counter() - t0
    ok = got == expected and cli_ok
    detail = ", ".join(f"{s}^2 -> {got[s]}" for s in expected) + f"; CLI plan agrees={cli_ok}; {secs:.1f}s"
    assert criterion(1, "token counts", ok, detail)


def test_criterion_2_oracle_equivalence(criterion):
    t0 = time.perf_counter()
    checks = attention_suite(ns=(16, 64, 256, 1024), cases=50)[:-1]
    secs = time.perf_counter() - t0
    worst = max(c.deviation for c in checks)
    ok = all(c.passed for c in checks) and secs <= 120
    detail = f"max |sparse - oracle| {worst:.2e} over 4 x 50 cases (tol 1e-8), {secs:.0f}s"
    assert criterion(2, "dilated attention vs masked-dense oracle", ok, detail)


def test_criterion_3_degenerate_dense(criterion):
    check = attention_suite(ns=(), cases=0)[-1]
    detail = f"max |{{(N,1)}} - plain MHA| {check.deviation:.2e} at N in 1, 7, 64, 256 (tol 1e-10)"
    assert criterion(3, "degenerate schedule equals plain MHA", check.passed, detail)


def test_criterion_4_distributed(criterion):
    t0 = time.perf_counter()
    checks = distributed_suite(ns=(64, 256, 1024), workers=(1, 2, 4, 8))
    secs = time.perf_counter() - t0
    worst = max(c.deviation for c in checks)
    ok = all(c.passed for c in checks) and secs <= 120
    detail = f"max |distributed - single| {worst:.2e} over 12 (N, W) cases, logs repeatable, {secs:.0f}s"
    assert criterion(4, "sequence-parallel equivalence", ok, detail)


def test_criterion_5_gradients(criterion):
    checks = gradient_suite()
    worst = max(checks, key=lambda c: c.deviation)
    ok = all(c.passed for c in checks) and any("tiny encoder" in c.name for c in checks)
    detail = f"{len(checks)} checks, worst relative error {worst.deviation:.2e} ({worst.name}), tol 1e-4"
    assert criterion(5, "finite-difference gradients", ok, detail)


@pytest.mark.slow
def test_criterion_6_linear_scaling(criterion):
    ns = [1024 * 2**i for i in range(7)]
    t0 = time.perf_counter()
    rows = run_bench(ns, policy="extend", d=32, heads=4, workers=4, repeats=15)
    secs = time.perf_counter() - t0
    flop_x = [b.flops / a.flops for a, b in zip(rows, rows[1:])]
    time_x = [r.time_ratio for r in rows[1:]]
    dense_x = [r.dense_time_ratio for r in rows[1:] if r.dense_time_ratio is not None]
    ok = (max(flop_x) <= 2.2 and max(time_x) <= 2.2 and len(dense_x) == 2
          and all(3.5 <= x <= 4.5 for x in dense_x) and secs <= 600)
    detail = (f"dilated time x{min(time_x):.2f}-{max(time_x):.2f}, FLOPs x{min(flop_x):.2f}-{max(flop_x):.2f} "
              f"per doubling 1k->64k; dense time x{', x'.join(f'{x:.2f}' for x in dense_x)} to 4k; {secs:.0f}s")
    assert criterion(6, "linear scaling", ok, detail)


def test_criterion_7_metric_oracles(criterion):
    checks = metrics_suite(instances=100, max_n=100)
    ok = all(c.passed for c in checks)
    detail = "; ".join(f"{c.name.split()[0]} max diff {c.deviation:g}" for c in checks) + " (exact)"
    assert criterion(7, "metric oracles", ok, detail)


def test_criterion_8_pos_embed(criterion):
    rng = np.random.default_rng(0)
    table = Tensor(rng.normal(size=(32 * 32, 384)))
    same = interpolate_pos_embed(PosEmbedTable(table, (32, 32)), (32, 32)).data
    identity = np.array_equal(same, table.data)
    pair = Tensor(rng.normal(size=(2, 384)))
    mid = interpolate_pos_embed(PosEmbedTable(pair, (1, 2)), (1, 3)).data[1]
    dev = float(np.abs(mid - (pair.data[0] + pair.data[1]) / 2).max())
    ok = identity and dev == 0.0
    assert criterion(8, "position interpolation", ok, f"identity bitwise={identity}, midpoint max diff {dev:g}")


@pytest.mark.slow
def test_criterion_9_long_range(tmp_path, criterion):
    toy = _load_script("long_range_toy")
    cfg = toy.ToyConfig()
    t0 = time.perf_counter()
    results = toy.run(cfg, tmp_path, log=lambda m: None)
    secs = time.perf_counter() - t0
    full, short = results["full"][0], results["short"][0]
    ok = full.mean >= 0.95 and short.mean < full.mean and secs <= 900
    detail = (f"full schedule AUC {full.summary().split(' ', 1)[1]}, short-only {short.summary().split(' ', 1)[1]} "
              f"({cfg.folds}-fold, {cfg.epochs} epochs), {secs:.0f}s")
    assert criterion(9, "long-range toy task", ok, detail)


def test_criterion_10_accumulation(tmp_path, criterion):
    recs = make_corner_match_dataset(tmp_path, 16, size=128, marker_patches=1, seed=3)
    ds = _Dataset(recs, ImageConfig())
    idx = np.arange(len(recs))
    flats = []
    for batch, accum in ((8, 1), (2, 4)):
        cfg = FinetuneConfig(task="subtype", epochs=1, batch_size=batch, accum_steps=accum, lr=1e-3,
                             shuffle=False, encoder=EncoderConfig.tiny(drop_path=0.0))
        w = initial_weights(cfg, 2)
        train_fold(ds, idx, w, cfg, None, np.random.default_rng(0))
        flats.append(w.flat())
    moved = float(np.abs(flats[0] - initial_weights(cfg, 2).flat()).max())
    dev = float(np.abs(flats[0] - flats[1]).max())
    ok = dev <= 1e-10 and moved > 0
    detail = f"max |batch 8 - batch 2 x accum 4| {dev:.2e} after one epoch (tol 1e-10; update size {moved:.1e})"
    assert criterion(10, "gradient accumulation", ok, detail)
