"""Scaling benchmark: dilated attention vs the dense oracle."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .attention import (AttentionWeights, DilationSchedule, dense_flops, flops_estimate,
                        multihead_dilated_attention, plain_mha, schedule_for_tokens)
from .errors import ConfigError
from .parallel import comm_report, plan_log
from .tensor import Tensor

DENSE_CAP = 4096  # beyond this the N x N oracle is refused
DENSE_CHUNK = 64  # query rows per dense score block


@dataclass
class BenchRow:
    n: int
    schedule: DilationSchedule
    flops: int
    seconds: float
    dense_flops: int
    dense_seconds: float | None
    comm_elements: int
    dense_comm_elements: int
    time_ratio: float | None = None  # paired estimate vs the previous row
    dense_time_ratio: float | None = None


def best_time(fn: Callable[[], object], repeats: int) -> float:
    """Minimum wall time over ``repeats`` calls."""
    return float(interleaved_samples([fn], repeats).min(axis=0)[0])


def interleaved_samples(fns: Sequence[Callable[[], object]], rounds: int, min_sample: float = 0.05) -> np.ndarray:
    """Per-call wall time of each function for every round, shape ``(rounds, len(fns))``.

    Functions are timed round-robin so that neighbours in one round see the
    same machine state.  A sample repeats its call until ``min_sample``
    seconds have elapsed and is divided by the call count.
    """
    inner = []
    for fn in fns:
        t0 = time.perf_counter()
        fn()
        once = time.perf_counter() - t0
        inner.append(max(1, int(np.ceil(min_sample / max(once, 1e-9)))))
    out = np.empty((rounds, len(fns)))
    for k in range(rounds):
        for i, fn in enumerate(fns):
            t0 = time.perf_counter()
            for _ in range(inner[i]):
                fn()
            out[k, i] = (time.perf_counter() - t0) / inner[i]
    return out


def paired_ratios(samples: np.ndarray) -> list[float]:
    """Median over rounds of ``t[i + 1] / t[i]``.

    On a shared host the machine speed drifts by tens of percent between
    seconds; a ratio of two adjacent samples from one round cancels most of
    that drift, where ratios of separately taken minima do not.
    """
    if samples.shape[1] < 2:
        return []
    return [float(x) for x in np.median(samples[:, 1:] / samples[:, :-1], axis=0)]


def run_bench(ns: Sequence[int], policy: str = "extend", d: int = 32, heads: int = 4, workers: int = 4,
              repeats: int = 5, dense_max: int = DENSE_CAP, seed: int = 0, threads: int = 1,
              progress: Callable[[str], None] | None = None) -> list[BenchRow]:
    """Time one attention layer per ``N``; the dense oracle only up to ``dense_max``."""
    if dense_max > DENSE_CAP:
        raise ConfigError(f"dense oracle is capped at N={DENSE_CAP}; got --dense-max {dense_max}")
    rng = np.random.default_rng(seed)
    weights = AttentionWeights.init(d, heads, rng, std=0.1)
    scheds, fns, dense_fns = [], [], []
    for n in ns:
        sched = schedule_for_tokens(n, policy)
        x = rng.normal(size=(n, d))
        xt = Tensor(x)
        scheds.append(sched)
        fns.append(lambda xt=xt, sched=sched: multihead_dilated_attention(xt, weights, sched, threads=threads))
        if n <= dense_max:
            dense_fns.append(lambda x=x: plain_mha(x, weights, chunk=DENSE_CHUNK))
    if progress:
        progress(f"timing {len(fns)} dilated and {len(dense_fns)} dense sizes, {repeats} rounds")
    samples = interleaved_samples(fns, repeats)
    dense_samples = interleaved_samples(dense_fns, repeats) if dense_fns else np.empty((repeats, 0))
    secs = np.median(samples, axis=0)
    dense_secs = np.median(dense_samples, axis=0)
    ratios = paired_ratios(samples)
    dense_ratios = paired_ratios(dense_samples)
    rows = []
    for i, (n, sched) in enumerate(zip(ns, scheds)):
        w_eff = min(workers, n)
        report = comm_report(plan_log(n, w_eff, sched, heads, d // heads), w_eff, n, sched, d)
        dense = i < len(dense_secs)
        rows.append(BenchRow(n, sched, flops_estimate(n, sched, d), float(secs[i]), dense_flops(n, d),
                             float(dense_secs[i]) if dense else None,
                             report.total_elements, report.dense_baseline,
                             ratios[i - 1] if i else None,
                             dense_ratios[i - 1] if dense and i else None))
    return rows


def doubling_ratios(values: Sequence[float]) -> list[float]:
    return [b / a for a, b in zip(values, values[1:])]


def format_bench(rows: Sequence[BenchRow]) -> str:
    head = (f"{'N':>8} {'FLOPs':>14} {'x':>6} {'time s':>9} {'x':>6} {'dense FLOPs':>15} "
            f"{'dense s':>9} {'x':>6} {'comm':>12} {'dense comm':>12}")
    lines = [head]
    prev = None
    for row in rows:
        fx = tx = dx = ""
        if prev is not None:
            fx = f"{row.flops / prev.flops:.2f}"
            tx = f"{row.time_ratio:.2f}"
            if row.dense_time_ratio is not None:
                dx = f"{row.dense_time_ratio:.2f}"
        dense_s = "-" if row.dense_seconds is None else f"{row.dense_seconds:.3f}"
        lines.append(f"{row.n:>8} {row.flops:>14} {fx:>6} {row.seconds:>9.3f} {tx:>6} {row.dense_flops:>15} "
                     f"{dense_s:>9} {dx:>6} {row.comm_elements:>12} {row.dense_comm_elements:>12}")
        prev = row
    return "\n".join(lines)
