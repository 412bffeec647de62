"""Forward-time and FLOP scaling of dilated attention, with the dense baseline.

Prints the measured table for one schedule policy, then a FLOP-only
comparison of all policies at the full model width (d=384, 16 heads), which is
where the fixed-ratio extension stops being linear.

    python scripts/bench_scaling.py --out results/bench.txt
    python scripts/bench_scaling.py --n 1024,2048,4096 --repeats 5
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from longvit.attention import SCHEDULE_POLICIES, flops_estimate, schedule_for_tokens
from longvit.bench import DENSE_CAP, format_bench, run_bench


def flop_table(ns, d=384, heads=16) -> str:
    lines = [f"{'N':>8} " + " ".join(f"{p:>20}" for p in SCHEDULE_POLICIES)]
    prev = None
    for n in ns:
        cur = [flops_estimate(n, schedule_for_tokens(n, p), d, heads) for p in SCHEDULE_POLICIES]
        cells = []
        for i, f in enumerate(cur):
            growth = f" (x{f / prev[i]:.2f})" if prev else ""
            cells.append(f"{f:.3e}{growth}")
        lines.append(f"{n:>8} " + " ".join(f"{c:>20}" for c in cells))
        prev = cur
    return "\n".join(lines)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", default="1024,2048,4096,8192,16384,32768,65536")
    p.add_argument("--policy", choices=SCHEDULE_POLICIES, default="extend")
    p.add_argument("--repeats", type=int, default=15, help="interleaved timing rounds")
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dense-max", type=int, default=DENSE_CAP)
    p.add_argument("--out", type=Path)
    args = p.parse_args(argv)
    ns = [int(v) for v in args.n.split(",")]

    t0 = time.perf_counter()
    rows = run_bench(ns, policy=args.policy, d=args.hidden, heads=args.heads, repeats=args.repeats,
                     dense_max=args.dense_max, progress=lambda m: print(m, file=sys.stderr))
    text = (f"policy {args.policy}, d={args.hidden}, {args.heads} heads, {args.repeats} rounds "
            f"({time.perf_counter() - t0:.0f}s)\n"
            "time ratios are medians of per-round neighbour ratios\n\n"
            + format_bench(rows)
            + "\n\nFLOPs at d=384, 16 heads (growth per doubling in brackets)\n"
            + flop_table(ns))
    print(text)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
