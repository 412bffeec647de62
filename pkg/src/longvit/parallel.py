"""Deterministic simulation of sequence-parallel dilated attention.

The token sequence is split into contiguous ranges, one per worker.  Query
rows never move.  For every (segment, ratio) pair, a segment that straddles
several workers makes each participant receive the offset-selected key and
value rows held by the others; segments inside one worker need nothing.
Workers run in a fixed round-robin order and every transfer is appended to
a :class:`MessageLog`, so the whole run is a pure function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionWeights, DilationSchedule, _attend, _Block, _mix_pairs
from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass(frozen=True)
class WorkerPartition:
    n: int
    ranges: tuple[tuple[int, int], ...]

    @property
    def workers(self) -> int:
        return len(self.ranges)

    def sizes(self) -> list[int]:
        return [b - a for a, b in self.ranges]

    def owners(self, start: int, stop: int) -> list[int]:
        """Workers holding at least one token of ``[start, stop)``."""
        return [j for j, (a, b) in enumerate(self.ranges) if a < stop and start < b]


def partition(n: int, workers: int) -> WorkerPartition:
    """Contiguous ranges; the first ``n % workers`` ranges get one extra token."""
    if workers < 1 or workers > n:
        raise ConfigError(f"need 1 <= workers <= N, got workers={workers}, N={n}")
    base, extra = divmod(n, workers)
    ranges, start = [], 0
    for j in range(workers):
        stop = start + base + (1 if j < extra else 0)
        ranges.append((start, stop))
        start = stop
    return WorkerPartition(n, tuple(ranges))


def _selected(start: int, stop: int, seg_start: int, r: int, s: int) -> np.ndarray:
    first = start + (s - (start - seg_start)) % r
    return np.arange(first, stop, r)


@dataclass(frozen=True)
class Fetch:
    """Key/value rows one worker pulls from ``remote`` for one segment and offset."""

    remote: int
    seg_start: int
    start: int
    stop: int
    ratio: int
    offset: int
    heads: tuple[int, ...]

    @property
    def rows(self) -> np.ndarray:
        return _selected(self.start, self.stop, self.seg_start, self.ratio, self.offset)


def _offset_groups(heads: int, r: int) -> list[tuple[int, tuple[int, ...]]]:
    groups: dict[int, list[int]] = {}
    for k in range(heads):
        groups.setdefault(k % r, []).append(k)
    return [(s, tuple(groups[s])) for s in sorted(groups)]


def gather_plan(part: WorkerPartition, schedule: DilationSchedule, heads: int) -> dict[tuple[int, int], list[Fetch]]:
    """Remote rows each worker needs, keyed by ``(worker, pair_index)``.

    A worker only fetches for an offset when it owns at least one query row
    selected at that offset inside the segment.
    """
    plan: dict[tuple[int, int], list[Fetch]] = {}
    n = part.n
    for i, (w, r) in enumerate(schedule.pairs):
        groups = _offset_groups(heads, r)
        for dst in range(part.workers):
            fetches: list[Fetch] = []
            a, b = part.ranges[dst]
            for seg_start in range((a // w) * w, b, w):
                seg_stop = min(seg_start + w, n)
                owners = part.owners(seg_start, seg_stop)
                if len(owners) < 2:
                    continue
                for s, hs in groups:
                    if _selected(max(a, seg_start), min(b, seg_stop), seg_start, r, s).size == 0:
                        continue
                    for src in owners:
                        if src == dst:
                            continue
                        sa, sb = part.ranges[src]
                        f = Fetch(src, seg_start, max(sa, seg_start), min(sb, seg_stop), r, s, hs)
                        if f.rows.size:
                            fetches.append(f)
            plan[(dst, i)] = fetches
    return plan


@dataclass(frozen=True)
class Message:
    step: int
    from_worker: int
    to_worker: int
    pair_index: int
    payload_elements: int


@dataclass
class MessageLog:
    records: list[Message] = field(default_factory=list)

    def append(self, msg: Message) -> None:
        if msg.payload_elements <= 0:
            raise ContractError("messages must carry a positive payload")
        self.records.append(msg)

    def total(self) -> int:
        return sum(m.payload_elements for m in self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        return isinstance(other, MessageLog) and self.records == other.records


def _message(f: Fetch, pair_index: int, dst: int, head_dim: int) -> Message:
    return Message(pair_index, f.remote, dst, pair_index, f.rows.size * len(f.heads) * head_dim * 2)


def plan_log(n: int, workers: int, schedule: DilationSchedule, heads: int, head_dim: int) -> MessageLog:
    """The message log a forward pass would produce, without computing anything."""
    plan = gather_plan(partition(n, workers), schedule, heads)
    log = MessageLog()
    for i in range(len(schedule.pairs)):
        for dst in range(workers):
            for f in plan[(dst, i)]:
                log.append(_message(f, i, dst, head_dim))
    return log


def distributed_forward(x, weights: AttentionWeights, schedule: DilationSchedule,
                        workers: int) -> tuple[np.ndarray, MessageLog]:
    """Forward-only sequence-parallel multi-head dilated attention.

    Matches :func:`multihead_dilated_attention` on one node: per position the
    pair contributions are accumulated in the same order (pair-major, then
    ascending offset), so only kernel-level rounding can differ.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    n, d = x.shape
    h = weights.heads
    dh = d // h
    part = partition(n, workers)
    plan = gather_plan(part, schedule, h)
    log = MessageLog()

    def project(rows, w, b):
        return (rows @ w.data + b.data).reshape(-1, h, dh).transpose(1, 0, 2)

    local = []
    for a, b in part.ranges:
        xs = x[a:b]
        local.append(tuple(project(xs, wt, bs) for wt, bs in
                           ((weights.wq, weights.bq), (weights.wk, weights.bk), (weights.wv, weights.bv))))

    blocks: list[list[list[_Block]]] = [[[] for _ in schedule.pairs] for _ in range(workers)]
    for i, (w, r) in enumerate(schedule.pairs):
        for dst in range(workers):
            a, b = part.ranges[dst]
            q_loc, k_loc, v_loc = local[dst]
            fetched: dict[tuple[int, int, int], list[Fetch]] = {}
            for f in plan[(dst, i)]:
                fetched.setdefault((f.seg_start, f.offset, f.remote), []).append(f)
                log.append(_message(f, i, dst, dh))
            for seg_start in range((a // w) * w, b, w):
                seg_stop = min(seg_start + w, n)
                owners = part.owners(seg_start, seg_stop)
                for s, hs in _offset_groups(h, r):
                    heads = np.array(hs)
                    q_rows = _selected(max(a, seg_start), min(b, seg_stop), seg_start, r, s)
                    if q_rows.size == 0:
                        continue
                    k_parts, v_parts = [], []
                    for src in owners:
                        sa, sb = part.ranges[src]
                        rows = _selected(max(sa, seg_start), min(sb, seg_stop), seg_start, r, s)
                        if rows.size == 0:
                            continue
                        if src == dst:
                            k_parts.append(k_loc[heads][:, rows - sa])
                            v_parts.append(v_loc[heads][:, rows - sa])
                            continue
                        got = fetched.get((seg_start, s, src))
                        if not got or not np.array_equal(got[0].rows, rows):
                            raise ContractError(f"worker {dst} has no plan entry for rows of worker {src} "
                                                f"(pair {i}, segment {seg_start}, offset {s})")
                        _, k_src, v_src = local[src]
                        k_parts.append(k_src[heads][:, rows - sa])
                        v_parts.append(v_src[heads][:, rows - sa])
                    ks = np.concatenate(k_parts, axis=1)
                    vs = np.concatenate(v_parts, axis=1)
                    expected = _selected(seg_start, seg_stop, seg_start, r, s).size
                    if ks.shape[1] != expected:
                        raise ContractError("gathered key count disagrees with the segment size")
                    qs = q_loc[heads][:, q_rows - a]
                    o, lse, _ = _attend(qs[:, None], ks[:, None], vs[:, None])
                    blocks[dst][i].append(_Block(heads, (q_rows - a)[None, :], o, lse))

    outs = []
    for dst, (a, b) in enumerate(part.ranges):
        mix = _mix_pairs(blocks[dst], (h, b - a, dh))
        merged = mix.out.transpose(1, 0, 2).reshape(b - a, d)
        outs.append(merged @ weights.wo.data + weights.bo.data)
    return np.concatenate(outs, axis=0), log


def closed_form_volume(n: int, workers: int, schedule: DilationSchedule, heads: int, head_dim: int) -> int:
    """Expected traffic when every participant of a straddling segment needs every offset.

    Each of the ``g`` workers spanned by a segment receives the other
    workers' selected rows: ``(w / r) * d_h * 2 * (g - 1)`` elements per
    head per segment.
    """
    part = partition(n, workers)
    total = 0
    for w, r in schedule.pairs:
        for seg_start in range(0, n, w):
            g = len(part.owners(seg_start, min(seg_start + w, n)))
            if g > 1:
                total += (min(w, n - seg_start) // r) * head_dim * 2 * (g - 1) * heads
    return total


@dataclass
class CommReport:
    workers: int
    n: int
    hidden: int
    total_elements: int
    per_pair: dict[tuple[int, int], int]
    dense_baseline: int

    def to_table(self) -> str:
        lines = [f"{'segment':>10} {'ratio':>6} {'elements':>14}"]
        for (w, r), v in self.per_pair.items():
            lines.append(f"{w:>10} {r:>6} {v:>14}")
        lines.append(f"{'total':>17} {self.total_elements:>14}")
        lines.append(f"{'dense':>17} {self.dense_baseline:>14}")
        return "\n".join(lines)

    def to_kv(self) -> str:
        items = [("workers", self.workers), ("tokens", self.n), ("total_elements", self.total_elements),
                 ("dense_baseline", self.dense_baseline)]
        items += [(f"pair_{w}_{r}", v) for (w, r), v in self.per_pair.items()]
        return "\n".join(f"{k}={v}" for k, v in items)


def comm_report(log: MessageLog, workers: int, n: int, schedule: DilationSchedule, hidden: int) -> CommReport:
    """Aggregate a log; the dense baseline ships every remote K,V row to every worker."""
    per_pair = {pair: 0 for pair in schedule.pairs}
    for m in log.records:
        per_pair[schedule.pairs[m.pair_index]] += m.payload_elements
    part = partition(n, workers)
    dense = sum((n - size) * hidden * 2 for size in part.sizes()) if workers > 1 else 0
    return CommReport(workers, n, hidden, log.total(), per_pair, dense)

