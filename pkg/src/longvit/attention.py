"""Multi-head dilated attention.

A schedule is a list of ``(segment_length, dilation_ratio)`` pairs.  For each
pair the sequence is cut into segments of ``w`` tokens; inside a segment a
head with index ``k`` keeps the positions ``j`` with ``j % r == k % r`` and
runs dense bidirectional attention among them.  Every pair yields an output
and a log-normaliser (log of the softmax denominator) for the positions it
selected.  Per position the pair outputs are mixed with weights proportional
to their softmax denominators, rebased to a shared per-position maximum:

    alpha_i(t) = exp(lse_i(t) - M(t)) / sum_j exp(lse_j(t) - M(t))

A pair that did not select ``t`` contributes ``lse = -inf`` (weight zero).
The first pair always has ratio 1, so every position is covered.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor, _op, as_tensor, linear, matmul, reshape, scale, softmax_rows, transpose

# Pretraining schedule (1,024^2 input, 1,024 tokens).
PRETRAIN_PAIRS = ((64, 1), (128, 2), (256, 4), (512, 8), (1024, 16))

# Finetuning schedules keyed by token count (input resolution / 32)^2.
PAPER_SCHEDULES = {
    1024: PRETRAIN_PAIRS,
    16384: ((1024, 1), (2048, 2), (4096, 4), (8192, 8), (16384, 16)),
    65536: ((1024, 1), (4096, 2), (8192, 4), (16384, 8), (65536, 16)),
    262144: ((1024, 1), (4096, 2), (16384, 4), (65536, 8), (262144, 16)),
    1048576: ((1024, 1), (4096, 2), (32768, 4), (262144, 8), (1048576, 16)),
}

SCHEDULE_POLICIES = ("table", "extend", "extend-fixed-ratio")


@dataclass(frozen=True)
class DilationSchedule:
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        pairs = tuple((int(w), int(r)) for w, r in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        if not pairs:
            raise ConfigError("schedule needs at least one (segment, ratio) pair")
        for i, (w, r) in enumerate(pairs):
            if w < 1 or r < 1:
                raise ConfigError(f"pair {i}: segment and ratio must be positive, got ({w}, {r})")
            if r > w:
                raise ConfigError(f"pair {i}: ratio {r} exceeds segment {w}")
            if w % r:
                raise ConfigError(f"pair {i}: ratio {r} does not divide segment {w}")
            if i and (w <= pairs[i - 1][0] or r <= pairs[i - 1][1]):
                raise ConfigError("segments and ratios must both be strictly increasing")
        if pairs[0][1] != 1:
            raise ContractError("first pair must have ratio 1, otherwise some positions are never attended")

    @classmethod
    def from_lists(cls, segments: Sequence[int], ratios: Sequence[int]) -> "DilationSchedule":
        if len(segments) != len(ratios):
            raise ConfigError("segment and ratio lists differ in length")
        return cls(tuple(zip(segments, ratios)))

    @classmethod
    def parse(cls, text: str) -> "DilationSchedule":
        """Parse ``"64:1,128:2,256:4"``."""
        try:
            pairs = [tuple(int(v) for v in item.split(":")) for item in text.split(",") if item.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad schedule {text!r}; expected w:r,w:r,...") from exc
        if any(len(p) != 2 for p in pairs):
            raise ConfigError(f"bad schedule {text!r}; expected w:r,w:r,...")
        return cls(tuple(pairs))

    @property
    def segments(self) -> list[int]:
        return [w for w, _ in self.pairs]

    @property
    def ratios(self) -> list[int]:
        return [r for _, r in self.pairs]

    def truncate(self, n: int) -> "DilationSchedule":
        """Pairs with ``w <= n``, plus the next longer pair if none spans ``n``."""
        kept = [p for p in self.pairs if p[0] <= n]
        if not kept or kept[-1][0] < n:
            longer = [p for p in self.pairs if p[0] > n]
            if longer:
                kept.append(longer[0])
        return DilationSchedule(tuple(kept))

    def __str__(self) -> str:
        return "{" + ", ".join(map(str, self.segments)) + "}/{" + ", ".join(map(str, self.ratios)) + "}"


def schedule_for_tokens(n: int, policy: str = "table") -> DilationSchedule:
    """Schedule for a sequence of ``n`` tokens.

    ``table``: the tabulated finetuning schedule when ``n`` is one of the
    tabulated lengths, otherwise the ``extend`` rule.
    ``extend``: the pretraining schedule, truncated for short sequences and
    grown for long ones by repeatedly appending ``(2w, 2r)`` until the top
    segment spans the sequence.  Each appended pair keeps 64 tokens per
    sparse segment, so cost stays linear in ``n``.
    ``extend-fixed-ratio``: the pretraining schedule with its top segment
    stretched to ``n`` at ratio 16 (grows quadratically for large ``n``).
    """
    if policy not in SCHEDULE_POLICIES:
        raise ConfigError(f"unknown schedule policy {policy!r}; choose from {SCHEDULE_POLICIES}")
    base = DilationSchedule(PRETRAIN_PAIRS)
    if policy == "table" and n in PAPER_SCHEDULES:
        return DilationSchedule(PAPER_SCHEDULES[n])
    if n <= base.pairs[-1][0]:
        return base.truncate(n)
    if policy == "extend-fixed-ratio":
        return DilationSchedule(PRETRAIN_PAIRS[:-1] + ((n, PRETRAIN_PAIRS[-1][1]),))
    pairs = list(PRETRAIN_PAIRS)
    while pairs[-1][0] < n:
        w, r = pairs[-1]
        pairs.append((2 * w, 2 * r))
    return DilationSchedule(tuple(pairs))


def select_indices(seg_start: int, w: int, r: int, s: int, n: int) -> np.ndarray:
    """Positions of one sparsified segment, ascending."""
    if r == 1:
        s = 0
    length = min(w, n - seg_start)
    j = np.arange(max(length, 0))
    return seg_start + j[j % r == s]


def _segment_index_sets(n: int, w: int, r: int, s: int) -> list[np.ndarray]:
    """Index blocks for one pair and offset: full segments batched, then the tail."""
    blocks = []
    full = n // w
    if full:
        blocks.append(np.arange(full)[:, None] * w + s + r * np.arange(w // r)[None, :])
    start = full * w
    if start < n:
        tail = np.arange(start + s, n, r)
        if tail.size:
            blocks.append(tail[None, :])
    return blocks


# ---------------------------------------------------------------- dense kernel


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Batched softmax attention.  Returns (out, lse, probs)."""
    sc = 1.0 / math.sqrt(q.shape[-1])
    s = (q @ np.swapaxes(k, -1, -2)) * sc
    mx = s.max(axis=-1, keepdims=True)
    e = np.exp(s - mx)
    den = e.sum(axis=-1, keepdims=True)
    p = e / den
    return p @ v, (mx + np.log(den))[..., 0], p


def _attend_backward(q, k, v, p, o, g_out, g_lse):
    sc = 1.0 / math.sqrt(q.shape[-1])
    g_p = g_out @ np.swapaxes(v, -1, -2)
    d = (g_out * o).sum(axis=-1, keepdims=True)
    g_s = p * (g_p - d + g_lse[..., None])
    g_q = (g_s @ k) * sc
    g_k = (np.swapaxes(g_s, -1, -2) @ q) * sc
    g_v = np.swapaxes(p, -1, -2) @ g_out
    return g_q, g_k, g_v


@dataclass
class _Block:
    heads: np.ndarray  # rows into the head axis
    idx: np.ndarray  # (segments, m) token positions
    o: np.ndarray  # (heads, segments, m, d_h)
    lse: np.ndarray  # (heads, segments, m)
    saved: tuple | None = None  # (q, k, v, p) for the backward pass

    @property
    def ix(self):
        return np.ix_(self.heads, self.idx.ravel())


SCORE_BLOCK = 1 << 18  # score entries per batched kernel call


def _pair_blocks(q, k, v, w, r, head_ids, keep):
    """Attend every segment of one pair, a bounded batch of segments at a time.

    Bounding the batch keeps the score tensor cache-sized, so the cost per
    token stays flat as ``N`` grows instead of degrading with memory traffic.
    """
    n = q.shape[1]
    blocks = []
    for s in sorted(set(int(x) for x in head_ids % r)):
        heads = np.nonzero(head_ids % r == s)[0]
        for segs in _segment_index_sets(n, w, r, s):
            m = segs.shape[1]
            step = max(1, SCORE_BLOCK // (heads.size * m * m))
            for lo in range(0, segs.shape[0], step):
                idx = segs[lo:lo + step]
                sel = np.ix_(heads, idx.ravel())
                shape = (heads.size,) + idx.shape + (q.shape[2],)
                qs, ks, vs = (a[sel].reshape(shape) for a in (q, k, v))
                o, lse, p = _attend(qs, ks, vs)
                blocks.append(_Block(heads, idx, o, lse, (qs, ks, vs, p) if keep else None))
    return blocks


@dataclass
class _Mix:
    pairs: list[list[_Block]]
    shift: np.ndarray  # (h, N) shared max of the log-normalisers
    total: np.ndarray  # (h, N) sum of rebased denominators
    out: np.ndarray  # (h, N, d_h)


def _dilated_forward(q, k, v, schedule: DilationSchedule, head_ids, keep=False, threads=1) -> _Mix:
    h, n, dh = q.shape
    work = [(w, r) for w, r in schedule.pairs]
    if threads > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(lambda wr: _pair_blocks(q, k, v, wr[0], wr[1], head_ids, keep), work))
    else:
        pairs = [_pair_blocks(q, k, v, w, r, head_ids, keep) for w, r in work]
    return _mix_pairs(pairs, (h, n, dh))


def _mix_pairs(pairs: list[list[_Block]], shape) -> _Mix:
    h, n, dh = shape
    shift = np.full((h, n), -np.inf)
    for blocks in pairs:
        for b in blocks:
            ix = b.ix
            shift[ix] = np.maximum(shift[ix], b.lse.reshape(b.heads.size, -1))
    if not np.all(np.isfinite(shift)):
        raise ContractError("schedule leaves positions uncovered")
    num = np.zeros(shape)
    total = np.zeros((h, n))
    for blocks in pairs:
        for b in blocks:
            ix = b.ix
            wt = np.exp(b.lse.reshape(b.heads.size, -1) - shift[ix])
            num[ix] += wt[..., None] * b.o.reshape(b.heads.size, -1, dh)
            total[ix] += wt
    return _Mix(pairs, shift, total, num / total[..., None])


def _dilated_backward(mix: _Mix, g_out: np.ndarray, shape):
    gq, gk, gv = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    dh = shape[2]
    for blocks in mix.pairs:
        for b in blocks:
            ix = b.ix
            hs = b.heads.size
            alpha = np.exp(b.lse.reshape(hs, -1) - mix.shift[ix]) / mix.total[ix]
            g = g_out[ix]
            o = b.o.reshape(hs, -1, dh)
            g_o = alpha[..., None] * g
            g_lse = alpha * ((g * o).sum(-1) - (g * mix.out[ix]).sum(-1))
            qs, ks, vs, p = b.saved
            bshape = b.o.shape
            dq, dk, dv = _attend_backward(qs, ks, vs, p, b.o, g_o.reshape(bshape), g_lse.reshape(b.lse.shape))
            gq[ix] += dq.reshape(hs, -1, dh)
            gk[ix] += dk.reshape(hs, -1, dh)
            gv[ix] += dv.reshape(hs, -1, dh)
    return gq, gk, gv


def dilated_attention(q: Tensor, k: Tensor, v: Tensor, schedule: DilationSchedule,
                      head_ids: Iterable[int] | None = None, threads: int = 1) -> Tensor:
    """Dilated attention on head-major ``(h, N, d_h)`` query/key/value tensors.

    ``head_ids`` gives the global head index of each row of the head axis
    (it fixes the offset each head uses); defaults to ``0..h-1``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"q, k, v must share a (h, N, d_h) shape, got {q.shape}, {k.shape}, {v.shape}")
    h = q.shape[0]
    head_ids = np.arange(h) if head_ids is None else np.asarray(list(head_ids))
    keep = q.requires_grad or k.requires_grad or v.requires_grad
    mix = _dilated_forward(q.data, k.data, v.data, schedule, head_ids, keep=keep, threads=threads)
    return _op(mix.out, (q, k, v), lambda g: _dilated_backward(mix, g, q.shape))


def mixing_weights(q, k, v, schedule: DilationSchedule, head_ids=None) -> np.ndarray:
    """Per-pair mixing weights ``alpha``, shape ``(pairs, h, N)``."""
    q, k, v = (np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in (q, k, v))
    head_ids = np.arange(q.shape[0]) if head_ids is None else np.asarray(list(head_ids))
    mix = _dilated_forward(q, k, v, schedule, head_ids)
    alpha = np.zeros((len(mix.pairs),) + q.shape[:2])
    for i, blocks in enumerate(mix.pairs):
        for b in blocks:
            ix = b.ix
            alpha[i][ix] = np.exp(b.lse.reshape(b.heads.size, -1) - mix.shift[ix]) / mix.total[ix]
    return alpha


# ---------------------------------------------------------------- public ops


def segment_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Dense bidirectional attention inside one sparsified segment.

    Returns ``(out, denoms)``; ``denoms`` are the stabilised softmax row sums.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[0] < 1:
        raise ContractError("segment_attention needs at least one row")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    probs, denoms = softmax_rows(scores)
    return matmul(probs, v), denoms


def dilated_head(q: Tensor, k: Tensor, v: Tensor, schedule: DilationSchedule, head_index: int) -> Tensor:
    """Single-head dilated attention on ``(N, d_h)`` inputs."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    n, dh = q.shape
    out = dilated_attention(reshape(q, (1, n, dh)), reshape(k, (1, n, dh)), reshape(v, (1, n, dh)),
                            schedule, head_ids=[head_index])
    return reshape(out, (n, dh))


@dataclass
class AttentionWeights:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise ConfigError(f"hidden size {d} is not divisible by {self.heads} heads")

    @property
    def hidden(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator, std: float = 0.02,
             requires_grad: bool = False) -> "AttentionWeights":
        def mat():
            return Tensor(rng.normal(0.0, std, (d, d)), requires_grad=requires_grad)

        def vec():
            return Tensor(np.zeros(d), requires_grad=requires_grad)

        return cls(mat(), vec(), mat(), vec(), mat(), vec(), mat(), vec(), heads)

    def tensors(self) -> dict[str, Tensor]:
        return {"q.weight": self.wq, "q.bias": self.bq, "k.weight": self.wk, "k.bias": self.bk,
                "v.weight": self.wv, "v.bias": self.bv, "o.weight": self.wo, "o.bias": self.bo}


def split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return transpose(reshape(x, (n, heads, d // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (n, h * dh))


def multihead_dilated_attention(x: Tensor, weights: AttentionWeights, schedule: DilationSchedule,
                                threads: int = 1) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != weights.hidden:
        raise DimensionError(f"expected (N, {weights.hidden}) input, got {x.shape}")
    if x.shape[0] < 1:
        raise ContractError("empty sequence")
    h = weights.heads
    q = split_heads(linear(x, weights.wq, weights.bq), h)
    k = split_heads(linear(x, weights.wk, weights.bk), h)
    v = split_heads(linear(x, weights.wv, weights.bv), h)
    out = dilated_attention(q, k, v, schedule, threads=threads)
    return linear(merge_heads(out), weights.wo, weights.bo)


# ---------------------------------------------------------------- references


def _project(x: np.ndarray, weights: AttentionWeights):
    h = weights.heads
    n, d = x.shape

    def proj(w, b):
        return (x @ w.data + b.data).reshape(n, h, d // h).transpose(1, 0, 2)

    return proj(weights.wq, weights.bq), proj(weights.wk, weights.bk), proj(weights.wv, weights.bv)


def plain_mha(x, weights: AttentionWeights, chunk: int | None = None) -> np.ndarray:
    """Textbook dense multi-head attention (numpy, forward only).

    ``chunk`` limits how many query rows are scored at once; the result does
    not depend on it.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    q, k, v = _project(x, weights)
    n = x.shape[0]
    chunk = chunk or n
    heads = []
    for hq, hk, hv in zip(q, k, v):
        out = np.empty_like(hq)
        for a in range(0, n, chunk):
            s = hq[a:a + chunk] @ hk.T / math.sqrt(hq.shape[-1])
            s = s - s.max(axis=1, keepdims=True)
            p = np.exp(s)
            p /= p.sum(axis=1, keepdims=True)
            out[a:a + chunk] = p @ hv
        heads.append(out)
    return np.concatenate(heads, axis=1) @ weights.wo.data + weights.bo.data


ORACLE_BLOCK = 1 << 16  # score-matrix entries per query chunk


def oracle_masked_dense(x, weights: AttentionWeights, schedule: DilationSchedule,
                        chunk: int | None = None) -> np.ndarray:
    """Masked full-matrix reference for :func:`multihead_dilated_attention`.

    For each head and pair, query ``a`` may attend key ``b`` iff both lie in
    the same segment and both sit at the head's offset within that segment.
    Query rows are processed ``chunk`` at a time to bound memory; by default
    the chunk keeps each score block at a fixed size so that per-entry cost
    does not drift with ``N`` as the block falls out of cache.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    n = x.shape[0]
    chunk = chunk or max(1, ORACLE_BLOCK // max(n, 1))
    q, k, v = _project(x, weights)
    h, _, dh = q.shape
    pos = np.arange(n)
    heads_out = []
    for head in range(h):
        lses = np.full((len(schedule.pairs), n), -np.inf)
        outs = np.zeros((len(schedule.pairs), n, dh))
        for i, (w, r) in enumerate(schedule.pairs):
            s = head % r
            seg = pos // w
            sel = (pos - seg * w) % r == s
            for a in range(0, n, chunk):
                rows = np.arange(a, min(a + chunk, n))
                rows = rows[sel[rows]]
                if rows.size == 0:
                    continue
                mask = (seg[rows, None] == seg[None, :]) & sel[None, :]
                scores = q[head, rows] @ k[head].T / math.sqrt(dh)
                scores = np.where(mask, scores, -np.inf)
                mx = scores.max(axis=1, keepdims=True)
                e = np.exp(scores - mx)
                den = e.sum(axis=1, keepdims=True)
                outs[i, rows] = (e @ v[head]) / den
                lses[i, rows] = (mx + np.log(den))[:, 0]
        top = lses.max(axis=0)
        wts = np.exp(lses - top)
        heads_out.append((wts[..., None] * outs).sum(axis=0) / wts.sum(axis=0)[:, None])
    return np.concatenate(heads_out, axis=1) @ weights.wo.data + weights.bo.data


# ---------------------------------------------------------------- cost model


def flops_estimate(n: int, schedule: DilationSchedule, d: int, h: int | None = None) -> int:
    """Closed-form FLOP count of one dilated attention layer.

    ``sum_i ceil(N / w_i) * (w_i / r_i)^2 * d * 4`` for scores and value
    mixing (summed over heads, each head has ``d / h`` channels) plus
    ``8 * N * d^2`` for the four projections.  ``h`` does not change the
    count and is accepted for signature symmetry.
    """
    attn = sum(math.ceil(n / w) * (w // r) ** 2 for w, r in schedule.pairs) * d * 4
    return attn + 8 * n * d * d


def dense_flops(n: int, d: int) -> int:
    return 4 * n * n * d + 8 * n * d * d


def attention_score_flops(n: int, schedule: DilationSchedule, d: int) -> int:
    return sum(math.ceil(n / w) * (w // r) ** 2 for w, r in schedule.pairs) * d * 4
