"""Oracle and equivalence suites shared by ``longvit verify`` and the test-suite."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .attention import (AttentionWeights, DilationSchedule, PRETRAIN_PAIRS, dilated_attention,
                        multihead_dilated_attention, oracle_masked_dense, plain_mha, schedule_for_tokens,
                        segment_attention)
from .encoder import EncoderConfig, encode, init_weights
from .image import PosEmbedTable, embed_patches, interpolate_pos_embed
from .metrics import auc_binary, auc_macro, c_index
from .parallel import distributed_forward
from .tensor import (Graph, Tensor, concat, gelu, layer_norm, log_sigmoid, logsumexp, matmul, mul, reshape,
                     sigmoid, softmax_rows, sum_all, take, transpose)

ORACLE_TOL = 1e-8
DENSE_TOL = 1e-10
DISTRIBUTED_TOL = 1e-12
GRAD_TOL = 1e-4
FD_STEP = 1e-5


@dataclass
class Check:
    name: str
    passed: bool
    deviation: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: max deviation {self.deviation:.3e}{extra}"


# ---------------------------------------------------------------- helpers


def paper_schedule_for(n: int) -> DilationSchedule:
    """Pretraining schedule truncated to the sequence length."""
    return DilationSchedule(PRETRAIN_PAIRS).truncate(n)


def random_schedule(n: int, rng: np.random.Generator) -> DilationSchedule:
    """Random valid schedule: ratio 1 first, ratios and segments strictly increasing."""
    count = int(rng.integers(1, 5))
    pairs = []
    w_prev, r_prev = 0, 0
    for i in range(count):
        r = 1 if i == 0 else r_prev * int(rng.integers(2, 4))
        low = max(w_prev // r + 1, 1)
        m = int(rng.integers(low, low + max(n // (2 * r), 2)))
        w = m * r
        if w > 2 * n and pairs:
            break
        pairs.append((w, r))
        w_prev, r_prev = w, r
    return DilationSchedule(tuple(pairs))


def random_weights(d: int, heads: int, rng: np.random.Generator, std: float = 0.3) -> AttentionWeights:
    w = AttentionWeights.init(d, heads, rng, std=std)
    for b in (w.bq, w.bk, w.bv, w.bo):
        b.data[:] = rng.normal(0.0, 0.1, d)
    return w


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``, guarded against all-zero gradients."""
    scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-6)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale_)


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = FD_STEP,
                   max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Relative error between backprop and central differences over all ``params``.

    The error is pooled across the inputs of one op, so an input whose exact
    gradient is zero (a key bias under softmax shift invariance, say) is
    measured against the scale of its siblings rather than against rounding
    noise.  With ``max_coords`` only that many randomly chosen entries per
    tensor are perturbed.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    graph = Graph()
    with graph:
        loss = loss_fn()
    graph.backward(loss)
    rng = rng or np.random.default_rng(0)
    a, num = [], []
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        coords = list(np.ndindex(p.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in pick]
        for c in coords:
            orig = p.data[c]
            p.data[c] = orig + h
            fp = loss_fn().item()
            p.data[c] = orig - h
            fm = loss_fn().item()
            p.data[c] = orig
            a.append(analytic[c])
            num.append((fp - fm) / (2 * h))
    return relative_error(np.array(a), np.array(num))


def brute_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y != 1]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def brute_auc_macro(scores, labels) -> float:
    scores = np.asarray(scores)
    c = scores.shape[1]
    return sum(brute_auc(list(scores[:, k]), [1 if y == k else 0 for y in labels]) for k in range(c)) / c


def brute_c_index(risks, times, events) -> float:
    num, den = 0.0, 0
    n = len(risks)
    for i in range(n):
        if not events[i]:
            continue
        for j in range(n):
            if times[i] < times[j]:
                den += 1
                num += 1.0 if risks[i] > risks[j] else 0.5 if risks[i] == risks[j] else 0.0
    return num / den


# ---------------------------------------------------------------- suites


def attention_suite(ns: Sequence[int] = (16, 64, 256, 1024), cases: int = 50, d: int = 32, heads: int = 4,
                    seed: int = 0) -> list[Check]:
    """Sparse path vs masked-dense oracle, plus the ratio-1 dense reduction.

    Even-numbered cases use the pretraining schedule truncated to ``N``,
    odd-numbered ones random valid schedules.
    """
    rng = np.random.default_rng(seed)
    checks = []
    for n in ns:
        worst, worst_paper = 0.0, 0.0
        for case in range(cases):
            sched = paper_schedule_for(n) if case % 2 == 0 else random_schedule(n, rng)
            w = random_weights(d, heads, rng)
            x = rng.normal(size=(n, d))
            dev = float(np.abs(multihead_dilated_attention(Tensor(x), w, sched).data
                               - oracle_masked_dense(x, w, sched)).max())
            worst = max(worst, dev)
            if case % 2 == 0:
                worst_paper = max(worst_paper, dev)
        checks.append(Check(f"oracle N={n} ({cases} cases)", worst <= ORACLE_TOL, worst,
                            f"paper-schedule cases {worst_paper:.1e}"))
    worst = 0.0
    for n in (1, 7, 64, 256):
        w = random_weights(d, heads, rng)
        x = rng.normal(size=(n, d))
        out = multihead_dilated_attention(Tensor(x), w, DilationSchedule(((n, 1),))).data
        worst = max(worst, float(np.abs(out - plain_mha(x, w)).max()))
    checks.append(Check("degenerate {(N,1)} vs plain MHA", worst <= DENSE_TOL, worst))
    return checks


def distributed_suite(ns: Sequence[int] = (64, 256, 1024), workers: Sequence[int] = (1, 2, 4, 8),
                      d: int = 64, heads: int = 16, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    for n in ns:
        sched = schedule_for_tokens(n)
        w = random_weights(d, heads, rng)
        x = rng.normal(size=(n, d))
        single = multihead_dilated_attention(Tensor(x), w, sched).data
        for wk in workers:
            out, log = distributed_forward(x, w, sched, wk)
            _, log2 = distributed_forward(x, w, sched, wk)
            dev = float(np.abs(out - single).max())
            same_log = log == log2
            checks.append(Check(f"distributed N={n} W={wk}", dev <= DISTRIBUTED_TOL and same_log, dev,
                                f"{len(log)} messages, {log.total()} elements, log deterministic={same_log}"))
    return checks


def gradient_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[Tensor], int | None]]:
    """(name, loss, parameters, coordinate budget) for every differentiable op."""
    def t(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    cases = []
    a, b = t(4, 3), t(3, 5)
    c = Tensor(rng.normal(size=(4, 5)))
    cases.append(("matmul", lambda: sum_all(mul(matmul(a, b), c)), [a, b], None))
    x, y = t(3, 4), t(4)
    cases.append(("add/mul broadcast", lambda: sum_all(mul(x + y, x)), [x, y], None))
    s = t(3, 5)
    ws = Tensor(rng.normal(size=(3, 5)))
    wd = Tensor(rng.normal(size=3))

    def softmax_loss():
        p, den = softmax_rows(s)
        return sum_all(mul(p, ws)) + sum_all(mul(den, wd))

    cases.append(("softmax_rows", softmax_loss, [s], None))
    xl, g, be = t(4, 6), t(6), t(6)
    wl = Tensor(rng.normal(size=(4, 6)))
    cases.append(("layer_norm", lambda: sum_all(mul(layer_norm(xl, g, be), wl)), [xl, g, be], None))
    xg = t(5, 3)
    cases.append(("gelu", lambda: sum_all(mul(gelu(xg), xg)), [xg], None))
    xs = t(6)
    cases.append(("sigmoid/log_sigmoid", lambda: sum_all(mul(sigmoid(xs), log_sigmoid(xs))), [xs], None))
    xe = t(3, 4)
    we3 = Tensor(rng.normal(size=3))
    cases.append(("logsumexp", lambda: sum_all(mul(logsumexp(xe), we3)), [xe], None))
    xt = t(5, 3)
    wt = Tensor(rng.normal(size=(2, 4, 3)))
    wt2 = Tensor(rng.normal(size=(3, 5)))
    cases.append(("take/concat/reshape/transpose",
                  lambda: sum_all(mul(reshape(concat([take(xt, [0, 2, 2, 4]), take(xt, [1, 3, 0, 0])], 0),
                                              (2, 4, 3)), wt)) + sum_all(mul(transpose(xt, (1, 0)), wt2)),
                  [xt], None))
    tab = t(6, 2)
    wp = Tensor(rng.normal(size=(15, 2)))
    cases.append(("interpolate_pos_embed",
                  lambda: sum_all(mul(interpolate_pos_embed(PosEmbedTable(tab, (2, 3)), (3, 5)), wp)), [tab], None))
    pe, we, bb = t(4, 12), t(12, 3), t(3)
    wem = Tensor(rng.normal(size=(4, 3)))
    cases.append(("embed_patches", lambda: sum_all(mul(embed_patches(pe, we, bb), wem)), [pe, we, bb], None))
    qs, ks, vs = t(5, 4), t(5, 4), t(5, 4)
    wo = Tensor(rng.normal(size=(5, 4)))
    wdn = Tensor(rng.normal(size=5))

    def seg_loss():
        o, den = segment_attention(qs, ks, vs)
        return sum_all(mul(o, wo)) + sum_all(mul(den, wdn))

    cases.append(("segment_attention", seg_loss, [qs, ks, vs], None))
    sched = DilationSchedule(((4, 1), (8, 2), (16, 4)))
    q3, k3, v3 = t(4, 18, 3), t(4, 18, 3), t(4, 18, 3)
    w3 = Tensor(rng.normal(size=(4, 18, 3)))
    cases.append(("dilated_attention", lambda: sum_all(mul(dilated_attention(q3, k3, v3, sched), w3)),
                  [q3, k3, v3], None))
    aw = random_weights(8, 2, rng)
    xm = t(12, 8)
    wm = Tensor(rng.normal(size=(12, 8)))
    mparams = [xm] + list(aw.tensors().values())
    cases.append(("multihead_dilated_attention",
                  lambda: sum_all(mul(multihead_dilated_attention(xm, aw, DilationSchedule(((4, 1), (8, 2)))), wm)),
                  mparams, None))
    from .tasks import cross_entropy_loss, survival_nll

    z = t(3)
    cases.append(("cross_entropy_loss", lambda: cross_entropy_loss(z, 1), [z], None))
    zs = t(4)
    cases.append(("survival_nll event", lambda: survival_nll(zs, 2, 1), [zs], None))
    zc = t(4)
    cases.append(("survival_nll censored", lambda: survival_nll(zc, 1, 0), [zc], None))
    cases.append(tiny_encoder_case(rng))
    return cases


def tiny_encoder_case(rng: np.random.Generator):
    """2-layer, d=32, N=16 encoder with non-degenerate random weights."""
    cfg = EncoderConfig.tiny(drop_path=0.0, schedule=DilationSchedule(((4, 1), (8, 2), (16, 4))))
    weights = init_weights(cfg, seed=int(rng.integers(1 << 30)))
    for name, p in weights.params.items():
        if name.startswith("blocks.") or name.startswith("norm."):
            p.data[:] = p.data + rng.normal(0.0, 0.2, p.shape)
    x = Tensor(rng.normal(size=(16, 32)), requires_grad=True)
    head = Tensor(rng.normal(size=32))
    params = [x] + [p for n, p in sorted(weights.params.items()) if n.startswith(("blocks.", "norm."))]

    def loss():
        tokens, pooled = encode(x, weights)
        return sum_all(mul(pooled, head)) + sum_all(mul(tokens, tokens)) * 0.01

    return ("tiny encoder (2 layers, d=32, N=16)", loss, params, 6)


def gradient_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    for name, loss, params, budget in gradient_cases(rng):
        err = gradient_check(loss, params, max_coords=budget, rng=rng)
        checks.append(Check(f"grad {name}", err <= GRAD_TOL, err))
    return checks


def metrics_suite(instances: int = 100, max_n: int = 100, seed: int = 0) -> list[Check]:
    """Rank-based metrics against pair enumeration, with ties and censoring."""
    rng = np.random.default_rng(seed)
    bad = {"auc_binary": 0.0, "auc_macro": 0.0, "c_index": 0.0}
    for _ in range(instances):
        n = int(rng.integers(4, max_n + 1))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, max(n // 3, 2), n).astype(float)  # coarse grid forces ties
        bad["auc_binary"] = max(bad["auc_binary"], abs(auc_binary(scores, labels) - brute_auc(scores, labels)))
        n3 = max(n, 6)
        lab3 = rng.integers(0, 3, n3)
        lab3[:3] = [0, 1, 2]
        sc3 = rng.integers(0, 5, (n3, 3)).astype(float)
        bad["auc_macro"] = max(bad["auc_macro"], abs(auc_macro(sc3, lab3) - brute_auc_macro(sc3, list(lab3))))
        times = rng.integers(1, 20, n).astype(float)
        events = (rng.random(n) > 0.4).astype(int)
        events[0] = 1
        times[0] = 0.5
        risks = rng.integers(0, 6, n).astype(float)
        bad["c_index"] = max(bad["c_index"],
                             abs(c_index(risks, times, events) - brute_c_index(list(risks), list(times), list(events))))
    return [Check(f"{k} vs enumeration ({instances} instances)", v == 0.0, v) for k, v in bad.items()]


SUITES = {
    "attention": attention_suite,
    "distributed": distributed_suite,
    "gradients": gradient_suite,
    "metrics": metrics_suite,
}
