"""Task heads, losses, dataset manifests, cross-validation and finetuning."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .encoder import EncoderConfig, EncoderWeights, encode, head_logits, init_weights
from .errors import ConfigError, ContractError
from .image import ImageConfig, embed_sequence, normalise_patches, raw_patches, token_grid
from .metrics import auc_binary, auc_macro, c_index, format_mean_std, mean_std
from .optim import AdamWState, adamw_step, lr_at
from .tensor import Graph, Tensor, as_tensor, log_sigmoid, logsumexp, pick, scale, sub, sum_all, take

log = logging.getLogger(__name__)

TASKS = ("subtype", "survival")
DEFAULT_FOLDS = {"subtype": 10, "survival": 5}


# ---------------------------------------------------------------- records


@dataclass
class StudyRecord:
    id: str
    path: Path
    label: int | None = None
    time: float | None = None
    event: int | None = None
    fold: int | None = None

    def __post_init__(self):
        if self.time is not None and self.time <= 0:
            raise ContractError(f"record {self.id}: survival time must be positive")
        if self.event is not None and self.event not in (0, 1):
            raise ContractError(f"record {self.id}: event flag must be 0 or 1")


class ManifestError(ConfigError):
    pass


def parse_manifest(path: str | Path, task: str) -> list[StudyRecord]:
    """Read a dataset manifest.

    Comma-separated UTF-8, one record per line; ``#`` starts a comment line
    and a first row beginning with ``id`` is a header.  Columns::

        subtype:   id, image_path, class_index[, fold]
        survival:  id, image_path, time_months, event(0|1)[, fold]

    Relative image paths resolve against the manifest's directory.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    path = Path(path)
    width = 3 if task == "subtype" else 4
    records: list[StudyRecord] = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            row = [c.strip() for c in row]
            if not row or not any(row) or row[0].startswith("#"):
                continue
            if not records and row[0].lower() == "id":
                continue
            if len(row) not in (width, width + 1):
                raise ManifestError(f"{path}:{lineno}: expected {width} or {width + 1} columns, got {len(row)}")
            try:
                img = Path(row[1])
                img = img if img.is_absolute() else path.parent / img
                fold = int(row[width]) if len(row) > width and row[width] != "" else None
                if task == "subtype":
                    rec = StudyRecord(row[0], img, label=int(row[2]), fold=fold)
                else:
                    rec = StudyRecord(row[0], img, time=float(row[2]), event=int(row[3]), fold=fold)
            except (ValueError, ContractError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            records.append(rec)
    if not records:
        raise ManifestError(f"{path}: no records")
    return records


def write_manifest(path: str | Path, records: Sequence[StudyRecord], task: str) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        for r in records:
            img = r.path
            try:
                img = r.path.relative_to(path.parent)
            except ValueError:
                pass
            row = [r.id, str(img)] + ([r.label] if task == "subtype" else [r.time, r.event])
            if r.fold is not None:
                row.append(r.fold)
            w.writerow(row)


# ---------------------------------------------------------------- splits


def kfold_split(strata: Sequence[int], k: int, seed: int = 0) -> np.ndarray:
    """Stratified fold index per record.

    Each stratum is shuffled and the concatenation is dealt round-robin, so
    fold sizes differ by at most one and every stratum is spread evenly.
    """
    strata = np.asarray(strata)
    n = strata.size
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    order = []
    for value in np.unique(strata):
        members = np.nonzero(strata == value)[0]
        if members.size < k:
            warnings.warn(f"stratum {value!r} has {members.size} < {k} members; folds cannot all contain it",
                          stacklevel=2)
        order.append(rng.permutation(members))
    folds = np.empty(n, dtype=np.int64)
    folds[np.concatenate(order)] = np.arange(n) % k
    return folds


def strata_of(records: Sequence[StudyRecord], task: str) -> list[int]:
    return [r.label if task == "subtype" else r.event for r in records]


# ---------------------------------------------------------------- losses


def cross_entropy_loss(logits: Tensor, label: int) -> Tensor:
    logits = as_tensor(logits)
    if not 0 <= label < logits.shape[0]:
        raise ContractError(f"label {label} outside [0, {logits.shape[0]})")
    return sub(logsumexp(logits), pick(logits, label))


def survival_nll(logits: Tensor, time_bin: int, event: int) -> Tensor:
    """Censored negative log-likelihood of a discrete-time hazard model.

    Hazards ``h_j = sigmoid(z_j)`` and survival ``S_j = prod_{k<=j} (1 - h_k)``;
    an event in bin ``b`` scores ``S_{b-1} h_b``, censoring in bin ``b``
    scores ``S_b``.
    """
    logits = as_tensor(logits)
    if not 0 <= time_bin < logits.shape[0]:
        raise ContractError(f"time bin {time_bin} outside [0, {logits.shape[0]})")
    log_surv = log_sigmoid(scale(logits, -1.0))  # log(1 - h_j)
    if event:
        ll = log_sigmoid(pick(logits, time_bin))
        if time_bin > 0:
            ll = ll + sum_all(take(log_surv, np.arange(time_bin)))
    else:
        ll = sum_all(take(log_surv, np.arange(time_bin + 1)))
    return scale(ll, -1.0)


def survival_risk(logits) -> float:
    """Risk score ``-sum_j S_j``; higher means earlier expected death."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    log_surv = np.minimum(-z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return float(-np.exp(np.cumsum(log_surv)).sum())


def survival_bin_cuts(times: Sequence[float], events: Sequence[int], bins: int = 4) -> np.ndarray:
    """Interior cut points: quantiles of the uncensored times."""
    t = np.asarray(times, dtype=np.float64)[np.asarray(events).astype(bool)]
    if t.size < bins:
        raise ConfigError(f"need at least {bins} uncensored times to place {bins} bins, got {t.size}")
    cuts = np.quantile(t, np.arange(1, bins) / bins)
    if np.any(np.diff(cuts) <= 0):
        raise ConfigError(f"survival bin edges are not strictly increasing: {cuts}")
    return cuts


def time_bin(time: float, cuts: np.ndarray) -> int:
    return int(np.searchsorted(cuts, time, side="right"))


# ---------------------------------------------------------------- finetuning


@dataclass
class FinetuneConfig:
    task: str = "subtype"
    folds: int | None = None  # None: 10 for subtyping, 5 for survival
    epochs: int = 10
    batch_size: int = 8
    accum_steps: int = 1
    lr: float = 5e-5
    weight_decay: float = 0.05
    warmup_epochs: float = 1.0
    seed: int = 0
    num_classes: int | None = None  # None: inferred from labels
    num_bins: int = 4
    shuffle: bool = True
    encoder: EncoderConfig = field(default_factory=EncoderConfig.paper)
    image: ImageConfig = field(default_factory=ImageConfig)
    init_checkpoint: Path | None = None
    threads: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.batch_size < 1 or self.accum_steps < 1 or self.epochs < 0:
            raise ConfigError("batch size and accumulation steps must be positive, epochs non-negative")

    @property
    def k(self) -> int:
        return self.folds if self.folds is not None else DEFAULT_FOLDS[self.task]


@dataclass
class FoldResult:
    fold: int
    metric: float
    train_size: int
    test_size: int
    final_loss: float | None = None


@dataclass
class FinetuneResult:
    task: str
    metric_name: str
    folds: list[FoldResult]

    @property
    def values(self) -> list[float]:
        return [f.metric for f in self.folds]

    @property
    def mean(self) -> float:
        return mean_std(self.values)[0]

    @property
    def std(self) -> float:
        return mean_std(self.values)[1]

    def summary(self) -> str:
        return f"{self.metric_name} {format_mean_std(self.values)}"

    def lines(self) -> list[str]:
        out = [f"fold {f.fold}: {self.metric_name}={f.metric:.4f} (train={f.train_size}, test={f.test_size})"
               for f in self.folds]
        out.append(f"mean ± std: {format_mean_std(self.values)}")
        return out


class _Dataset:
    """Raw patch rows for every record, loaded lazily and kept in memory."""

    def __init__(self, records: Sequence[StudyRecord], image: ImageConfig):
        self.records = list(records)
        self.image = image
        self.grid = token_grid(self.records[0].path, image)
        self._cache: dict[int, tuple[np.ndarray, int]] = {}

    def patches(self, i: int) -> np.ndarray:
        hit = self._cache.get(i)
        if hit is None:
            hit = raw_patches(self.records[i].path, self.image)
            if hit[0].shape[0] != self.grid[0] * self.grid[1]:
                raise ConfigError(f"record {self.records[i].id}: grid differs from the first record")
            self._cache[i] = hit
        return normalise_patches(*hit)


def _forward_logits(ds: _Dataset, i: int, weights: EncoderWeights, train: bool,
                    rng: np.random.Generator | None, threads: int) -> Tensor:
    seq = embed_sequence(ds.patches(i), ds.grid, weights.embedder)
    _, pooled = encode(seq, weights, train=train, rng=rng, threads=threads)
    return head_logits(pooled, weights)


def _example_loss(logits: Tensor, record: StudyRecord, task: str, cuts: np.ndarray | None) -> Tensor:
    if task == "subtype":
        return cross_entropy_loss(logits, record.label)
    return survival_nll(logits, time_bin(record.time, cuts), record.event)


def evaluate(ds: _Dataset, idx: Sequence[int], weights: EncoderWeights, task: str, threads: int = 1) -> float:
    outs = []
    for i in idx:
        outs.append(_forward_logits(ds, i, weights, False, None, threads).data)
    recs = [ds.records[i] for i in idx]
    if task == "subtype":
        logits = np.stack(outs)
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        labels = [r.label for r in recs]
        if probs.shape[1] == 2:
            return auc_binary(probs[:, 1], labels)
        return auc_macro(probs, labels)
    risks = [survival_risk(z) for z in outs]
    return c_index(risks, [r.time for r in recs], [r.event for r in recs])


def train_fold(ds: _Dataset, train_idx: Sequence[int], weights: EncoderWeights, config: FinetuneConfig,
               cuts: np.ndarray | None, rng: np.random.Generator,
               on_step: Callable[[int, float], None] | None = None) -> float:
    """Train ``weights`` in place; returns the mean loss of the last epoch."""
    weights.requires_grad_(True)
    per_step = config.batch_size * config.accum_steps
    steps_per_epoch = math.ceil(len(train_idx) / per_step)
    total = steps_per_epoch * config.epochs
    warmup = int(round(config.warmup_epochs * steps_per_epoch))
    state = AdamWState()
    step = 0
    last = float("nan")
    order = np.asarray(train_idx)
    for _ in range(config.epochs):
        if config.shuffle:
            order = rng.permutation(order)
        losses = []
        for start in range(0, len(order), per_step):
            chunk = order[start:start + per_step]
            weights.zero_grad()
            for i in chunk:
                graph = Graph()
                with graph:
                    logits = _forward_logits(ds, int(i), weights, True, rng, config.threads)
                    loss = _example_loss(logits, ds.records[int(i)], config.task, cuts)
                    scaled = scale(loss, 1.0 / len(chunk))
                graph.backward(scaled)
                losses.append(loss.item())
            lr = lr_at(step, total, warmup, config.lr)
            adamw_step(weights.params, {k: t.grad for k, t in weights.params.items()}, state, lr,
                       config.weight_decay)
            if on_step is not None:
                on_step(step, lr)
            step += 1
        last = float(np.mean(losses)) if losses else last
    weights.zero_grad()
    weights.requires_grad_(False)
    return last


def initial_weights(config: FinetuneConfig, num_outputs: int) -> EncoderWeights:
    enc = replace(config.encoder, num_outputs=num_outputs)
    if config.init_checkpoint is not None:
        w = EncoderWeights.load(config.init_checkpoint, enc)
    else:
        w = init_weights(enc, seed=config.seed)
    return w


def finetune(records: Sequence[StudyRecord], config: FinetuneConfig, folds: np.ndarray | None = None,
             progress: Callable[[str], None] | None = None) -> FinetuneResult:
    """K-fold finetuning: each fold trains from the same initial weights.

    Fold assignments come from ``folds``, else from the records' ``fold``
    fields when all are set, else from a seeded stratified split.
    """
    records = list(records)
    task = config.task
    if task == "subtype":
        if any(r.label is None for r in records):
            raise ConfigError("subtyping records need class labels")
        num_outputs = config.num_classes or (max(r.label for r in records) + 1)
        metric_name = "AUC"
    else:
        if any(r.time is None or r.event is None for r in records):
            raise ConfigError("survival records need time and event")
        num_outputs = config.num_bins
        metric_name = "c-index"
    if folds is None:
        if all(r.fold is not None for r in records):
            folds = np.array([r.fold for r in records])
        else:
            folds = kfold_split(strata_of(records, task), config.k, config.seed)
    folds = np.asarray(folds)
    ds = _Dataset(records, config.image)
    init = initial_weights(config, num_outputs)
    results = []
    for f in np.unique(folds):
        train_idx = np.nonzero(folds != f)[0]
        test_idx = np.nonzero(folds == f)[0]
        try:
            cuts = None
            if task == "survival":
                cuts = survival_bin_cuts([records[i].time for i in train_idx],
                                         [records[i].event for i in train_idx], config.num_bins)
            weights = init.copy()
            rng = np.random.default_rng([config.seed, int(f)])
            final = train_fold(ds, train_idx, weights, config, cuts, rng)
            metric = evaluate(ds, test_idx, weights, task, config.threads)
        except (OSError, ValueError) as exc:
            raise type(exc)(f"fold {f}: {exc}") from exc
        res = FoldResult(int(f), metric, len(train_idx), len(test_idx), final)
        results.append(res)
        msg = f"fold {res.fold}: {metric_name}={metric:.4f}"
        log.info(msg)
        if progress:
            progress(msg)
    return FinetuneResult(task, metric_name, results)


def resolution_ablation(records: Sequence[StudyRecord], config: FinetuneConfig, resolutions: Sequence[int],
                        progress: Callable[[str], None] | None = None) -> dict[int, FinetuneResult]:
    """Finetune at each input resolution with otherwise identical settings.

    Only the image size and hence the segment schedule change between runs;
    fold assignments are shared.
    """
    folds = kfold_split(strata_of(records, config.task), config.k, config.seed)
    out = {}
    for res in resolutions:
        grid = res // config.image.patch_size
        cfg = replace(config, image=replace(config.image, resolution=res))
        out[res] = finetune(records, cfg, folds=folds, progress=progress)
        if progress:
            progress(f"{res}x{res} ({grid * grid} patches): {out[res].summary()}")
    return out


def format_ablation(results: dict[int, FinetuneResult], patch_size: int = 32) -> str:
    lines = [f"{'Image Resolution (#Patches)':<32} metric"]
    for res, r in results.items():
        n = (res // patch_size) ** 2
        lines.append(f"{f'{res}x{res} ({n})':<32} {format_mean_std(r.values)}")
    return "\n".join(lines)
