"""Sandwich-rule supernet training, inherited-weight evaluation and finetuning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import Split, SyntheticDataset
from .distill import DistillConfig, smd_losses, softmax_xent
from .space import SpaceSpec, sample_max, sample_min, sample_random
from .standalone import slice_params
from .supernet import SubnetView, SupernetParams, backward, forward, make_view, predict

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 1
    batch_size: int = 128
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    n_random_subnets: int = 2
    distill_mode: str = "smd"
    distill_loss: str = "dkd"
    alpha: float = 1.0
    beta: float = 0.5
    temperature: float = 1.0
    kd_direction: str = "teacher_first"
    grad_clip: float = 5.0  # global L2 norm; 0 disables
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_random_subnets < 0:
            raise ValueError("n_random_subnets must be >= 0")
        if not self.base_lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs, warmup_epochs must be >= 0 and batch_size >= 1")
        self.distill()  # validates the distillation fields

    def distill(self) -> DistillConfig:
        return DistillConfig(alpha=self.alpha, beta=self.beta, tau=self.temperature,
                             loss=self.distill_loss, direction=self.kd_direction,
                             mode=self.distill_mode)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    initial_loss: float = float("nan")

    FIELDS = ("epoch", "lr", "train_loss", "min_acc", "max_acc")

    def to_csv(self, path: str | Path, comment: str = "") -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.DictWriter(fh, fieldnames=self.FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k])
                            for k in self.FIELDS})

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainLog":
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        rows = [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in cls.FIELDS[1:]}}
                for r in csv.DictReader(lines)]
        return cls(rows)


@lru_cache(maxsize=65536)
def cached_view(spec: SpaceSpec, genes: tuple[int, ...]) -> SubnetView:
    return make_view(spec, genes)


def sample_sandwich(spec: SpaceSpec, rng: np.random.Generator, n_random: int) -> list[tuple]:
    """min, n random and max genomes, ordered by ascending parameter count (stable)."""
    genes = [sample_min(spec)] + [sample_random(spec, rng) for _ in range(n_random)] + [sample_max(spec)]
    return sorted(genes, key=lambda g: cached_view(spec, g).n_params())


def lr_at(step: int, total: int, warmup: int, base_lr: float, schedule: str = "cosine") -> float:
    if step < warmup:
        return base_lr * (step + 1) / warmup
    if schedule == "constant" or total <= warmup:
        return base_lr
    progress = (step - warmup) / (total - warmup)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def _as_split(data) -> Split:
    return data.val if isinstance(data, SyntheticDataset) else data


def evaluate(spec: SpaceSpec, params: SupernetParams, genes, data) -> float:
    """Top-1 accuracy of a subnet with inherited weights (defaults to the val split)."""
    split = _as_split(data)
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict(params, cached_view(spec, tuple(genes)), split.inputs)
    return float((logits.argmax(axis=1) == split.labels).mean())


def grad_norm(grads) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values()))


class _SGD:
    """SGD with momentum, coupled weight decay and optional global-norm clipping."""

    def __init__(self, params: SupernetParams, momentum: float, weight_decay: float,
                 clip: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.wd = weight_decay
        self.clip = clip
        self.buf = params.zeros_like()

    def step(self, grads, lr: float) -> None:
        scale = 1.0
        if self.clip:
            norm = grad_norm(grads)
            if norm > self.clip:
                scale = self.clip / norm
        for name, w in self.params.tensors.items():
            g = grads[name] * scale if scale != 1.0 else grads[name]
            if self.wd:
                g = g + self.wd * w
            v = self.buf[name]
            v *= self.momentum
            v += g
            w -= lr * v
        self.params.version += 1


def train_supernet(spec: SpaceSpec, params: SupernetParams, dataset: SyntheticDataset,
                   config: TrainConfig) -> tuple[SupernetParams, TrainLog]:
    """Sandwich-rule training; ``params`` is updated in place and returned."""
    if len(dataset.train) == 0:
        raise ValueError("training split is empty")
    dtype = np.dtype(config.dtype)
    if params.dtype != dtype:
        params = params.astype(dtype)
    dcfg = config.distill()
    rng = np.random.default_rng(config.seed)
    x_all, y_all = dataset.train.inputs.astype(dtype), dataset.train.labels
    n = len(y_all)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    warmup = steps_per_epoch * config.warmup_epochs
    opt = _SGD(params, config.momentum, config.weight_decay, config.grad_clip)
    tlog = TrainLog()
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            genes_list = sample_sandwich(spec, rng, config.n_random_subnets)
            views = [cached_view(spec, g) for g in genes_list]
            outs = [forward(params, v, v.subsample(xb)) for v in views]
            loss, dlogits = smd_losses([o[0] for o in outs], yb, dcfg)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {b}: {loss}")
            if step == 0:
                tlog.initial_loss = loss
            grads = params.zeros_like()
            for v, (_, cache), dl in zip(views, outs, dlogits):
                backward(v, cache, dl, grads)
            lr = lr_at(step, total, warmup, config.base_lr, config.lr_schedule)
            opt.step(grads, lr)
            losses.append(loss)
            step += 1
        if not params.all_finite():
            raise TrainingDiverged(f"non-finite weights after epoch {epoch}")
        row = {"epoch": epoch, "lr": float(lr), "train_loss": float(np.mean(losses)),
               "min_acc": evaluate(spec, params, sample_min(spec), dataset.val),
               "max_acc": evaluate(spec, params, sample_max(spec), dataset.val)}
        tlog.rows.append(row)
        log.info("epoch %d lr %.4f loss %.4f min %.4f max %.4f", epoch, row["lr"],
                 row["train_loss"], row["min_acc"], row["max_acc"])
    return params, tlog


def finetune(spec: SpaceSpec, params: SupernetParams, genes, dataset: SyntheticDataset,
             steps: int, lr: float = 0.02, batch_size: int = 128, momentum: float = 0.9,
             weight_decay: float = 1e-4, grad_clip: float = 5.0, seed: int = 0) -> float:
    """Train a dense copy of one subnet with cross-entropy and return its val accuracy.

    The supernet parameters are not modified.
    """
    view = cached_view(spec, tuple(genes))
    small = slice_params(params, view)
    sspec = small.spec
    sview = make_view(sspec, (0,) * sspec.n_genes)
    opt = _SGD(small, momentum, weight_decay, grad_clip)
    rng = np.random.default_rng(seed)
    x_all = dataset.train.inputs.astype(small.dtype)
    y_all = dataset.train.labels
    n = len(y_all)
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        logits, cache = forward(small, sview, sview.subsample(x_all[idx]))
        _, dl = softmax_xent(logits, y_all[idx])
        opt.step(backward(sview, cache, dl), lr)
    return evaluate(sspec, small, sview.genes, dataset.val)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
