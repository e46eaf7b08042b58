"""Single-domain-per-iteration schedules, SGD with prompt lr scaling, training loops."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, SplitDataset, full_scene_batch, make_batch
from .errors import ConfigError, NumericError, UnknownDomainError
from .metrics import confusion, miou
from .model import ModelConfig, SegmentationModel
from .params import ParamStore
from .tensor import Tape, no_grad


@dataclass
class TrainConfig:
    total_iters: int = 700
    batch_scenes: int = 2
    max_points: int = 512
    sampling_ratios: dict[str, int] | None = None  # None: equal weights
    base_lr: float = 0.05
    prompt_lr_scale: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_schedule: str = "constant"
    seed: int = 0
    eval_every: int = 0  # 0: evaluate once, after the last iteration

    def validate(self) -> None:
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        if self.batch_scenes < 1 or self.max_points < 1:
            raise ConfigError("batch_scenes and max_points must be positive")
        if not 0 < self.prompt_lr_scale <= 1:
            raise ConfigError(f"prompt_lr_scale must lie in (0, 1], got {self.prompt_lr_scale}")
        if not (math.isfinite(self.base_lr) and self.base_lr > 0):
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not (math.isfinite(self.weight_decay) and self.weight_decay >= 0):
            raise ConfigError("weight_decay must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be 'constant' or 'cosine'")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        if self.sampling_ratios is not None:
            bad = {k: v for k, v in self.sampling_ratios.items() if not (isinstance(v, int) and v > 0)}
            if bad:
                raise ConfigError(f"sampling ratios must be positive integers: {bad}")


# ---------------------------------------------------------------- schedule


def quota_counts(ratios: Mapping, total_iters: int) -> dict:
    """Largest-remainder apportionment of ``total_iters`` by integer weights."""
    if not ratios:
        raise ConfigError("sampling ratios must not be empty")
    keys = list(ratios)
    w = np.array([ratios[k] for k in keys], dtype=np.int64)
    if np.any(w <= 0):
        raise ConfigError(f"sampling ratios must be positive: {dict(ratios)}")
    total_w = int(w.sum())
    # exact integer arithmetic: floor and remainder of total * w / W
    floors = (total_iters * w) // total_w
    remainders = (total_iters * w) % total_w
    short = total_iters - int(floors.sum())
    order = sorted(range(len(keys)), key=lambda i: (-remainders[i], i))
    for i in order[:short]:
        floors[i] += 1
    return {k: int(c) for k, c in zip(keys, floors)}


def build_schedule(ratios: Mapping, total_iters: int, seed: int) -> list:
    """One domain key per iteration, proportions fixed exactly, order shuffled."""
    if not ratios:
        raise ConfigError("sampling ratios must not be empty")
    if total_iters < sum(ratios.values()):
        raise ConfigError(f"total_iters={total_iters} is smaller than the ratio sum {sum(ratios.values())}")
    counts = quota_counts(ratios, total_iters)
    keys = list(counts)
    slots = np.repeat(np.arange(len(keys)), [counts[k] for k in keys])
    slots = np.random.default_rng(seed).permutation(slots)
    return [keys[i] for i in slots]


# ---------------------------------------------------------------- optimizer


class SGD:
    """SGD with heavy-ball momentum; prompt parameters use a scaled lr.

    ``v <- momentum * v + g``; ``p <- p - lr_group * v`` where
    ``lr_group = base_lr * prompt_lr_scale`` for the prompt group.
    """

    def __init__(
        self,
        store: ParamStore,
        base_lr: float,
        prompt_lr_scale: float = 0.1,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
    ):
        self.store = store
        self.base_lr = base_lr
        self.prompt_lr_scale = prompt_lr_scale
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(p.data) for n, p in store.named_parameters()}
        self.last_update: dict[str, np.ndarray] = {}

    def lr(self, group: str) -> float:
        return self.base_lr * (self.prompt_lr_scale if group == "prompt" else 1.0)

    def step(self, lr_factor: float = 1.0) -> None:
        for name, p in self.store.named_parameters():
            if p.grad is None:
                raise ConfigError(f"parameter {name!r} has no gradient; run backward first")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            # scale the backbone-group update so the prompt step is exactly
            # prompt_lr_scale times what a backbone param would receive
            update = (self.base_lr * lr_factor) * v
            if self.store.group_of(name) == "prompt":
                update = self.prompt_lr_scale * update
            p.data -= update
            self.last_update[name] = update


# ---------------------------------------------------------------- evaluation


def evaluate(model: SegmentationModel, ds: Dataset) -> dict:
    """Full-scene eval-mode segmentation quality of ``model`` on one split."""
    k = len(ds.categories)
    cm = np.zeros((k, k), dtype=np.int64)
    loss_sum = 0.0
    n = 0
    with no_grad():
        for i in range(len(ds.scenes)):
            batch = full_scene_batch(ds, i)
            emb = model.embed(batch, train=False)
            domain = model.domain(batch.domain)
            pred = model.head.predict(emb, domain)
            loss = model.head.loss(emb, batch.labels, domain, model.cfg.criterion).item()
            cm += confusion(pred, batch.labels, k)
            loss_sum += loss * len(batch)
            n += len(batch)
    score, ious = miou(cm)
    return {
        "miou": score,
        "per_class_iou": {c: (None if np.isnan(v) else float(v)) for c, v in zip(ds.categories, ious)},
        "loss": loss_sum / n,
        "confusion": cm,
    }


# ---------------------------------------------------------------- training loops


@dataclass
class TrainResult:
    model: SegmentationModel
    metrics: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    schedule: list[str] = field(default_factory=list)

    def final_miou(self, domain: str, split: str = "val") -> float:
        for rec in reversed(self.metrics):
            if rec["domain"] == domain and rec["split"] == split:
                return rec["miou"]
        raise KeyError(f"no {split} metric for {domain!r}")


def _as_splits(datasets) -> dict[str, SplitDataset]:
    if isinstance(datasets, Mapping):
        return dict(datasets)
    return {pair.train.domain.name: pair for pair in datasets}


def write_metrics(records: Sequence[dict], path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def train(
    model: SegmentationModel,
    datasets,
    cfg: TrainConfig,
    log_path=None,
) -> TrainResult:
    """Run the single-domain-per-iteration loop on ``model`` in place."""
    cfg.validate()
    splits = _as_splits(datasets)
    if not splits:
        raise ConfigError("need at least one domain to train on")
    for name in splits:
        model.domain(name)
    ratios = cfg.sampling_ratios or {name: 1 for name in splits}
    ratios = {k: v for k, v in ratios.items() if k in splits}
    missing = [n for n in splits if n not in ratios]
    if missing:
        raise ConfigError(f"no sampling ratio for domains {missing}")

    result = TrainResult(model)
    if cfg.total_iters == 0:
        if log_path is not None:
            write_metrics([], log_path)
        return result
    schedule = build_schedule(ratios, cfg.total_iters, cfg.seed)
    result.schedule = schedule
    opt = SGD(model.store, cfg.base_lr, cfg.prompt_lr_scale, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 7])

    for it, name in enumerate(schedule):
        ds = splits[name].train
        picks = rng.choice(len(ds), size=min(cfg.batch_scenes, len(ds)), replace=False)
        batch = make_batch(ds, np.sort(picks), cfg.max_points, int(rng.integers(2**62)))
        model.store.zero_grad()
        with Tape() as tape:
            loss = model.loss(batch, train=True)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at iteration {it} on domain {name!r}")
        tape.backward(loss)
        factor = 1.0
        if cfg.lr_schedule == "cosine":
            factor = 0.5 * (1.0 + math.cos(math.pi * it / cfg.total_iters))
        opt.step(factor)
        result.losses.append(value)

        done = it + 1
        if done == cfg.total_iters or (cfg.eval_every and done % cfg.eval_every == 0):
            for dname, pair in splits.items():
                ev = evaluate(model, pair.val)
                result.metrics.append(
                    {
                        "iter": done,
                        "domain": dname,
                        "split": "val",
                        "miou": ev["miou"],
                        "per_class_iou": ev["per_class_iou"],
                        "loss": ev["loss"],
                    }
                )
    if log_path is not None:
        write_metrics(result.metrics, log_path)
    return result


def joint_train(datasets, model_cfg: ModelConfig, cfg: TrainConfig, log_path=None) -> TrainResult:
    """Train a fresh model on all ``datasets`` (pairs of train/val splits)."""
    return train(SegmentationModel(model_cfg), datasets, cfg, log_path)


def fine_tune(model: SegmentationModel, target: SplitDataset, cfg: TrainConfig, log_path=None) -> TrainResult:
    """Continue training every parameter on ``target`` only.

    Other domains' prompts receive no gradient and their normalisation
    statistics are never visited, so they come out bitwise unchanged.
    """
    name = target.train.domain.name
    if name not in model.cfg.domains:
        raise UnknownDomainError(f"checkpoint has no domain {name!r}; cannot fine-tune on it")
    cfg = TrainConfig(**{**asdict(cfg), "sampling_ratios": {name: 1}})
    return train(model, {name: target}, cfg, log_path)
