"""Mini-batch MSE training with Adam and global-norm gradient clipping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .features import NormalizationStats, Window, fit_normalization
from .hurdat2 import StormTrack
from .model import ModelConfig, ModelParams, TyphoFormer, forward_normalized
from .prompt_bank import PromptBank

log = logging.getLogger(__name__)


class NoTrainingData(ValueError):
    pass


class NoData(ValueError):
    pass


class DivergedLoss(ArithmeticError):
    def __init__(self, epoch: int, value: float):
        self.epoch = epoch
        self.value = value
        super().__init__(f"non-finite loss {value} at epoch {epoch}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    grad_clip_norm: float = 1.0
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be > 0")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_path: str | None = None

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "seconds"])
            for i, (loss_, sec) in enumerate(zip(self.losses, self.seconds), start=1):
                w.writerow([i, repr(loss_), f"{sec:.3f}"])


def loss(pred, target) -> ad.Tensor:
    """MSE over every (horizon, coordinate) entry, in normalized space."""
    return ad.mse(pred, target)


class Adam:
    def __init__(self, params: ModelParams, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            # fresh array: never mutate data a live graph may have saved
            t.data = t.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def global_grad_norm(params: ModelParams) -> float:
    return math.sqrt(sum(float(np.sum(t.grad * t.grad)) for _, t in params.items() if t.grad is not None))


def clip_grad_norm(params: ModelParams, max_norm: float) -> float:
    """Rescale all grads so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for _, t in params.items():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


@dataclass
class Batchable:
    """Windows converted once into the arrays the network consumes."""

    x: np.ndarray  # (N, T, d_feat) normalized
    p: np.ndarray  # (N, d_txt) or (N, T, d_txt)
    last: np.ndarray  # (N, 2) normalized
    target: np.ndarray  # (N, K, 2) normalized

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "Batchable":
        return Batchable(self.x[idx], self.p[idx], self.last[idx], self.target[idx])


def prepare(windows: Sequence[Window], prompts: PromptBank, model: TyphoFormer) -> Batchable:
    return Batchable(
        x=model.normalize_inputs(windows),
        p=prompts.window_vectors(windows, model.config.prompt_mode),
        last=model.normalize_positions(model.last_positions(windows)),
        target=model.normalize_positions(np.stack([w.targets for w in windows])),
    )


def batch_loss(batch: Batchable, model: TyphoFormer) -> ad.Tensor:
    pred = forward_normalized(batch.x, batch.p, batch.last, model.params, model.config)
    return loss(pred, batch.target)


def stats_from_windows(windows: Sequence[Window]) -> NormalizationStats:
    """Fallback normalization from the distinct input records of ``windows``."""
    seen = {}
    for w in windows:
        for r in w.input_records:
            seen.setdefault((w.storm, r.timestamp), (w.storm, r))
    by_storm: dict = {}
    for storm, r in seen.values():
        by_storm.setdefault(storm, []).append(r)
    tracks = [StormTrack(s, tuple(sorted(rs, key=lambda r: r.timestamp))) for s, rs in by_storm.items()]
    return fit_normalization(tracks)


def train(
    windows: Sequence[Window],
    prompts: PromptBank,
    model_config: ModelConfig,
    train_config: TrainConfig,
    stats: NormalizationStats | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> tuple[TyphoFormer, TrainReport]:
    """Fit a fresh model. Deterministic for a given seed, data and config."""
    if not windows:
        raise NoTrainingData("no training windows")
    if stats is None:
        stats = stats_from_windows(windows)
    model = TyphoFormer.initialize(model_config, stats, seed=train_config.seed)
    data = prepare(windows, prompts, model)
    opt = Adam(model.params, train_config.lr, train_config.betas, train_config.adam_eps)
    shuffle_rng = np.random.default_rng([train_config.seed, 1])
    report = TrainReport()
    n = len(data)
    bs = train_config.batch_size
    t_start = time.perf_counter()

    for epoch in range(1, train_config.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        total = 0.0
        for i in range(0, n, bs):
            batch = data.take(order[i:i + bs])
            model.params.zero_grad()
            value = batch_loss(batch, model)
            value.backward()
            clip_grad_norm(model.params, train_config.grad_clip_norm)
            opt.step()
            total += value.item() * len(batch)
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise DivergedLoss(epoch, epoch_loss)
        report.losses.append(epoch_loss)
        report.seconds.append(time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        if (train_config.checkpoint_path and train_config.checkpoint_every
                and epoch % train_config.checkpoint_every == 0):
            model.save(train_config.checkpoint_path)

    model.params.zero_grad()
    report.wall_time = time.perf_counter() - t_start
    if train_config.checkpoint_path:
        model.save(train_config.checkpoint_path)
        report.checkpoint_path = str(train_config.checkpoint_path)
    return model, report


def evaluate_loss(windows: Sequence[Window], prompts: PromptBank, model: TyphoFormer) -> float:
    """Mean per-window loss, no graph built."""
    if not windows:
        raise NoData("no windows to evaluate")
    data = prepare(windows, prompts, model)
    with ad.no_grad():
        return batch_loss(data, model).item()
