"""Training loop: sampled crops, group sizes and modalities, AdamW updates."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .errors import Gar3dError
from .losses import LossBreakdown, total_loss
from .model import GroupAutoregressiveModel
from .numkernel import Rng
from .synthdata import sample_modalities

CSV_COLUMNS = ("step",) + LossBreakdown.CSV_FIELDS


class TrainingDiverged(Gar3dError):
    """Raised when the loss becomes non-finite."""


class AdamW:
    """Adam with decoupled weight decay over a flat list of tensors."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the norm before."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 3e-3
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    seq_min: int = 4
    seq_max: int = 8
    seed: int = 0
    warmup: int = 50
    schedule: str = "cosine"      # or "constant"


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to zero at ``cfg.steps`` (1-based steps)."""
    if cfg.schedule == "constant":
        return cfg.lr
    if cfg.schedule != "cosine":
        raise Gar3dError(f"unknown schedule {cfg.schedule!r}")
    if cfg.warmup and step <= cfg.warmup:
        return cfg.lr * step / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    return 0.5 * cfg.lr * (1 + np.cos(np.pi * min(step - cfg.warmup, span) / span))


@dataclass
class Batch:
    scene_index: int
    start: int
    length: int
    group_size: int
    modal_seed: int
    perm_seed: int


def sample_batch(cfg: TrainConfig, step: int, n_scenes: int, scene_len: int) -> Batch:
    """Deterministic per-step draw of scene, crop, group size and seeds."""
    rng = Rng(cfg.seed).child(step)
    length = int(rng.integers(min(cfg.seq_min, scene_len), min(cfg.seq_max, scene_len) + 1))
    return Batch(
        scene_index=int(rng.integers(0, n_scenes)),
        start=int(rng.integers(0, scene_len - length + 1)),
        length=length,
        group_size=int(rng.integers(1, length + 1)),
        modal_seed=int(rng.integers(0, 2 ** 31)),
        perm_seed=int(rng.integers(0, 2 ** 31)),
    )


def train_step(model: GroupAutoregressiveModel, opt: AdamW, scene, batch: Batch, grad_clip: float):
    crop = scene.crop(batch.start, batch.length)
    mask = sample_modalities(batch.modal_seed, len(crop))
    frames = crop.bundles(mask, seed=batch.modal_seed)
    model.zero_grad()
    out = model.forward_offline(frames, group_size=batch.group_size)
    losses = total_loss(out, crop, batch.perm_seed)
    val = float(losses.total.item())
    if not np.isfinite(val):
        return losses, False
    nk.backward(losses.total)
    clip_grad_norm(opt.params, grad_clip)
    opt.step()
    return losses, True


def train(model: GroupAutoregressiveModel, scenes: list, cfg: TrainConfig, csv_path=None,
          progress=None) -> list:
    """Run ``cfg.steps`` updates; returns one dict per step (also written as CSV).

    Raises:
        TrainingDiverged: the total loss became NaN or infinite.
    """
    if not scenes:
        raise Gar3dError("training needs at least one scene")
    scene_len = min(len(s) for s in scenes)
    opt = AdamW(model.parameters(), cfg.lr, weight_decay=cfg.weight_decay)
    rows = []
    fh = open(csv_path, "w", newline="") if csv_path else None
    try:
        writer = csv.writer(fh, lineterminator="\n") if fh else None
        if writer:
            writer.writerow(CSV_COLUMNS)
        for step in range(1, cfg.steps + 1):
            batch = sample_batch(cfg, step, len(scenes), scene_len)
            opt.lr = learning_rate(cfg, step)
            losses, ok = train_step(model, opt, scenes[batch.scene_index], batch, cfg.grad_clip)
            if not ok:
                dump = f"step={step} batch={batch} seed={cfg.seed}"
                if csv_path:
                    Path(csv_path).with_suffix(".diverged.txt").write_text(dump + "\n")
                raise TrainingDiverged(f"non-finite loss at {dump}")
            row = {"step": step, **losses.values()}
            rows.append(row)
            if writer:
                writer.writerow([step] + [repr(row[k]) for k in CSV_COLUMNS[1:]])
            if progress:
                progress(row)
    finally:
        if fh:
            fh.close()
    return rows


def moving_average(x, window: int) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` entries average what is available."""
    x = np.asarray(x, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], x]))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class CurriculumSummary:
    rel_initial: float
    rel_final: float
    rel_drop: float
    rel_half_step: int | None
    abs_initial: float
    abs_onset_step: int | None

    @property
    def abs_after_rel(self) -> bool:
        if self.abs_onset_step is None:
            return False
        return self.rel_half_step is not None and self.abs_onset_step >= self.rel_half_step


def curriculum_summary(rows: list, window: int = 10, abs_decline: float = 0.9) -> CurriculumSummary:
    """Trend statistics of rel_point and abs_point over a training log.

    The initial level is the mean of the first ``window`` steps and the final
    level the trailing ``window``-step mean. The rel half step is the first
    step at which the trailing mean of rel_point is at most half its initial
    level; the abs onset is the first step at which the trailing mean of
    abs_point has dropped below ``abs_decline`` times its initial level.
    """
    rel = np.array([r["rel_point"] for r in rows])
    ab = np.array([r["abs_point"] for r in rows])
    steps = np.array([r["step"] for r in rows])
    rel_ma = moving_average(rel, window)
    abs_ma = moving_average(ab, window)
    rel0 = float(rel[:window].mean())
    abs0 = float(ab[:window].mean())
    half = np.nonzero(rel_ma[window - 1:] <= 0.5 * rel0)[0]
    onset = np.nonzero(abs_ma[window - 1:] <= abs_decline * abs0)[0]
    return CurriculumSummary(
        rel_initial=rel0,
        rel_final=float(rel_ma[-1]),
        rel_drop=1.0 - float(rel_ma[-1]) / rel0,
        rel_half_step=int(steps[window - 1 + half[0]]) if len(half) else None,
        abs_initial=abs0,
        abs_onset_step=int(steps[window - 1 + onset[0]]) if len(onset) else None,
    )
