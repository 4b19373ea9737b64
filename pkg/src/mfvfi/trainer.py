"""AdaMax, plateau scheduling, synthetic motion clips and the toy training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .losses import DEFAULT_LAMBDA, LossReport, loss_total
from .metrics import psnr
from .model import ModelConfig, ModelWeights, downsample_frames, forward, init_weights
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

BASELINE_SEED0 = 1_000_000  # held-out clips start here; training seeds stay below
TRAIN_SEED_RANGE = 1_000_000


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdaMaxState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    u: Dict[str, np.ndarray] = field(default_factory=dict)


def adamax_step(state: AdaMaxState, params: Mapping[str, np.ndarray],
                grads: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """One AdaMax update; returns new parameter arrays and advances ``state``.

    Elements whose infinity-norm accumulator is still zero are left alone.
    """
    for name, p in params.items():
        if np.shape(grads[name]) != np.shape(p):
            raise ValueError(f"gradient for {name!r} has shape {np.shape(grads[name])}, "
                             f"parameter has {np.shape(p)}")
    state.t += 1
    correction = 1.0 - state.beta1 ** state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        u = state.u.get(name)
        if m is None:
            m = np.zeros_like(p)
            u = np.zeros_like(p)
        m = state.beta1 * m + (1 - state.beta1) * g
        u = np.maximum(state.beta2 * u, np.abs(g))
        state.m[name], state.u[name] = m, u
        safe_u = np.where(u > 0, u, 1)
        step = np.where(u > 0, state.lr * ((m / correction) / safe_u), 0)
        out[name] = (p - step).astype(p.dtype, copy=False)
    return out


@dataclass
class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without improvement (higher is better)."""

    current_lr: float = 1e-3
    patience: int = 5
    factor: float = 0.5
    threshold: float = 1e-4
    best_metric: float = -math.inf
    epochs_since_improvement: int = 0

    def step(self, metric: float) -> "PlateauScheduler":
        if metric >= self.best_metric + self.threshold:
            self.best_metric = metric
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
            if self.epochs_since_improvement >= self.patience:
                self.current_lr *= self.factor
                self.epochs_since_improvement = 0
        return self


def scheduler_step(sched: PlateauScheduler, validation_metric: float) -> PlateauScheduler:
    return sched.step(validation_metric)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

FRAME_TIMES = (0.0, 1.0, 2.0, 3.0)
TARGET_TIME = 1.5


@dataclass
class Quintuplet:
    frames: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]  # each [3, h, w]
    target: np.ndarray                                               # [3, h, w] at t = 1.5

    def stacked(self) -> np.ndarray:
        """Frames as ``[3, 4, h, w]``."""
        return np.stack(self.frames, axis=1)


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel ``[i - 0.5, i + 0.5]`` covered by ``[lo, hi]``."""
    centers = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(centers + 0.5, hi) - np.maximum(centers - 0.5, lo), 0.0, 1.0)


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((3, h, w))
    for c in range(3):
        acc = np.full((h, w), rng.uniform(0.3, 0.7))
        for _ in range(3):
            fx, fy = rng.uniform(-0.25, 0.25, size=2)
            acc += rng.uniform(0.03, 0.1) * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
        img[c] = acc
    return img


def gen_synthetic_quintuplet(seed: int, h: int = 64, w: int = 64, max_speed: float = 4.0) -> Quintuplet:
    """Render 2-4 moving shaded rectangles over a static texture.

    Each rectangle translates with a constant velocity in ``[-max_speed, max_speed]``
    pixels per frame. Pixels integrate exact area coverage, so sub-pixel
    positions render consistently and the target is the scene at t = 1.5.
    """
    if max_speed > min(h, w) / 8:
        raise ValueError(f"max_speed {max_speed} exceeds min(h, w)/8 = {min(h, w) / 8}")
    rng = np.random.default_rng(seed)
    background = _texture(rng, h, w)
    rects = []
    for _ in range(int(rng.integers(2, 5))):
        rw, rh = rng.uniform(min(h, w) / 8, min(h, w) / 3, size=2)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)  # centre at t = 1.5
        vx, vy = rng.uniform(-max_speed, max_speed, size=2)
        color = rng.uniform(0.05, 0.95, size=3)
        grad = rng.uniform(-0.3, 0.3, size=(3, 2)) / max(rw, rh)
        rects.append((rw, rh, cx, cy, vx, vy, color, grad))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    def render(t: float) -> np.ndarray:
        img = background.copy()
        for rw, rh, cx, cy, vx, vy, color, grad in rects:
            px = cx + vx * (t - TARGET_TIME)
            py = cy + vy * (t - TARGET_TIME)
            cov = _coverage(py - rh / 2, py + rh / 2, h)[:, None] * _coverage(px - rw / 2, px + rw / 2, w)[None, :]
            fill = color[:, None, None] + grad[:, :1, None] * (xx - px) + grad[:, 1:, None] * (yy - py)
            img = img * (1 - cov) + fill * cov
        return np.clip(img, 0.0, 1.0).astype(np.float32)

    return Quintuplet(tuple(render(t) for t in FRAME_TIMES), render(TARGET_TIME))


def make_batch(seeds, h: int, w: int, max_speed: float) -> Tuple[np.ndarray, np.ndarray]:
    """Frames ``[B, 3, 4, h, w]`` and targets ``[B, 3, h, w]``."""
    qs = [gen_synthetic_quintuplet(int(s), h, w, max_speed) for s in seeds]
    return np.stack([q.stacked() for q in qs]), np.stack([q.target for q in qs])


def overlay_psnr(q: Quintuplet) -> float:
    return psnr(0.5 * (q.frames[1].astype(np.float64) + q.frames[2]), q.target)


def overlay_baseline(n: int = 64, h: int = 64, w: int = 64, max_speed: float = 4.0,
                     seed0: int = BASELINE_SEED0) -> float:
    """Mean PSNR of the motionless ``(I1 + I2) / 2`` predictor over held-out clips."""
    return float(np.mean([overlay_psnr(gen_synthetic_quintuplet(seed0 + i, h, w, max_speed))
                          for i in range(n)]))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    lap: float
    charb: float
    total: float
    lr: float
    val_psnr: float

    def csv(self) -> str:
        return (f"{self.epoch},{self.lap:.8g},{self.charb:.8g},{self.total:.8g},"
                f"{self.lr:.8g},{self.val_psnr:.6f}")


METRICS_HEADER = "epoch,lap,charb,total,lr,val_psnr"


@dataclass
class TrainSettings:
    epochs: int = 30
    batches_per_epoch: int = 40
    batch_size: int = 2
    seed: int = 0
    h: int = 64
    w: int = 64
    max_speed: float = 4.0
    val_size: int = 64
    lr: float = 1e-3
    lam: float = DEFAULT_LAMBDA


def step_loss(frames: np.ndarray, target: np.ndarray, config: ModelConfig, params,
              lam: float = DEFAULT_LAMBDA):
    """Forward pass plus objective for one batch; returns the loss report."""
    art = forward(Tensor(frames), config, params)
    targets = downsample_frames(Tensor(target), config.L0)
    fused = [art.fused[l] for l in range(1, config.L0 + 1)]
    return loss_total(art.raw_output, targets[0], fused, targets[1:], lam)


def evaluate(config: ModelConfig, weights, clips: List[Tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean PSNR of the clamped output over ``(frames, target)`` batches."""
    scores = []
    with no_grad():
        for frames, target in clips:
            out = forward(Tensor(frames), config, weights).output.data
            scores.extend(psnr(o, t) for o, t in zip(out, target))
    return float(np.mean(scores))


def validation_set(settings: TrainSettings, chunk: int = 8):
    seeds = [BASELINE_SEED0 + i for i in range(settings.val_size)]
    return [make_batch(seeds[i:i + chunk], settings.h, settings.w, settings.max_speed)
            for i in range(0, len(seeds), chunk)]


def train_toy(config: ModelConfig, settings: Optional[TrainSettings] = None,
              on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
              on_step: Optional[Callable[[int, LossReport], None]] = None,
              ) -> Tuple[ModelWeights, List[EpochMetrics]]:
    """Train on synthetic clips; deterministic for a given seed.

    ``on_epoch`` receives each epoch's metrics and ``on_step`` each batch's
    loss report (before the update).
    """
    settings = settings or TrainSettings()
    weights = init_weights(config, settings.seed)
    if settings.epochs == 0:
        return weights, []
    rng = np.random.default_rng(settings.seed + 1)
    opt = AdaMaxState(lr=settings.lr)
    sched = PlateauScheduler(current_lr=settings.lr)
    val = validation_set(settings)
    log: List[EpochMetrics] = []
    step = 0
    for epoch in range(settings.epochs):
        sums = np.zeros(3)
        lr = sched.current_lr
        opt.lr = lr
        for _ in range(settings.batches_per_epoch):
            seeds = rng.integers(0, TRAIN_SEED_RANGE, size=settings.batch_size)
            frames, target = make_batch(seeds, settings.h, settings.w, settings.max_speed)
            leaves = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
            report = step_loss(frames, target, config, leaves, settings.lam)
            if not np.isfinite(report.total):
                raise TrainingDiverged(step, report.total)
            if on_step:
                on_step(step, report)
            grads = backward(report.tensor, leaves.values())
            weights = adamax_step(opt, weights, {k: grads[leaves[k]] for k in weights})
            sums += (report.lap, report.charb, report.total)
            step += 1
        sums /= settings.batches_per_epoch
        val_psnr = evaluate(config, weights, val)
        sched.step(val_psnr)
        entry = EpochMetrics(epoch, *sums, lr, val_psnr)
        log.append(entry)
        logger.info("epoch %d: %s", epoch, entry.csv())
        if on_epoch:
            on_epoch(entry)
    return weights, log
