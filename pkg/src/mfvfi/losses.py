"""Training objective: Laplacian pyramid L1 plus multi-scale Charbonnier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .functional import pyr_down, pyr_up
from .tensor import ShapeError, Tensor, abs_, add, as_tensor, mean, mul, sqrt, square, sub

LAP_LEVELS = 5  # loss levels, counting the low-pass residual
CHARB_EPS = 1e-3
DEFAULT_LAMBDA = 0.01


@dataclass
class LaplacianPyramid:
    bands: List[Tensor]   # band s has extents H/2^(s-1) x W/2^(s-1)
    residual: Tensor      # low-pass remainder at H/2^levels

    def reconstruct(self) -> Tensor:
        x = self.residual
        for band in reversed(self.bands):
            x = add(pyr_up(x), band)
        return x


def laplacian_pyramid(image, levels: int = LAP_LEVELS) -> LaplacianPyramid:
    """Band-pass decomposition with a 5-tap binomial blur and mirror borders."""
    image = as_tensor(image)
    h, w = image.shape[-2:]
    d = 2 ** levels
    if h % d or w % d:
        raise ShapeError(f"laplacian_pyramid: extents {h}x{w} must be divisible by {d}")
    bands = []
    current = image
    for _ in range(levels):
        down = pyr_down(current)
        bands.append(sub(current, pyr_up(down)))
        current = down
    return LaplacianPyramid(bands, current)


def pyramid_levels(image, levels: int = LAP_LEVELS) -> List[Tensor]:
    """``levels - 1`` band-pass bands followed by the low-pass residual."""
    pyr = laplacian_pyramid(image, levels - 1)
    return pyr.bands + [pyr.residual]


def loss_lap(output, target, levels: int = LAP_LEVELS) -> Tensor:
    """``sum_s 2^(s-1) * mean|L^s(output) - L^s(target)|`` as a scalar tensor.

    Level ``s`` has extents ``H/2^(s-1)``; the coarsest level is the low-pass
    residual, so mean colour is constrained along with detail.
    """
    output, target = as_tensor(output), as_tensor(target)
    if output.shape != target.shape:
        raise ShapeError(f"loss_lap: shapes differ, {output.shape} vs {target.shape}")
    # the pyramid is linear, so one decomposition of the difference suffices
    total = None
    for s, band in enumerate(pyramid_levels(sub(output, target), levels), start=1):
        term = mul(mean(abs_(band)), float(2 ** (s - 1)))
        total = term if total is None else add(total, term)
    return total


def charbonnier(x: Tensor, eps: float = CHARB_EPS) -> Tensor:
    return sqrt(add(square(x), eps * eps))


def loss_charb(fused: Sequence, targets: Sequence) -> Tensor:
    """``sum_l 2^l * mean(charbonnier(fused_l - target_l))`` for levels ``l = 1..len``.

    ``fused[i]`` and ``targets[i]`` belong to level ``i + 1``. An empty
    sequence gives zero.
    """
    if len(fused) != len(targets):
        raise ShapeError(f"loss_charb: {len(fused)} fused levels but {len(targets)} targets")
    total = Tensor(np.zeros(1, dtype=as_tensor(fused[0]).dtype if fused else np.float32))
    for level, (f, t) in enumerate(zip(fused, targets), start=1):
        f, t = as_tensor(f), as_tensor(t)
        if f.shape != t.shape:
            raise ShapeError(f"loss_charb level {level}: {f.shape} vs {t.shape}")
        total = add(total, mul(mean(charbonnier(sub(f, t))), float(2 ** level)))
    return total


@dataclass
class LossReport:
    lap: float
    charb: float
    total: float
    lam: float
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)


def loss_total(output, target, fused_levels: Sequence, target_levels: Sequence,
               lam: float = DEFAULT_LAMBDA) -> LossReport:
    """``loss_lap + lam * loss_charb``; ``.tensor`` holds the differentiable total."""
    lap = loss_lap(output, target)
    charb = loss_charb(fused_levels, target_levels)
    total = add(lap, mul(charb, float(lam)))
    return LossReport(lap.item(), charb.item(), total.item(), lam, total)
