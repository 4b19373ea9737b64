"""Multi-flow deformable warping and visibility-weighted fusion.

A multi-flow for one source frame holds, at every target pixel, ``M``
sampling offsets ``(alpha, beta)`` in pixels and an ``M``-tap convex kernel
``omega``. Warping gathers the source at each offset with clamped bilinear
sampling and mixes the samples with ``omega``. Four warped candidates are
then blended per pixel with visibility weights that sum to one.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import kernels
from .functional import softmax, upsample2
from .tensor import ShapeError, Tensor, as_tensor, make_result, mul

N_FRAMES = 4
DEBUG = bool(os.environ.get("MFVFI_DEBUG"))


@dataclass(frozen=True)
class MultiFlow:
    alpha: Tensor  # [B, M, H, W] horizontal offsets (pixels)
    beta: Tensor   # [B, M, H, W] vertical offsets (pixels)
    omega: Tensor  # [B, M, H, W] per-pixel kernel weights

    def __post_init__(self):
        for name in ("alpha", "beta", "omega"):
            object.__setattr__(self, name, as_tensor(getattr(self, name)))
        if not (self.alpha.shape == self.beta.shape == self.omega.shape) or self.alpha.ndim != 4:
            raise ShapeError(f"multi-flow components must share a [B, M, H, W] shape, got "
                             f"{self.alpha.shape}, {self.beta.shape}, {self.omega.shape}")

    @property
    def m(self) -> int:
        return self.alpha.shape[1]

    def check(self, tol: float = 1e-6) -> None:
        w = self.omega.data
        if w.min() < -tol or w.max() > 1 + tol:
            raise ValueError("omega outside [0, 1]")
        err = np.abs(w.sum(axis=1) - 1).max()
        if err > tol:
            raise ValueError(f"omega does not sum to 1 (max error {err:.3g})")


@dataclass(frozen=True)
class VisibilitySet:
    v: Tensor  # [B, 4, H, W]

    def __post_init__(self):
        object.__setattr__(self, "v", as_tensor(self.v))
        if self.v.ndim != 4 or self.v.shape[1] != N_FRAMES:
            raise ShapeError(f"visibility must be [B, {N_FRAMES}, H, W], got {self.v.shape}")

    def check(self, tol: float = 1e-6) -> None:
        v = self.v.data
        if v.min() < -tol or v.max() > 1 + tol:
            raise ValueError("visibility outside [0, 1]")
        err = np.abs(v.sum(axis=1) - 1).max()
        if err > tol:
            raise ValueError(f"visibility does not sum to 1 (max error {err:.3g})")


@dataclass(frozen=True)
class LevelFlows:
    flows: Tuple[MultiFlow, ...]
    visibility: VisibilitySet
    level: int

    def __post_init__(self):
        if len(self.flows) != N_FRAMES:
            raise ShapeError(f"expected {N_FRAMES} multi-flows, got {len(self.flows)}")
        hw = self.visibility.v.shape[2:]
        for f in self.flows:
            if f.alpha.shape[2:] != hw:
                raise ShapeError(f"multi-flow extents {f.alpha.shape[2:]} != visibility extents {hw}")

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.visibility.v.shape[2:]

    def check(self, tol: float = 1e-6) -> None:
        for f in self.flows:
            f.check(tol)
        self.visibility.check(tol)


def warp(frame: Tensor, flow: MultiFlow) -> Tensor:
    """Warp ``frame [B, C, H, W]`` with a multi-flow defined on the same grid."""
    if frame.ndim != 4:
        raise ShapeError(f"warp expects a [B, C, H, W] frame, got {frame.shape}")
    if frame.shape[0] != flow.alpha.shape[0] or frame.shape[2:] != flow.alpha.shape[2:]:
        raise ShapeError(f"frame {frame.shape} and multi-flow {flow.alpha.shape} disagree "
                         "on batch or spatial extents")
    if DEBUG:
        flow.check()
    a, b, w = flow.alpha, flow.beta, flow.omega
    out = kernels.warp_forward(frame.data, a.data, b.data, w.data).astype(frame.dtype, copy=False)

    def bw(g):
        gf, ga, gb, gw = kernels.warp_backward(frame.data, a.data, b.data, w.data, g)
        return (gf.astype(frame.dtype, copy=False), ga.astype(a.dtype, copy=False),
                gb.astype(b.dtype, copy=False), gw.astype(w.dtype, copy=False))
    return make_result(out, (frame, a, b, w), bw)


def fuse(candidates: Sequence[Tensor], visibility: VisibilitySet) -> Tensor:
    """Per-pixel convex blend ``sum_n V_n * candidate_n``."""
    if len(candidates) != N_FRAMES:
        raise ShapeError(f"fuse needs {N_FRAMES} candidates, got {len(candidates)}")
    shape = candidates[0].shape
    if any(c.shape != shape for c in candidates):
        raise ShapeError(f"fuse candidates differ in shape: {[c.shape for c in candidates]}")
    v = visibility.v
    if len(shape) != 4 or v.shape[0] != shape[0] or v.shape[2:] != shape[2:]:
        raise ShapeError(f"visibility {v.shape} does not match candidates {shape}")
    if DEBUG:
        visibility.check()
    vd = v.data
    out = sum(vd[:, n:n + 1] * candidates[n].data for n in range(N_FRAMES))

    def bw(g):
        gc = tuple(g * vd[:, n:n + 1] for n in range(N_FRAMES))
        gv = np.concatenate([(g * candidates[n].data).sum(axis=1, keepdims=True)
                             for n in range(N_FRAMES)], axis=1)
        return gc + (gv,)
    return make_result(out, tuple(candidates) + (v,), bw)


def normalize_heads(raw_alpha: Tensor, raw_beta: Tensor, omega_logits: Tensor,
                    visibility_logits: Tensor, level: int = 0) -> LevelFlows:
    """Turn raw head outputs into valid multi-flows and visibility maps.

    ``raw_alpha``, ``raw_beta`` and ``omega_logits`` are ``[B, 4*M, H, W]``
    with the frame index outermost; ``visibility_logits`` is ``[B, 4, H, W]``.
    Kernel weights are a softmax over the ``M`` taps and visibility a softmax
    over the four frames. Offsets pass through unchanged.
    """
    B, K, H, W = raw_alpha.shape
    if K % N_FRAMES or raw_beta.shape != raw_alpha.shape or omega_logits.shape != raw_alpha.shape:
        raise ShapeError(f"inconsistent head shapes {raw_alpha.shape}, {raw_beta.shape}, "
                         f"{omega_logits.shape}")
    if visibility_logits.shape != (B, N_FRAMES, H, W):
        raise ShapeError(f"visibility logits must be {(B, N_FRAMES, H, W)}, got {visibility_logits.shape}")
    m = K // N_FRAMES
    omega = softmax(omega_logits.reshape((B, N_FRAMES, m, H, W)), axis=2)
    flows = tuple(
        MultiFlow(raw_alpha[:, n * m:(n + 1) * m], raw_beta[:, n * m:(n + 1) * m], omega[:, n])
        for n in range(N_FRAMES))
    return LevelFlows(flows, VisibilitySet(softmax(visibility_logits, axis=1)), level)


def upsample_level_flows(flows: LevelFlows) -> LevelFlows:
    """Bilinearly upsample one level's flows by two; offsets double in magnitude."""
    up = tuple(MultiFlow(mul(upsample2(f.alpha), 2.0), mul(upsample2(f.beta), 2.0), upsample2(f.omega))
               for f in flows.flows)
    return LevelFlows(up, VisibilitySet(upsample2(flows.visibility.v)), flows.level - 1)


def identity_level_flows(batch: int, m: int, h: int, w: int, level: int,
                         dtype=np.float32) -> LevelFlows:
    """Zero offsets, uniform kernels and uniform visibility."""
    zero = Tensor(np.zeros((batch, m, h, w), dtype=dtype))
    uniform = Tensor(np.full((batch, m, h, w), 1.0 / m, dtype=dtype))
    flows = tuple(MultiFlow(zero, zero, uniform) for _ in range(N_FRAMES))
    vis = VisibilitySet(Tensor(np.full((batch, N_FRAMES, h, w), 1.0 / N_FRAMES, dtype=dtype)))
    return LevelFlows(flows, vis, level)


def flow_channels(flows: LevelFlows) -> List[Tensor]:
    """Flatten a level's flow fields into channel blocks for network input."""
    parts: List[Tensor] = []
    for f in flows.flows:
        parts.extend([f.alpha, f.beta, f.omega])
    parts.append(flows.visibility.v)
    return parts


def warp_and_fuse(frames: Sequence[Tensor], flows: LevelFlows) -> Tuple[List[Tensor], Tensor]:
    """Warp each of the four frames with its multi-flow and blend them."""
    warped = [warp(as_tensor(frames[n]), flows.flows[n]) for n in range(N_FRAMES)]
    return warped, fuse(warped, flows.visibility)
