"""Central-difference verification of analytic gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import functional as F
from .losses import loss_charb, loss_lap
from .multiflow import MultiFlow, VisibilitySet, fuse, warp
from .tensor import Tensor, backward, mul, sum_

REL_FLOOR = 1e-8
KINK_TOL = 1e-13


def _scalarize(out: Tensor, seed: int = 12345) -> Tensor:
    """Reduce any output to a scalar with a fixed random projection."""
    if out.data.size == 1:
        return sum_(out)
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return sum_(mul(out, Tensor(r.astype(out.dtype))))


def finite_diff_check(op: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-4,
                      piecewise_linear: bool = False) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op`` maps tensors to a tensor; non-scalar outputs are projected onto a
    fixed random direction. Every coordinate of every input is perturbed.
    With ``piecewise_linear``, coordinates whose perturbation crosses a kink
    (non-zero second difference) are skipped; elsewhere the difference is exact.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = _scalarize(op(*leaves))
    f0 = out.item()
    grads = backward(out, leaves)
    kink_tol = KINK_TOL * max(1.0, abs(f0))

    def value(args) -> float:
        return _scalarize(op(*[Tensor(a) for a in args])).item()

    worst = 0.0
    for i, arr in enumerate(arrays):
        analytic = grads[leaves[i]]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            hi = value(arrays)
            arr[idx] = orig - step
            lo = value(arrays)
            arr[idx] = orig
            if piecewise_linear and abs(hi + lo - 2 * f0) > kink_tol:
                continue
            numeric = (hi - lo) / (2 * step)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# randomized cases for each differentiable operator
# ---------------------------------------------------------------------------

Case = Tuple[Callable[..., Tensor], List[np.ndarray], float]  # op, inputs, step


def _offsets(rng, shape, span: int = 2) -> np.ndarray:
    """Offsets whose fractional part stays at least 0.15 away from any integer."""
    return rng.integers(-span, span + 1, size=shape) + rng.uniform(0.15, 0.85, size=shape)


def case_conv2d(rng) -> Case:
    b, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = rng.integers(k, 7, size=2)
    op = lambda x, kk, bb: F.conv2d(x, kk, bb, s, p)
    return op, [rng.standard_normal((b, c, h, w)), rng.standard_normal((o, c, k, k)),
                rng.standard_normal(o)], 1e-2


def case_conv3d(rng) -> Case:
    b, c, o = 1, rng.integers(1, 3), rng.integers(1, 3)
    k = int(rng.choice([1, 3]))
    s = (1, int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    t, h, w = rng.integers(max(k - 2, 1), 5, size=3)
    op = lambda x, kk, bb: F.conv3d(x, kk, bb, s, 1)
    return op, [rng.standard_normal((b, c, t, h, w)), rng.standard_normal((o, c, k, k, k)),
                rng.standard_normal(o)], 1e-2


def case_bilinear_resize(rng) -> Case:
    h, w = rng.integers(1, 6, size=2)
    oh, ow = rng.integers(1, 9, size=2)
    op = lambda x: F.bilinear_resize(x, int(oh), int(ow))
    return op, [rng.standard_normal((1, 2, h, w))], 1e-2


def case_avg_pool2(rng) -> Case:
    h, w = 2 * rng.integers(1, 4, size=2)
    return F.avg_pool2, [rng.standard_normal((2, 2, h, w))], 1e-2


def case_softmax(rng) -> Case:
    shape = tuple(rng.integers(1, 5, size=3))
    axis = int(rng.integers(0, 3))
    return (lambda x: F.softmax(x, axis)), [rng.standard_normal(shape) * 2], 1e-4


def case_instance_norm(rng) -> Case:
    nd = int(rng.choice([2, 3]))
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3))) + tuple(rng.integers(2, 5, size=nd))
    return F.instance_norm, [rng.standard_normal(shape)], 1e-4


def case_prelu(rng) -> Case:
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 0.05] = 0.5  # keep away from the kink
    return F.prelu, [x, rng.uniform(0, 0.5, size=3)], 1e-2


def case_warp(rng) -> Case:
    b, c, m = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 5)
    h, w = rng.integers(3, 7, size=2)
    frame = rng.standard_normal((b, c, h, w))
    alpha, beta = _offsets(rng, (b, m, h, w)), _offsets(rng, (b, m, h, w))
    omega = rng.dirichlet(np.ones(m), size=(b, h, w)).transpose(0, 3, 1, 2)

    def op(f, a, bb, o):
        return warp(f, MultiFlow(a, bb, o))
    return op, [frame, alpha, beta, omega], 1e-3


def case_fuse(rng) -> Case:
    b, c = rng.integers(1, 3), rng.integers(1, 4)
    h, w = rng.integers(2, 6, size=2)
    cands = [rng.standard_normal((b, c, h, w)) for _ in range(4)]
    vis = rng.dirichlet(np.ones(4), size=(b, h, w)).transpose(0, 3, 1, 2)

    def op(c0, c1, c2, c3, v):
        return fuse([c0, c1, c2, c3], VisibilitySet(v))
    return op, cands + [vis], 1e-2


def case_loss_lap(rng) -> Case:
    shape = (1, int(rng.integers(1, 3)), 16, 16)
    return loss_lap, [rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)], 1e-3


def case_loss_charb(rng) -> Case:
    levels = int(rng.integers(1, 4))
    shapes = [(1, 2, 16 >> l, 16 >> l) for l in range(1, levels + 1)]
    arrays = [rng.standard_normal(s) * 0.1 for s in shapes] + [rng.standard_normal(s) * 0.1 for s in shapes]

    def op(*xs):
        return loss_charb(list(xs[:levels]), list(xs[levels:]))
    return op, arrays, 2e-7


@dataclass(frozen=True)
class OpCheck:
    build: Callable[[np.random.Generator], Case]
    tolerance: float
    piecewise_linear: bool = False


OPS: Dict[str, OpCheck] = {
    "warp": OpCheck(case_warp, 1e-4),
    "fuse": OpCheck(case_fuse, 1e-4),
    "conv2d": OpCheck(case_conv2d, 1e-6),
    "conv3d": OpCheck(case_conv3d, 1e-6),
    "bilinear_resize": OpCheck(case_bilinear_resize, 1e-6),
    "avg_pool2": OpCheck(case_avg_pool2, 1e-6),
    "softmax": OpCheck(case_softmax, 1e-6),
    "instance_norm": OpCheck(case_instance_norm, 1e-6),
    "prelu": OpCheck(case_prelu, 1e-6),
    "loss_lap": OpCheck(case_loss_lap, 1e-6, piecewise_linear=True),
    "loss_charb": OpCheck(case_loss_charb, 1e-6),
}


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    tolerance: float
    trials: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def run_check(name: str, trials: int = 20, seed: int = 0) -> CheckResult:
    spec = OPS[name]
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        op, inputs, step = spec.build(rng)
        worst = max(worst, finite_diff_check(op, inputs, step, spec.piecewise_linear))
    return CheckResult(name, worst, spec.tolerance, trials, time.perf_counter() - t0)
