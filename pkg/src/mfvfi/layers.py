"""Parameterized building blocks: conv layers, residual blocks and conv stacks.

Layers are frozen descriptions; their parameters live in a flat mapping from
dotted names to arrays (or leaf tensors while training).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .functional import conv2d, conv3d, instance_norm, prelu
from .tensor import ShapeError, Tensor, add, as_tensor

PRELU_INIT = 0.25
IN_EPS = 1e-5

Params = Mapping[str, object]


def _param(weights: Params, name: str) -> Tensor:
    try:
        return as_tensor(weights[name])
    except KeyError:
        raise KeyError(f"missing parameter {name!r}") from None


@dataclass(frozen=True)
class ConvLayer:
    """Conv -> optional instance norm -> optional PReLU."""

    name: str
    in_ch: int
    out_ch: int
    kernel: Tuple[int, ...]
    stride: Tuple[int, ...]
    padding: Tuple[int, ...]
    norm: bool = False
    act: bool = True
    zero_init: bool = False  # start the kernel at zero (residual branch ends, regression heads)
    bias_init: Optional[Tuple[float, ...]] = None  # initial bias values, zeros when absent

    @classmethod
    def make(cls, name: str, in_ch: int, out_ch: int, k: int = 3, stride=1, dims: int = 2,
             norm: bool = False, act: bool = True, zero_init: bool = False,
             bias_init: Optional[Sequence[float]] = None) -> "ConvLayer":
        stride = (stride,) * dims if isinstance(stride, int) else tuple(stride)
        if bias_init is not None:
            bias_init = tuple(float(b) for b in bias_init)
            if len(bias_init) != out_ch:
                raise ValueError(f"{name}: bias_init has {len(bias_init)} values for {out_ch} channels")
        return cls(name, in_ch, out_ch, (k,) * dims, stride, (k // 2,) * dims, norm, act, zero_init,
                   bias_init)

    @property
    def dims(self) -> int:
        return len(self.kernel)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {f"{self.name}.weight": (self.out_ch, self.in_ch) + self.kernel,
                  f"{self.name}.bias": (self.out_ch,)}
        if self.act:
            shapes[f"{self.name}.slope"] = (self.out_ch,)
        return shapes

    def init(self, rng: np.random.Generator, dtype=np.float32) -> Dict[str, np.ndarray]:
        fan_in = self.in_ch * int(np.prod(self.kernel))
        bound = np.sqrt(6.0 / fan_in)
        out = {}
        for key, shape in self.param_shapes().items():
            if key.endswith(".weight") and self.zero_init:
                out[key] = np.zeros(shape, dtype=dtype)
            elif key.endswith(".weight"):
                out[key] = rng.uniform(-bound, bound, size=shape).astype(dtype)
            elif key.endswith(".slope"):
                out[key] = np.full(shape, PRELU_INIT, dtype=dtype)
            elif self.bias_init is not None:
                out[key] = np.array(self.bias_init, dtype=dtype)
            else:
                out[key] = np.zeros(shape, dtype=dtype)
        return out

    def __call__(self, x: Tensor, weights: Params) -> Tensor:
        conv = conv3d if self.dims == 3 else conv2d
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} input channels, got {x.shape}")
        y = conv(x, _param(weights, f"{self.name}.weight"), _param(weights, f"{self.name}.bias"),
                 self.stride, self.padding)
        if self.norm:
            y = instance_norm(y, IN_EPS)
        if self.act:
            y = prelu(y, _param(weights, f"{self.name}.slope"))
        return y


@dataclass(frozen=True)
class ResBlock:
    """Residual block that halves H and W and keeps T.

    ``out = prelu(norm(conv_b(conv_a(x))) + norm(skip(x)))`` where ``conv_a``
    has spatial stride 2 and ``skip`` is a strided 1x1(x1) projection.
    """

    name: str
    in_ch: int
    out_ch: int
    dims: int = 3

    @property
    def _spatial_stride(self) -> Tuple[int, ...]:
        return (1, 2, 2) if self.dims == 3 else (2, 2)

    @property
    def conv_a(self) -> ConvLayer:
        return ConvLayer.make(f"{self.name}.conv_a", self.in_ch, self.out_ch, 3,
                              self._spatial_stride, self.dims, norm=True, act=True)

    @property
    def conv_b(self) -> ConvLayer:
        return ConvLayer.make(f"{self.name}.conv_b", self.out_ch, self.out_ch, 3, 1,
                              self.dims, norm=True, act=False)

    @property
    def skip(self) -> ConvLayer:
        return ConvLayer.make(f"{self.name}.skip", self.in_ch, self.out_ch, 1,
                              self._spatial_stride, self.dims, norm=True, act=False)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for layer in (self.conv_a, self.conv_b, self.skip):
            shapes.update(layer.param_shapes())
        shapes[f"{self.name}.slope"] = (self.out_ch,)
        return shapes

    def init(self, rng: np.random.Generator, dtype=np.float32) -> Dict[str, np.ndarray]:
        out = {}
        for layer in (self.conv_a, self.conv_b, self.skip):
            out.update(layer.init(rng, dtype))
        out[f"{self.name}.slope"] = np.full((self.out_ch,), PRELU_INIT, dtype=dtype)
        return out

    def __call__(self, x: Tensor, weights: Params) -> Tensor:
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ShapeError(f"{self.name}: spatial extents must be even, got {h}x{w}")
        y = self.conv_b(self.conv_a(x, weights), weights)
        return prelu(add(y, self.skip(x, weights)), _param(weights, f"{self.name}.slope"))


def conv_stack_forward(layers: Sequence[ConvLayer], x: Tensor, weights: Params) -> Tensor:
    """Apply ``layers`` in order; an empty stack is the identity."""
    for prev, nxt in zip(layers, layers[1:]):
        if prev.out_ch != nxt.in_ch:
            raise ShapeError(f"conv stack chain mismatch: {prev.name} emits {prev.out_ch} "
                             f"channels but {nxt.name} expects {nxt.in_ch}")
    for layer in layers:
        x = layer(x, weights)
    return x


def resblock_forward(block: ResBlock, x: Tensor, weights: Params) -> Tensor:
    return block(x, weights)
