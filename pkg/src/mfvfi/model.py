"""Coarse-to-fine multi-flow interpolation network.

Data flow for four input frames ``[B, 3, 4, H, W]``:

1. a residual 3D CNN builds features ``phi^1..phi^L`` (each halving H, W);
2. multi-flow blocks run from level ``L0`` down to 0, each warping the
   downsampled frames with the upsampled coarser flows and predicting
   residual offsets, kernel logits and visibility logits;
3. every level's four warped frames are blended into a candidate;
4. per-frame context maps are warped with the finest flows and blended;
5. a three-row grid network fuses the three finest candidates and the
   context into the output frame.
"""

from __future__ import annotations

import json
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .functional import avg_pool2, fold_time, upsample2
from .layers import ConvLayer, ResBlock, conv_stack_forward
from .multiflow import (N_FRAMES, LevelFlows, flow_channels, fuse, identity_level_flows,
                        normalize_heads, upsample_level_flows, warp, warp_and_fuse)
from .tensor import ShapeError, Tensor, add, as_tensor, clip, concat, reshape, transpose

SYNTH_ROWS = 3
IN_CH = 3

ModelWeights = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    L: int = 6
    L0: int = 3
    M: int = 25
    use_3d: bool = True
    channels: Tuple[int, ...] = (32, 48, 64, 96, 128, 160)
    mfb_width: int = 96
    mfb_layers: int = 4
    context_channels: int = 64
    synth_widths: Tuple[int, ...] = (32, 64, 96)
    synth_columns: int = 6

    # the network is trained for the temporal midpoint only
    t = 1.5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "synth_widths", tuple(int(c) for c in self.synth_widths))
        if not 0 <= self.L0 < self.L:
            raise ValueError(f"need 0 <= L0 < L, got L0={self.L0}, L={self.L}")
        if self.M < 1:
            raise ValueError(f"M must be positive, got {self.M}")
        if len(self.channels) != self.L:
            raise ValueError(f"channels needs {self.L} entries, got {len(self.channels)}")
        if len(self.synth_widths) != SYNTH_ROWS:
            raise ValueError(f"synth_widths needs {SYNTH_ROWS} entries")
        if self.synth_columns < 2 or self.synth_columns % 2:
            raise ValueError("synth_columns must be an even number >= 2")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Miniature configuration for desk-scale training on 64x64 clips."""
        base = dict(L=5, L0=2, M=9, channels=(16, 24, 32, 48, 64), mfb_width=32, mfb_layers=3,
                    context_channels=8, synth_widths=(16, 24, 32), synth_columns=4)
        base.update(overrides)
        return cls(**base)

    @property
    def divisor(self) -> int:
        """Required divisor of H and W."""
        return 2 ** max(self.L, SYNTH_ROWS - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["synth_widths"] = list(self.synth_widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


@dataclass
class ForwardArtifacts:
    pyramid: List[Tensor]                    # phi^1..phi^L, each [B, C_l, 4, H/2^l, W/2^l]
    level_flows: Dict[int, LevelFlows]       # levels L0..0
    fused: Dict[int, Tensor]                 # levels L0..0, [B, 3, H/2^l, W/2^l]
    warped_context: Tensor                   # [B, Cc, H, W]
    raw_output: Tensor                       # unclamped synthesis output
    output: Tensor = field(default=None)     # clamped to [0, 1]


# ---------------------------------------------------------------------------
# architecture description
# ---------------------------------------------------------------------------

def feature_blocks(config: ModelConfig) -> List[ResBlock]:
    dims = 3 if config.use_3d else 2
    widths = (IN_CH,) + config.channels
    return [ResBlock(f"feat.{l}", widths[l - 1], widths[l], dims) for l in range(1, config.L + 1)]


def feature_channels(config: ModelConfig, level: int) -> int:
    return IN_CH if level == 0 else config.channels[level - 1]


def mfb_input_channels(config: ModelConfig, level: int) -> int:
    warped = IN_CH * N_FRAMES
    phi = feature_channels(config, level) * N_FRAMES
    flows = N_FRAMES * 3 * config.M + N_FRAMES
    return warped + phi + config.mfb_width + flows


def tap_lattice(m: int) -> List[Tuple[int, int]]:
    """The ``m`` integer offsets ``(dx, dy)`` nearest the origin in Chebyshev distance.

    ``m = 9`` gives the 3x3 square and ``m = 25`` the 5x5 square.
    """
    r = 0
    while (2 * r + 1) ** 2 < m:
        r += 1
    pts = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    pts.sort(key=lambda p: (max(abs(p[0]), abs(p[1])), abs(p[0]) + abs(p[1]), p[1], p[0]))
    return pts[:m]


def mfb_layers(config: ModelConfig, level: int) -> Tuple[List[ConvLayer], ConvLayer]:
    width = config.mfb_width
    stack = []
    c_in = mfb_input_channels(config, level)
    for i in range(config.mfb_layers):
        stack.append(ConvLayer.make(f"mfb.{level}.conv{i}", c_in, width, 3, norm=True, act=True))
        c_in = width
    k = N_FRAMES * config.M
    bias = None
    if level == 0:
        # the finest head starts its taps on an integer lattice, like a deformable kernel grid
        taps = tap_lattice(config.M)
        bias = ([dx for _ in range(N_FRAMES) for dx, _ in taps]
                + [dy for _ in range(N_FRAMES) for _, dy in taps] + [0.0] * (k + N_FRAMES))
    head = ConvLayer.make(f"mfb.{level}.head", c_in, 3 * k + N_FRAMES, 3, norm=False, act=False,
                          zero_init=True, bias_init=bias)
    return stack, head


def context_layer(config: ModelConfig) -> ConvLayer:
    return ConvLayer.make("context", IN_CH, config.context_channels, 7, act=True)


@dataclass(frozen=True)
class GridSpec:
    stems: Tuple[ConvLayer, ...]
    lateral: Dict[Tuple[int, int], Tuple[ConvLayer, ConvLayer]]
    down: Dict[Tuple[int, int], Tuple[ConvLayer, ConvLayer]]
    up: Dict[Tuple[int, int], Tuple[ConvLayer, ConvLayer]]
    head: ConvLayer

    def layers(self) -> List[ConvLayer]:
        out = list(self.stems)
        for group in (self.lateral, self.down, self.up):
            for pair in group.values():
                out.extend(pair)
        out.append(self.head)
        return out


def synthesis_spec(config: ModelConfig) -> GridSpec:
    w = config.synth_widths
    cols = config.synth_columns
    stems = tuple(ConvLayer.make(f"synth.stem{r}", IN_CH + (config.context_channels if r == 0 else 0),
                                 w[r], 3) for r in range(SYNTH_ROWS))
    lateral, down, up = {}, {}, {}
    for c in range(cols):
        for r in range(SYNTH_ROWS):
            if c > 0:
                lateral[r, c] = (ConvLayer.make(f"synth.lat{r}_{c}.a", w[r], w[r], 3),
                                 ConvLayer.make(f"synth.lat{r}_{c}.b", w[r], w[r], 3, act=False, zero_init=True))
        for r in range(SYNTH_ROWS - 1):
            if c < cols // 2:
                down[r, c] = (ConvLayer.make(f"synth.down{r}_{c}.a", w[r], w[r + 1], 3, stride=2),
                              ConvLayer.make(f"synth.down{r}_{c}.b", w[r + 1], w[r + 1], 3, act=False, zero_init=True))
            else:
                up[r, c] = (ConvLayer.make(f"synth.up{r}_{c}.a", w[r + 1], w[r], 3),
                            ConvLayer.make(f"synth.up{r}_{c}.b", w[r], w[r], 3, act=False, zero_init=True))
    head = ConvLayer.make("synth.head", w[0], IN_CH, 3, act=False, zero_init=True)
    return GridSpec(stems, lateral, down, up, head)


def all_layers(config: ModelConfig) -> list:
    parts: list = list(feature_blocks(config))
    for level in range(config.L0, -1, -1):
        stack, head = mfb_layers(config, level)
        parts.extend(stack)
        parts.append(head)
    parts.append(context_layer(config))
    parts.extend(synthesis_spec(config).layers())
    return parts


def param_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    for part in all_layers(config):
        for name, shape in part.param_shapes().items():
            if name in shapes:
                raise ValueError(f"duplicate parameter name {name}")
            shapes[name] = shape
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return int(sum(int(np.prod(s)) for s in param_shapes(config).values()))


def init_weights(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelWeights:
    """Fan-in uniform kernels, zero biases, PReLU slopes at 0.25.

    Flow heads and the last conv of each synthesis branch start at zero, so
    training begins from zero flows and a shallow synthesis path.
    """
    rng = np.random.default_rng(seed)
    weights: ModelWeights = OrderedDict()
    for part in all_layers(config):
        weights.update(part.init(rng, dtype))
    return weights


def check_weights(config: ModelConfig, weights: Mapping[str, np.ndarray]) -> None:
    """Raise ``ShapeError`` naming the first parameter that conflicts with ``config``."""
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in weights:
            raise ShapeError(f"parameter {name!r} missing for this config")
        got = tuple(np.shape(weights[name].data if isinstance(weights[name], Tensor) else weights[name]))
        if got != shape:
            raise ShapeError(f"parameter {name!r} has shape {got}, config expects {shape}")
    extra = set(weights) - set(expected)
    if extra:
        raise ShapeError(f"unexpected parameters for this config: {sorted(extra)[:5]}")


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _frame(frames: Tensor, n: int) -> Tensor:
    return frames[:, :, n]


def _per_frame_2d(frames: Tensor) -> Tensor:
    """``[B, C, 4, H, W] -> [B*4, C, H, W]``."""
    b, c, t, h, w = frames.shape
    return reshape(transpose(frames, (0, 2, 1, 3, 4)), (b * t, c, h, w))


def _stack_frames(x: Tensor, batch: int) -> Tensor:
    """``[B*4, C, H, W] -> [B, C, 4, H, W]``."""
    bt, c, h, w = x.shape
    return transpose(reshape(x, (batch, bt // batch, c, h, w)), (0, 2, 1, 3, 4))


def check_frames(frames: Tensor, config: ModelConfig) -> None:
    if frames.ndim != 5 or frames.shape[1] != IN_CH or frames.shape[2] != N_FRAMES:
        raise ShapeError(f"frames must be [B, {IN_CH}, {N_FRAMES}, H, W], got {frames.shape}")
    h, w = frames.shape[-2:]
    d = config.divisor
    if h % d or w % d:
        raise ShapeError(f"frame extents {h}x{w} must be divisible by {d} (2^{d.bit_length() - 1})")
    if not config.use_3d and (h >> config.L) * (w >> config.L) < 2:
        # per-frame 2D features at the coarsest level would be 1x1, which cannot be normalized
        raise ShapeError(f"the 2D ablation needs frames larger than {h}x{w} for L={config.L}")


def build_feature_pyramid(frames: Tensor, config: ModelConfig, weights) -> List[Tensor]:
    frames = as_tensor(frames)
    check_frames(frames, config)
    blocks = feature_blocks(config)
    feats = []
    if config.use_3d:
        x = frames
        for block in blocks:
            x = block(x, weights)
            feats.append(x)
    else:
        x = _per_frame_2d(frames)
        for block in blocks:
            x = block(x, weights)
            feats.append(_stack_frames(x, frames.shape[0]))
    return feats


def run_mfb(level: int, psi_prev: Optional[Tensor], flows_prev: Optional[LevelFlows],
            phi_l: Tensor, frames_l: Tensor, config: ModelConfig, weights) -> Tuple[Tensor, LevelFlows]:
    """One multi-flow block; returns its feature map and the refined flows."""
    b, _, _, h, w = frames_l.shape
    if phi_l.shape[-2:] != (h, w):
        raise ShapeError(f"level {level}: features {phi_l.shape} and frames {frames_l.shape} differ")
    if (psi_prev is None) != (flows_prev is None):
        raise ValueError("psi_prev and flows_prev must both be given or both be absent")
    if flows_prev is None:
        up = identity_level_flows(b, config.M, h, w, level, frames_l.dtype)
        psi_up = Tensor(np.zeros((b, config.mfb_width, h, w), dtype=frames_l.dtype))
    else:
        if flows_prev.level != level + 1 or tuple(2 * s for s in flows_prev.spatial) != (h, w):
            raise ShapeError(f"level {level}: previous flows at level {flows_prev.level} with "
                             f"extents {flows_prev.spatial} do not feed a {h}x{w} level")
        up = upsample_level_flows(flows_prev)
        psi_up = upsample2(psi_prev)
    warped = [warp(_frame(frames_l, n), up.flows[n]) for n in range(N_FRAMES)]
    x = concat(warped + [fold_time(phi_l), psi_up] + flow_channels(up), axis=1)
    stack, head_layer = mfb_layers(config, level)
    psi = conv_stack_forward(stack, x, weights)
    head = head_layer(psi, weights)
    k = N_FRAMES * config.M
    prev_alpha = concat([f.alpha for f in up.flows], axis=1)
    prev_beta = concat([f.beta for f in up.flows], axis=1)
    flows = normalize_heads(add(prev_alpha, head[:, :k]), add(prev_beta, head[:, k:2 * k]),
                            head[:, 2 * k:3 * k], head[:, 3 * k:], level)
    return psi, flows


def extract_context(frames: Tensor, config: ModelConfig, weights) -> List[Tensor]:
    """Shared 7x7 conv + PReLU per frame; returns four ``[B, Cc, H, W]`` maps."""
    frames = as_tensor(frames)
    ctx = context_layer(config)(_per_frame_2d(frames), weights)
    stacked = _stack_frames(ctx, frames.shape[0])
    return [stacked[:, :, n] for n in range(N_FRAMES)]


def synthesize(fused0: Tensor, fused1: Tensor, fused2: Tensor, warped_context: Tensor,
               config: ModelConfig, weights) -> Tensor:
    """Grid network over three scales; returns the unclamped output.

    The head predicts a residual on top of the finest fused candidate.
    """
    h, w = fused0.shape[-2:]
    if (fused1.shape[-2:] != (h // 2, w // 2) or fused2.shape[-2:] != (h // 4, w // 4)
            or warped_context.shape[-2:] != (h, w)):
        raise ShapeError(f"synthesis scale mismatch: {fused0.shape}, {fused1.shape}, "
                         f"{fused2.shape}, {warped_context.shape}")
    spec = synthesis_spec(config)
    inputs = [concat([fused0, warped_context], axis=1), fused1, fused2]
    state = [spec.stems[r](inputs[r], weights) for r in range(SYNTH_ROWS)]

    def pair(layers, x):
        return layers[1](layers[0](x, weights), weights)

    for c in range(config.synth_columns):
        if c > 0:
            state = [add(state[r], pair(spec.lateral[r, c], state[r])) for r in range(SYNTH_ROWS)]
        if c < config.synth_columns // 2:
            for r in range(SYNTH_ROWS - 1):
                state[r + 1] = add(state[r + 1], pair(spec.down[r, c], state[r]))
        else:
            for r in range(SYNTH_ROWS - 2, -1, -1):
                state[r] = add(state[r], pair(spec.up[r, c], upsample2(state[r + 1])))
    return add(fused0, spec.head(state[0], weights))


def downsample_frames(frames: Tensor, levels: int) -> List[Tensor]:
    """``[frames, pool(frames), ...]`` for levels ``0..levels``."""
    out = [as_tensor(frames)]
    for _ in range(levels):
        out.append(avg_pool2(out[-1]))
    return out


def forward(frames, config: ModelConfig, weights,
            timings: Optional[Dict[str, float]] = None) -> ForwardArtifacts:
    """Run the whole network on ``[B, 3, 4, H, W]`` frames.

    When ``timings`` is given, wall-clock seconds per stage are stored in it.
    """
    clock = _StageClock(timings)
    frames = as_tensor(frames)
    pyramid = build_feature_pyramid(frames, config, weights)
    frames_l = downsample_frames(frames, max(config.L0, SYNTH_ROWS - 1))
    clock.mark("features")
    psi = flows = None
    level_flows: Dict[int, LevelFlows] = {}
    fused: Dict[int, Tensor] = {}
    for level in range(config.L0, -1, -1):
        phi = frames if level == 0 else pyramid[level - 1]
        psi, flows = run_mfb(level, psi, flows, phi, frames_l[level], config, weights)
        level_flows[level] = flows
        _, fused[level] = warp_and_fuse([_frame(frames_l[level], n) for n in range(N_FRAMES)], flows)
    clock.mark("multiflow")

    finest = level_flows[0]
    contexts = extract_context(frames, config, weights)
    warped_ctx = fuse([warp(contexts[n], finest.flows[n]) for n in range(N_FRAMES)], finest.visibility)
    clock.mark("context")

    synth_in = [fused[0]]
    for level in range(1, SYNTH_ROWS):
        synth_in.append(fused[level] if level in fused else avg_pool2(synth_in[-1]))
    raw = synthesize(synth_in[0], synth_in[1], synth_in[2], warped_ctx, config, weights)
    clock.mark("synthesis")
    return ForwardArtifacts(pyramid, level_flows, fused, warped_ctx, raw, clip(raw, 0.0, 1.0))


class _StageClock:
    def __init__(self, sink: Optional[Dict[str, float]]):
        self.sink = sink
        self.last = time.perf_counter()

    def mark(self, stage: str) -> None:
        if self.sink is None:
            return
        now = time.perf_counter()
        self.sink[stage] = self.sink.get(stage, 0.0) + now - self.last
        self.last = now


def interpolate(frames: np.ndarray, config: ModelConfig, weights) -> np.ndarray:
    """Inference helper: ``[B, 3, 4, H, W]`` float array -> clamped ``[B, 3, H, W]``."""
    from .tensor import no_grad

    with no_grad():
        return forward(Tensor(frames), config, weights).output.data
