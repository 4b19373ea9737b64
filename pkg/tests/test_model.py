import numpy as np
import pytest

from mfvfi.losses import loss_total
from mfvfi.model import (ModelConfig, build_feature_pyramid, check_weights, downsample_frames,
                         extract_context, forward, init_weights, interpolate, param_shapes,
                         parameter_count, run_mfb, synthesize, tap_lattice)
from mfvfi.tensor import ShapeError, Tensor, backward, grad, sum_

# regression guards; change only together with a deliberate architecture change
DEFAULT_PARAMS = 9_058_739
TOY_PARAMS = 915_315

SMALL = ModelConfig.toy(M=4, channels=(8, 8, 12, 12, 16), mfb_width=12, mfb_layers=2,
                        context_channels=4, synth_widths=(8, 8, 8), synth_columns=2)


def random_weights(config, seed=0, dtype=np.float32, scale=0.3):
    """Initialization plus noise, so heads and residual branches are non-zero."""
    rng = np.random.default_rng(seed)
    w = init_weights(config, seed, dtype)
    return {k: (v + scale * rng.standard_normal(v.shape) / np.sqrt(max(v[0].size, 1))).astype(dtype)
            for k, v in w.items()}


def clips(batch, h, w, seed=0, dtype=np.float32):
    return np.random.default_rng(seed).random((batch, 3, 4, h, w)).astype(dtype)


class TestConfig:
    def test_defaults(self):
        c = ModelConfig()
        assert (c.L, c.L0, c.M, c.use_3d, c.t) == (6, 3, 25, True, 1.5)
        assert c.divisor == 64

    @pytest.mark.parametrize("kw", [dict(L0=6), dict(L0=-1), dict(M=0), dict(channels=(8,) * 5),
                                    dict(synth_widths=(8, 8)), dict(synth_columns=3)])
    def test_invalid_rejected(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_json_round_trip(self, tmp_path):
        c = ModelConfig.toy(use_3d=False)
        c.save(tmp_path / "c.json")
        assert ModelConfig.load(tmp_path / "c.json") == c

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_dict({"L": 6, "width": 3})


class TestParameters:
    def test_counts(self):
        assert parameter_count(ModelConfig()) == DEFAULT_PARAMS
        assert parameter_count(ModelConfig.toy()) == TOY_PARAMS

    def test_2d_ablation_changes_count_only(self):
        c3, c2 = ModelConfig.toy(), ModelConfig.toy(use_3d=False)
        assert parameter_count(c2) < parameter_count(c3)
        assert set(param_shapes(c2)) == set(param_shapes(c3))

    def test_init_is_seeded(self):
        a, b = init_weights(SMALL, 4), init_weights(SMALL, 4)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        assert any(a[k].tobytes() != v.tobytes() for k, v in init_weights(SMALL, 5).items())

    def test_check_weights_names_parameter(self):
        w = init_weights(SMALL)
        w["context.weight"] = np.zeros((1, 1, 1, 1), np.float32)
        with pytest.raises(ShapeError, match="context.weight"):
            check_weights(SMALL, w)
        with pytest.raises(ShapeError, match="missing"):
            check_weights(SMALL, {})


class TestFeaturePyramid:
    def test_shapes_at_256(self):
        c = ModelConfig(channels=(4, 4, 4, 4, 4, 4), mfb_width=4, context_channels=4, M=2)
        w = init_weights(c)
        feats = build_feature_pyramid(Tensor(np.zeros((1, 3, 4, 256, 256), np.float32)), c, w)
        assert [f.shape[-2:] for f in feats] == [(256 >> l, 256 >> l) for l in range(1, 7)]
        assert all(f.shape[2] == 4 for f in feats)

    def test_zero_weights_give_zero_features(self):
        w = {k: np.zeros_like(v) for k, v in init_weights(SMALL).items()}
        for f in build_feature_pyramid(Tensor(clips(1, 32, 32)), SMALL, w):
            assert not f.data.any()

    def test_2d_ablation_same_shapes(self):
        c2 = ModelConfig(**{**SMALL.to_dict(), "use_3d": False})
        x = Tensor(clips(2, 64, 32))
        a = build_feature_pyramid(x, SMALL, init_weights(SMALL))
        b = build_feature_pyramid(x, c2, init_weights(c2))
        assert [f.shape for f in a] == [f.shape for f in b]

    def test_indivisible_extent_rejected(self):
        with pytest.raises(ShapeError, match="divisible by 32"):
            build_feature_pyramid(Tensor(clips(1, 48, 40)), SMALL, init_weights(SMALL))


class TestMultiFlowBlocks:
    def test_zero_heads_keep_identity_flows(self):
        w = init_weights(SMALL)  # heads start at zero
        x = Tensor(clips(1, 32, 32))
        feats = build_feature_pyramid(x, SMALL, w)
        frames_l = downsample_frames(x, SMALL.L0)[SMALL.L0]
        _, lf = run_mfb(SMALL.L0, None, None, feats[SMALL.L0 - 1], frames_l, SMALL, w)
        for f in lf.flows:
            assert not f.alpha.data.any() and not f.beta.data.any()
            np.testing.assert_allclose(f.omega.data, 1 / SMALL.M, rtol=1e-6)
        np.testing.assert_allclose(lf.visibility.v.data, 0.25)

    def test_levels_cascade_and_are_deterministic(self):
        w = random_weights(SMALL)
        x = Tensor(clips(1, 32, 32))
        a, b = forward(x, SMALL, w), forward(x, SMALL, w)
        assert sorted(a.level_flows) == list(range(SMALL.L0 + 1))
        for level, lf in a.level_flows.items():
            assert lf.level == level and lf.spatial == (32 >> level, 32 >> level)
            for f, g in zip(lf.flows, b.level_flows[level].flows):
                assert f.alpha.data.tobytes() == g.alpha.data.tobytes()

    def test_resolution_mismatch_rejected(self):
        w = init_weights(SMALL)
        x = Tensor(clips(1, 32, 32))
        feats = build_feature_pyramid(x, SMALL, w)
        with pytest.raises(ShapeError):
            run_mfb(1, None, None, feats[1], downsample_frames(x, 1)[1], SMALL, w)


class TestContextAndSynthesis:
    def test_context_shared_across_frames(self):
        one = clips(1, 32, 32)[:, :, :1]
        x = Tensor(np.repeat(one, 4, axis=2))
        ctx = extract_context(x, SMALL, random_weights(SMALL))
        assert ctx[0].shape == (1, SMALL.context_channels, 32, 32)
        for c in ctx[1:]:
            np.testing.assert_array_equal(c.data, ctx[0].data)

    def test_zero_context_weights(self):
        w = {k: np.zeros_like(v) for k, v in init_weights(SMALL).items()}
        assert not extract_context(Tensor(clips(1, 32, 32)), SMALL, w)[0].data.any()

    def test_zero_weights_return_fused_candidate(self, rng):
        w = {k: np.zeros_like(v) for k, v in init_weights(SMALL).items()}
        f0 = rng.random((1, 3, 16, 16)).astype(np.float32)
        out = synthesize(Tensor(f0), Tensor(np.zeros((1, 3, 8, 8), np.float32)),
                         Tensor(np.zeros((1, 3, 4, 4), np.float32)),
                         Tensor(np.zeros((1, SMALL.context_channels, 16, 16), np.float32)), SMALL, w)
        np.testing.assert_array_equal(out.data, f0)

    def test_gradient_reaches_coarsest_input(self, rng):
        w = random_weights(SMALL, dtype=np.float64)
        inputs = [Tensor(rng.random((1, 3, 16 >> r, 16 >> r)), requires_grad=True) for r in range(3)]
        ctx = Tensor(rng.random((1, SMALL.context_channels, 16, 16)))
        out = synthesize(*inputs, ctx, SMALL, w)
        g = grad(sum_(out), inputs)
        assert np.abs(g[2]).sum() > 0

    def test_scale_mismatch_rejected(self):
        w = init_weights(SMALL)
        z = lambda *s: Tensor(np.zeros(s, np.float32))
        with pytest.raises(ShapeError):
            synthesize(z(1, 3, 16, 16), z(1, 3, 8, 8), z(1, 3, 8, 8), z(1, 4, 16, 16), SMALL, w)


class TestForward:
    def test_default_config_at_256(self):
        c = ModelConfig()
        art = forward(Tensor(clips(1, 256, 256)), c, init_weights(c))
        assert art.output.shape == (1, 3, 256, 256)
        assert {l: f.shape[-1] for l, f in art.fused.items()} == {0: 256, 1: 128, 2: 64, 3: 32}

    @pytest.mark.parametrize("l0", [0, 1, 2, 3])
    @pytest.mark.parametrize("use_3d", [True, False])
    def test_ablation_configs_share_shapes(self, l0, use_3d):
        c = ModelConfig(**{**SMALL.to_dict(), "L0": l0, "use_3d": use_3d})
        art = forward(Tensor(clips(2, 64, 32)), c, random_weights(c))
        assert art.output.shape == (2, 3, 64, 32)
        assert sorted(art.fused) == list(range(l0 + 1))
        assert art.warped_context.shape == (2, c.context_channels, 64, 32)

    def test_2d_ablation_rejects_one_pixel_features(self):
        c = ModelConfig(**{**SMALL.to_dict(), "use_3d": False})
        with pytest.raises(ShapeError, match="2D ablation"):
            forward(Tensor(clips(1, 32, 32)), c, init_weights(c))

    def test_output_clamped_and_flows_normalized(self):
        art = forward(Tensor(clips(2, 32, 32)), SMALL, random_weights(SMALL, scale=3.0))
        out = art.output.data
        assert out.min() >= 0 and out.max() <= 1
        for lf in art.level_flows.values():
            lf.check(1e-6)

    def test_static_scene_with_zero_heads(self):
        frame = clips(1, 32, 32)[:, :, :1]
        w = init_weights(SMALL)
        for name in w:
            if name.startswith("mfb.") and ".head." in name:
                w[name] = np.zeros_like(w[name])
        art = forward(Tensor(np.repeat(frame, 4, axis=2)), SMALL, w)
        np.testing.assert_allclose(art.fused[0].data, frame[:, :, 0], atol=1e-6)

    def test_constant_static_scene_any_weights(self):
        frames = np.full((1, 3, 4, 32, 32), 0.37, np.float32)
        art = forward(Tensor(frames), SMALL, random_weights(SMALL, scale=2.0))
        np.testing.assert_allclose(art.fused[0].data, 0.37, atol=1e-6)

    def test_interpolate_helper(self):
        out = interpolate(clips(1, 32, 32), SMALL, init_weights(SMALL))
        assert out.shape == (1, 3, 32, 32) and isinstance(out, np.ndarray)

    def test_stage_timings_recorded(self):
        t = {}
        forward(Tensor(clips(1, 32, 32)), SMALL, init_weights(SMALL), timings=t)
        assert set(t) == {"features", "multiflow", "context", "synthesis"}


@pytest.mark.parametrize("m, radius", [(1, 0), (4, 1), (9, 1), (16, 2), (25, 2)])
def test_tap_lattice(m, radius):
    pts = tap_lattice(m)
    assert len(pts) == len(set(pts)) == m
    assert pts[0] == (0, 0)
    assert max(max(abs(x), abs(y)) for x, y in pts) == radius


def test_tap_lattice_square():
    assert sorted(tap_lattice(9)) == sorted((x, y) for x in (-1, 0, 1) for y in (-1, 0, 1))


def test_init_spreads_finest_taps():
    c = SMALL
    w = init_weights(c)
    art = forward(Tensor(clips(1, 32, 32)), c, w)
    alpha = art.level_flows[0].flows[0].alpha.data[0]
    want = np.array([p[0] for p in tap_lattice(c.M)], dtype=np.float32)
    np.testing.assert_allclose(alpha[:, 5, 5], want, atol=1e-6)


def test_full_gradient_spot_check():
    """Full training-loss gradient on a miniature float64 model vs central differences."""
    c = ModelConfig(L=3, L0=1, M=4, channels=(4, 6, 8), mfb_width=6, mfb_layers=2,
                    context_channels=3, synth_widths=(4, 4, 4), synth_columns=2)
    weights = random_weights(c, seed=1, dtype=np.float64)
    rng = np.random.default_rng(2)
    frames = rng.random((1, 3, 4, 32, 32))
    target = rng.random((1, 3, 32, 32))

    def objective(w):
        art = forward(Tensor(frames), c, w)
        t = downsample_frames(Tensor(target), c.L0)
        return loss_total(art.raw_output, t[0], [art.fused[1]], t[1:]).tensor

    leaves = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
    grads = backward(objective(leaves), leaves.values())
    names = sorted(weights)
    picks = [names[i] for i in rng.choice(len(names), size=12, replace=False)]
    h = 1e-6
    worst = 0.0
    for name in picks:
        idx = tuple(rng.integers(0, s) for s in weights[name].shape)
        analytic = grads[leaves[name]][idx]
        plus = {k: v.copy() for k, v in weights.items()}
        minus = {k: v.copy() for k, v in weights.items()}
        plus[name][idx] += h
        minus[name][idx] -= h
        numeric = (objective(plus).item() - objective(minus).item()) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    assert worst < 1e-3
