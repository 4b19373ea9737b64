import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfvfi import functional as F
from mfvfi.tensor import ShapeError, Tensor

from oracles import avg_pool2_loops, bilinear_resize_loops, conv2d_loops, conv3d_loops


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


class TestConv2d:
    def test_all_ones_counts_overlap(self):
        out = F.conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))), T([0.0]), 1, 1).data
        assert out[0, 0, 1, 1] == 9
        assert out[0, 0, 0, 0] == out[0, 0, 2, 2] == 4

    def test_delta_kernel_is_identity(self, rng):
        x = rng.standard_normal((2, 1, 6, 5))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(F.conv2d(T(x), T(k), T([0.0]), 1, 1).data, x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_loop_oracle(self, rng, stride, pad):
        x = rng.standard_normal((1, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = F.conv2d(T(x), T(k), T(b), stride, pad).data
        np.testing.assert_allclose(out, conv2d_loops(x, k, b, stride, pad), rtol=0, atol=1e-12)

    def test_output_extent_formula(self):
        out = F.conv2d(T(np.zeros((1, 1, 9, 7))), T(np.zeros((2, 1, 3, 3))), T([0, 0]), 2, 1)
        assert out.shape == (1, 2, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="channel"):
            F.conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 3, 3))), T([0.0]), 1, 1)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            F.conv2d(T(np.zeros((1, 1, 4, 4))), T(np.zeros((1, 1, 2, 2))), T([0.0]))

    def test_kernel_larger_than_padded_input_rejected(self):
        with pytest.raises(ShapeError):
            F.conv2d(T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 5, 5))), T([0.0]), 1, 0)


class TestConv3d:
    def test_all_ones_interior_is_27(self):
        out = F.conv3d(T(np.ones((1, 1, 4, 4, 4))), T(np.ones((1, 1, 3, 3, 3))), T([0.0]), 1, 1).data
        assert out[0, 0, 1, 1, 1] == 27
        assert out[0, 0, 0, 0, 0] == 8

    def test_temporal_extent_preserved(self):
        out = F.conv3d(T(np.zeros((1, 2, 4, 8, 8))), T(np.zeros((3, 2, 3, 3, 3))), T(np.zeros(3)),
                       (1, 2, 2), 1)
        assert out.shape == (1, 3, 4, 4, 4)

    @pytest.mark.parametrize("stride", [(1, 1, 1), (1, 2, 2)])
    def test_matches_loop_oracle(self, rng, stride):
        x = rng.standard_normal((1, 1, 4, 4, 4))
        k = rng.standard_normal((2, 1, 3, 3, 3))
        b = rng.standard_normal(2)
        out = F.conv3d(T(x), T(k), T(b), stride, 1).data
        np.testing.assert_allclose(out, conv3d_loops(x, k, b, stride, (1, 1, 1)), rtol=0, atol=1e-12)


class TestBilinearResize:
    def test_constant_stays_constant(self):
        out = F.bilinear_resize(T(np.full((1, 2, 3, 5), 0.7)), 6, 10).data
        np.testing.assert_allclose(out, 0.7, atol=1e-15)

    def test_linear_ramp_is_reproduced(self):
        ramp = np.tile(np.arange(4.0), (1, 1, 3, 1))
        out = F.bilinear_resize(T(ramp), 6, 8).data
        expected = np.tile(np.linspace(0, 3, 8), (1, 1, 6, 1))
        np.testing.assert_allclose(out, expected, atol=1e-12)

    @pytest.mark.parametrize("oh,ow", [(3, 3), (8, 8), (1, 5), (7, 2)])
    def test_matches_coordinate_oracle(self, rng, oh, ow):
        x = rng.standard_normal((1, 2, 4, 4))
        np.testing.assert_allclose(F.bilinear_resize(T(x), oh, ow).data,
                                   bilinear_resize_loops(x, oh, ow), rtol=0, atol=1e-12)

    def test_upsample2_doubles_extents(self):
        assert F.upsample2(T(np.zeros((1, 1, 3, 5)))).shape == (1, 1, 6, 10)


class TestAvgPool2:
    def test_block_mean(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        assert F.avg_pool2(T(x)).data.item() == 2.5

    def test_matches_block_oracle(self, rng):
        x = rng.standard_normal((1, 3, 8, 8))
        np.testing.assert_array_equal(F.avg_pool2(T(x)).data, avg_pool2_loops(x))

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError):
            F.avg_pool2(T(np.zeros((1, 1, 5, 4))))


class TestSoftmax:
    def test_zero_logits_uniform(self):
        np.testing.assert_allclose(F.softmax(T(np.zeros((1, 9, 2, 2))), 1).data, 1 / 9)

    def test_two_logit_example(self):
        out = F.softmax(T([0.0, np.log(2.0)]), 0).data
        np.testing.assert_allclose(out, [1 / 3, 2 / 3], atol=1e-15)

    def test_large_logits_stable(self):
        out = F.softmax(T([1000.0, 1000.0]), 0).data
        np.testing.assert_allclose(out, [0.5, 0.5])

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
                  elements=st.floats(-80, 80, width=32)),
           st.integers(0, 2))
    def test_sums_to_one(self, x, axis):
        out = F.softmax(Tensor(x), axis).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)


class TestPReLUAndNorm:
    def test_prelu_per_channel(self):
        x = np.array([-2.0, 3.0]).reshape(1, 1, 1, 2).repeat(2, axis=1)
        out = F.prelu(T(x), T([0.25, 0.5])).data
        np.testing.assert_array_equal(out[0, 0, 0], [-0.5, 3.0])
        np.testing.assert_array_equal(out[0, 1, 0], [-1.0, 3.0])

    @pytest.mark.parametrize("shape", [(2, 3, 4, 5), (1, 2, 3, 4, 4)])
    def test_instance_norm_moments(self, rng, shape):
        x = rng.standard_normal(shape) * 3 + 1
        y = F.instance_norm(T(x)).data
        axes = tuple(range(2, len(shape)))
        np.testing.assert_allclose(y.mean(axis=axes), 0, atol=1e-12)
        var = x.var(axis=axes)
        np.testing.assert_allclose(y.var(axis=axes), var / (var + 1e-5), rtol=1e-10)

    def test_instance_norm_needs_two_elements(self):
        with pytest.raises(ShapeError):
            F.instance_norm(T(np.zeros((1, 1, 1, 1))))


class TestPyramidOperators:
    def test_reflect_index(self):
        assert [F.reflect_pad_index(i, 4) for i in range(-2, 6)] == [2, 1, 0, 1, 2, 3, 2, 1]

    def test_blur_preserves_constants(self):
        x = np.full((1, 1, 8, 8), 0.3)
        np.testing.assert_allclose(F.pyr_down(T(x)).data, 0.3, atol=1e-15)
        np.testing.assert_allclose(F.pyr_up(T(x)).data, 0.3, atol=1e-15)

    def test_pyr_down_matrix_rows_sum_to_one(self):
        np.testing.assert_allclose(F.pyr_down_matrix(16).sum(axis=1), 1.0)
        assert F.pyr_down_matrix(16).shape == (8, 16)
        assert F.pyr_up_matrix(8).shape == (16, 8)

    def test_pyr_down_first_row_by_hand(self):
        # output 0 centred on input 0: taps at -2..2 mirror to 2,1,0,1,2
        row = F.pyr_down_matrix(8)[0]
        np.testing.assert_allclose(row[:3], [6 / 16, 8 / 16, 2 / 16])

    def test_fold_time(self, rng):
        x = rng.standard_normal((2, 3, 4, 5, 5))
        y = F.fold_time(T(x)).data
        assert y.shape == (2, 12, 5, 5)
        np.testing.assert_array_equal(y[:, 4], x[:, 1, 0])
