import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from camokit import diffcore as dc
from camokit.diffcore import Tensor


def naive_conv2d(x, k, stride, padding):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ch, i * stride + u, j * stride + v] * k[o, ch, u, v]
                    out[b, o, i, j] = acc
    return out


class TestConv2d:
    def test_sum_of_ones(self):
        out = dc.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self):
        x = np.random.default_rng(0).random((2, 1, 6, 5))
        out = dc.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_random_against_loops(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        out = dc.conv2d(Tensor(x), Tensor(k))
        assert np.abs(out.data - naive_conv2d(x, k, 1, 0)).max() < 1e-6

    @settings(max_examples=30, deadline=None)
    @given(
        n=st.integers(1, 2), c=st.integers(1, 4), f=st.integers(1, 4),
        h=st.integers(3, 8), w=st.integers(3, 8), kh=st.integers(1, 3), kw=st.integers(1, 3),
        stride=st.integers(1, 3), padding=st.integers(0, 1), seed=st.integers(0, 2**16),
    )
    def test_matches_loop_oracle(self, n, c, f, h, w, kh, kw, stride, padding, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, c, h, w))
        k = rng.standard_normal((f, c, kh, kw))
        out = dc.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding)
        ref = naive_conv2d(x, k, stride, padding)
        assert out.shape == ref.shape
        assert np.abs(out.data - ref).max() < 1e-9

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(dc.DimensionError, match="channel"):
            dc.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_kernel_too_large(self):
        with pytest.raises(dc.DimensionError, match="height"):
            dc.conv2d(Tensor(np.ones((1, 1, 2, 4))), Tensor(np.ones((1, 1, 3, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        w_out = rng.standard_normal((2, 3, 3, 3))
        assert dc.grad_check(lambda t: (dc.conv2d(t, Tensor(k), Tensor(b), stride=2, padding=1) * w_out).sum(), x) < 1e-4
        assert dc.grad_check(lambda t: (dc.conv2d(Tensor(x), t, Tensor(b), stride=2, padding=1) * w_out).sum(), k) < 1e-4
        assert dc.grad_check(lambda t: (dc.conv2d(Tensor(x), Tensor(k), t, stride=2, padding=1) * w_out).sum(), b) < 1e-4


class TestActivation:
    def test_leaky(self):
        assert dc.activation(Tensor(np.array(-1.0)), "leaky_relu").item() == pytest.approx(-0.1)
        assert dc.activation(Tensor(np.array(2.0)), "leaky_relu").item() == 2.0

    def test_sigmoid_zero(self):
        assert dc.activation(Tensor(np.array(0.0)), "sigmoid").item() == 0.5

    def test_sigmoid_against_scalar_math(self):
        xs = np.random.default_rng(3).uniform(-30, 30, 100)
        ys = dc.sigmoid(Tensor(xs)).data
        ref = np.array([1 / (1 + math.exp(-v)) for v in xs])
        assert np.all((ys > 0) & (ys <= 1))
        assert np.abs(ys - ref).max() < 1e-15
        order = np.argsort(xs)
        assert np.all(np.diff(ys[order]) >= 0)

    def test_unknown_kind(self):
        with pytest.raises(dc.ParameterError):
            dc.activation(Tensor(np.zeros(2)), "tanh")

    @pytest.mark.parametrize("fn", [dc.sigmoid, dc.leaky_relu, dc.softplus, dc.exp,
                                    lambda t: dc.log_softmax(t.reshape(3, 4), axis=1)])
    def test_gradients(self, fn):
        x = np.random.default_rng(4).standard_normal(12)
        w = np.random.default_rng(5).standard_normal(12)
        assert dc.grad_check(lambda t: (fn(t).reshape(12) * w).sum(), x) < 1e-4


class TestAffineSample:
    def test_identity(self):
        src = np.random.default_rng(6).random((3, 7, 5)).astype(np.float32)
        out, mask = dc.affine_sample(Tensor(src), 0.0, 1.0, (7, 5))
        np.testing.assert_array_equal(out.data, src)
        assert mask.min() == 1.0

    def test_quarter_turn_2x2(self):
        src = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out, mask = dc.affine_sample(Tensor(src), math.pi / 2, 1.0, (2, 2))
        # positive angles turn clockwise on screen (y axis points down)
        expected = np.array([[[3.0, 1.0], [4.0, 2.0]]])
        np.testing.assert_allclose(out.data, expected, atol=1e-12)
        assert mask.min() == 1.0

    def test_quarter_turn_matches_rot90(self):
        src = np.random.default_rng(7).random((2, 5, 5))
        out, _ = dc.affine_sample(Tensor(src), math.pi / 2, 1.0, (5, 5))
        np.testing.assert_allclose(out.data, np.rot90(src, k=-1, axes=(1, 2)), atol=1e-12)

    def test_downscale_matches_map_coordinates(self):
        src = np.random.default_rng(8).random((1, 16, 16))
        out, mask = dc.affine_sample(Tensor(src), 0.0, 10 / 16, (10, 10))
        assert mask.min() == 1.0
        coords = (np.arange(10) - 4.5) * 1.6 + 7.5
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        ref = ndimage.map_coordinates(src[0], [yy, xx], order=1, mode="nearest")
        np.testing.assert_allclose(out.data[0], ref, atol=1e-12)

    def test_out_of_bounds_zero(self):
        src = np.ones((1, 4, 4))
        out, mask = dc.affine_sample(Tensor(src), 0.0, 1.0, (8, 8))
        assert out.data[0, 0, 0] == 0.0 and mask[0, 0, 0] == 0.0
        assert out.data.sum() == mask.sum() == 16

    def test_bad_scale(self):
        with pytest.raises(dc.ParameterError):
            dc.affine_sample(Tensor(np.ones((1, 2, 2))), 0.0, 0.0, (2, 2))

    def test_gradient(self):
        src = np.random.default_rng(9).random((3, 6, 6))
        w = np.random.default_rng(10).standard_normal((3, 9, 9))
        fn = lambda t: (dc.affine_sample(t, 0.37, 1.3, (9, 9), center=(4.2, 3.9))[0] * w).sum()
        assert dc.grad_check(fn, src) < 1e-4


class TestAlphaComposite:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.image = rng.random((3, 5, 5))
        self.patch = rng.random((3, 5, 5))
        self.mask = (rng.random((1, 5, 5)) > 0.3).astype(np.float64)

    def test_alpha_zero_is_image(self):
        out = dc.alpha_composite(Tensor(self.image), Tensor(self.patch), self.mask, 0.0)
        np.testing.assert_array_equal(out.data, self.image)

    def test_alpha_one_is_patch(self):
        out = dc.alpha_composite(Tensor(self.image), Tensor(self.patch), self.mask, 1.0)
        on = np.broadcast_to(self.mask > 0, self.image.shape)
        np.testing.assert_array_equal(out.data[on], self.patch[on])
        np.testing.assert_array_equal(out.data[~on], self.image[~on])

    def test_blend_value(self):
        out = dc.alpha_composite(Tensor(np.array([[[0.5]]])), Tensor(np.array([[[1.0]]])), np.ones((1, 1, 1)), 0.4)
        assert out.data[0, 0, 0] == 0.7

    def test_alpha_range(self):
        with pytest.raises(dc.ParameterError):
            dc.alpha_composite(Tensor(self.image), Tensor(self.patch), self.mask, 1.2)

    def test_patch_gradient_is_alpha(self):
        patch = Tensor(self.patch, requires_grad=True)
        upstream = np.random.default_rng(12).standard_normal(self.image.shape)
        (dc.alpha_composite(Tensor(self.image), patch, self.mask, 0.35) * upstream).sum().backward()
        on = np.broadcast_to(self.mask > 0, self.image.shape)
        np.testing.assert_allclose(patch.grad[on], 0.35 * upstream[on])
        assert np.all(patch.grad[~on] == 0)

    @pytest.mark.parametrize("alpha", [0.0, 0.4, 1.0])
    def test_grad_check(self, alpha):
        w = np.random.default_rng(13).standard_normal(self.image.shape)
        fp = lambda t: (dc.alpha_composite(Tensor(self.image), t, self.mask, alpha) * w).sum()
        fi = lambda t: (dc.alpha_composite(t, Tensor(self.patch), self.mask, alpha) * w).sum()
        assert dc.grad_check(fp, self.patch) < 1e-4
        assert dc.grad_check(fi, self.image) < 1e-4


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones(4))

    def test_square(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * 3.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(dc.UsageError):
            (x * 2.0).backward()

    def test_shared_node_visited_once(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_composite_graph(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((1, 2, 6, 6))
        k = rng.standard_normal((3, 2, 3, 3))
        fn = lambda t: dc.leaky_relu(dc.conv2d(t, Tensor(k), padding=1)).mean()
        assert dc.grad_check(fn, x) < 1e-4
        fn2 = lambda t: dc.sigmoid(dc.conv2d(Tensor(x), t, stride=2)).mean()
        assert dc.grad_check(fn2, k) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(dc.DimensionError, match="axis 1"):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 4)))


class TestShapeOpsAndReductions:
    @pytest.mark.parametrize("fn", [
        lambda t: (t.reshape(4, 6).max(axis=1) * np.array([1.0, -2.0, 3.0, 0.5])).sum(),
        lambda t: (dc.min_(t.reshape(2, 3, 4), axis=(1, 2)) * np.array([1.0, -1.5])).sum(),
        lambda t: (dc.transpose(t.reshape(2, 3, 4), (2, 0, 1)) * np.arange(24.0).reshape(4, 2, 3)).sum(),
        lambda t: (t[3:9] * np.arange(6.0)).sum() + (t[[0, 0, 5]] * 2.0).sum(),
        lambda t: (dc.concat([t[:5], t[10:]], axis=0) * np.arange(19.0)).sum(),
        lambda t: (dc.put(t.reshape(4, 6), t[:4].reshape(2, 2) * 3.0, (slice(1, 3), slice(2, 4))) * np.arange(24.0).reshape(4, 6)).sum(),
        lambda t: dc.sqrt(t * t + 1e-2).mean() + dc.clamp(t, -0.5, 0.5).sum(),
        lambda t: (dc.stack([t[:12], t[12:]], axis=1) ** 2).sum(),
    ])
    def test_gradients(self, fn):
        x = np.random.default_rng(15).standard_normal(24)
        assert dc.grad_check(fn, x) < 1e-4


class TestGradCheck:
    def test_linear_exact(self):
        w = np.random.default_rng(16).standard_normal(10)
        assert dc.grad_check(lambda t: (t * w).sum(), np.ones(10)) < 1e-9

    def test_sigmoid_chain(self):
        x = np.random.default_rng(17).standard_normal(8)
        fn = lambda t: dc.sigmoid(dc.sigmoid(t) * 3.0 - 1.0).sum()
        assert dc.grad_check(fn, x) < 1e-4

    def test_catches_wrong_gradient(self):
        def broken(t):
            out = dc.sigmoid(t)
            out._backward = lambda g: [g * 2.0]
            return out.sum()

        assert dc.grad_check(broken, np.zeros(3)) > 0.5
