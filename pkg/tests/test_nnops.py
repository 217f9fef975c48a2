import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dr2unet import nnops
from dr2unet.tensorcore import ShapeError, Tape, backward, grad_check, mul, sum_all


# independent oracles


def naive_conv(x, w, b=None, pad=0, stride=1):
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((n, c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh, ow = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c_out, oh, ow))
    for i in range(n):
        for o in range(c_out):
            for r in range(oh):
                for c in range(ow):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(c_in):
                        for a in range(kh):
                            for e in range(kw):
                                acc += xp[i, ci, r * stride + a, c * stride + e] * w[o, ci, a, e]
                    out[i, o, r, c] = acc
    return out


def naive_maxpool(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for i in range(n):
        for j in range(c):
            for r in range(h // 2):
                for s in range(w // 2):
                    out[i, j, r, s] = max(x[i, j, 2 * r + a, 2 * s + e] for a in range(2) for e in range(2))
    return out


def probe_loss(op, probe):
    return lambda p: sum_all(mul(op(p), probe))


RNG = np.random.default_rng(1234)


class TestConv2d:
    def test_ones_kernel(self):
        out = nnops.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3))).value[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
        assert out[0, 1] == out[1, 0] == out[1, 2] == out[2, 1] == 6.0

    def test_delta_kernel_identity(self):
        x = RNG.normal(size=(1, 1, 5, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        assert np.array_equal(nnops.conv2d(x, w, np.zeros(1)).value, x)

    def test_matches_naive(self):
        x, w, b = RNG.normal(size=(2, 3, 7, 7)), RNG.normal(size=(4, 3, 3, 3)), RNG.normal(size=4)
        assert np.max(np.abs(nnops.conv2d(x, w, b).value - naive_conv(x, w, b, pad=1))) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(
        n=st.integers(1, 2), c_in=st.integers(1, 4), c_out=st.integers(1, 4),
        h=st.integers(3, 9), w=st.integers(3, 9), k=st.sampled_from([1, 3]),
        stride=st.integers(1, 2), pad=st.sampled_from(["same", "valid"]), seed=st.integers(0, 2**16),
    )
    def test_matches_naive_fuzz(self, n, c_in, c_out, h, w, k, stride, pad, seed):
        rng = np.random.default_rng(seed)
        x, wt, b = rng.normal(size=(n, c_in, h, w)), rng.normal(size=(c_out, c_in, k, k)), rng.normal(size=c_out)
        p = k // 2 if pad == "same" else 0
        got = nnops.conv2d(x, wt, b, pad=pad, stride=stride).value
        assert np.max(np.abs(got - naive_conv(x, wt, b, p, stride))) < 1e-12

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            nnops.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))

    def test_bad_stride(self):
        with pytest.raises(ValueError):
            nnops.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), stride=0)

    def test_even_kernel_same_rejected(self):
        with pytest.raises(ShapeError):
            nnops.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)))

    def test_gradients(self):
        x, w, b = RNG.uniform(-1, 1, (2, 3, 5, 5)), RNG.uniform(-1, 1, (2, 3, 3, 3)), RNG.uniform(-1, 1, 2)
        probe = RNG.uniform(-1, 1, (2, 2, 3, 3))
        rep = grad_check(probe_loss(lambda p: nnops.conv2d(p["x"], p["w"], p["b"], stride=2), probe),
                         {"x": x, "w": w, "b": b})
        assert rep.max_error < 1e-4, rep.errors


class TestConvTranspose:
    def test_shape(self):
        out = nnops.conv_transpose2d(np.ones((1, 4, 16, 16)), np.ones((4, 5, 3, 3)))
        assert out.shape == (1, 5, 32, 32)

    def test_zero_input_gives_bias(self):
        b = np.array([0.5, -1.0])
        out = nnops.conv_transpose2d(np.zeros((1, 3, 2, 2)), RNG.normal(size=(3, 2, 3, 3)), b).value
        assert np.array_equal(out, np.broadcast_to(b.reshape(1, 2, 1, 1), (1, 2, 4, 4)))

    def test_single_pixel_equals_conv_gradient(self):
        # oracle: the input-gradient of a stride-2 conv, taken through the tape
        v = 1.7
        w = np.ones((1, 1, 3, 3))
        tape = Tape()
        z = tape.leaf(np.zeros((1, 1, 2, 2)))
        y = nnops.conv2d(z, w, pad=1, stride=2)
        expected = backward(tape, sum_all(mul(y, np.full((1, 1, 1, 1), v))))[z.id]
        got = nnops.conv_transpose2d(np.full((1, 1, 1, 1), v), w).value
        assert np.array_equal(got, expected)
        assert got.sum() == pytest.approx(4 * v)

    @settings(max_examples=20, deadline=None)
    @given(c_in=st.integers(1, 3), c_out=st.integers(1, 3), h=st.integers(1, 5), w=st.integers(1, 5),
           seed=st.integers(0, 2**16))
    def test_adjoint_identity(self, c_in, c_out, h, w, seed):
        # <convT(x), z> == <x, conv(z)> for the stride-2 pad-1 3x3 conv
        rng = np.random.default_rng(seed)
        wt = rng.normal(size=(c_in, c_out, 3, 3))
        x = rng.normal(size=(2, c_in, h, w))
        z = rng.normal(size=(2, c_out, 2 * h, 2 * w))
        lhs = np.sum(nnops.conv_transpose2d(x, wt).value * z)
        rhs = np.sum(x * naive_conv(z, wt, pad=1, stride=2))
        assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))

    def test_equals_conv_input_gradient(self):
        wt = RNG.normal(size=(3, 2, 3, 3))
        x = RNG.normal(size=(1, 3, 4, 4))
        tape = Tape()
        z = tape.leaf(np.zeros((1, 2, 8, 8)))
        y = nnops.conv2d(z, wt, pad=1, stride=2)
        expected = backward(tape, sum_all(mul(y, x)))[z.id]
        assert np.max(np.abs(nnops.conv_transpose2d(x, wt).value - expected)) < 1e-12

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            nnops.conv_transpose2d(np.ones((1, 2, 4, 4)), np.ones((3, 1, 3, 3)))

    def test_gradients(self):
        x, w, b = RNG.uniform(-1, 1, (1, 2, 3, 3)), RNG.uniform(-1, 1, (2, 3, 3, 3)), RNG.uniform(-1, 1, 3)
        probe = RNG.uniform(-1, 1, (1, 3, 6, 6))
        rep = grad_check(probe_loss(lambda p: nnops.conv_transpose2d(p["x"], p["w"], p["b"]), probe),
                         {"x": x, "w": w, "b": b})
        assert rep.max_error < 1e-4, rep.errors


class TestMaxPool:
    def test_max_of_four(self):
        out, arg = nnops.maxpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.value.item() == 4.0
        assert arg.item() == 3

    def test_ties_route_to_first(self):
        tape = Tape()
        x = tape.leaf(np.full((1, 1, 4, 4), 2.0))
        out, _ = nnops.maxpool2d(x)
        assert np.all(out.value == 2.0)
        g = backward(tape, sum_all(out))[x.id][0, 0]
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1.0
        assert np.array_equal(g, expected)

    def test_matches_naive(self):
        x = RNG.normal(size=(1, 2, 8, 8))
        assert np.array_equal(nnops.maxpool2d(x)[0].value, naive_maxpool(x))

    def test_odd_dims(self):
        with pytest.raises(ShapeError):
            nnops.maxpool2d(np.ones((1, 1, 5, 4)))

    def test_gradients(self):
        probe = RNG.uniform(-1, 1, (2, 3, 2, 3))
        rep = grad_check(probe_loss(lambda p: nnops.maxpool2d(p["x"])[0], probe),
                         {"x": RNG.uniform(-1, 1, (2, 3, 4, 6))})
        assert rep.max_error < 1e-4


class TestActivations:
    def test_relu_values(self):
        assert nnops.relu(np.array([[[[-1.0, 0.0, 2.0]]]])).value.ravel().tolist() == [0.0, 0.0, 2.0]

    def test_relu_dead(self):
        tape = Tape()
        x = tape.leaf(-RNG.random((1, 2, 3, 3)) - 0.1)
        y = nnops.relu(x)
        assert not y.value.any()
        assert not backward(tape, sum_all(y))[x.id].any()

    def test_relu_passes_gradient(self):
        tape = Tape()
        x = tape.leaf(RNG.random((1, 1, 3, 3)) + 0.1)
        up = RNG.normal(size=(1, 1, 3, 3))
        assert np.array_equal(backward(tape, sum_all(mul(nnops.relu(x), up)))[x.id], up)

    def test_relu_gradient_fd(self):
        probe = RNG.uniform(-1, 1, (1, 2, 3, 3))
        rep = grad_check(probe_loss(lambda p: nnops.relu(p["x"]), probe), {"x": RNG.uniform(-1, 1, (1, 2, 3, 3))})
        assert rep.max_error < 1e-4

    def test_sigmoid_zero(self):
        assert nnops.sigmoid(np.zeros((1, 1, 1, 1))).value.item() == 0.5

    def test_sigmoid_saturation(self):
        s = nnops.sigmoid(np.array([[[[-40.0, 40.0, -800.0, 800.0]]]])).value.ravel()
        assert np.all(np.isfinite(s))
        assert s[0] < 1e-17 and s[1] == 1.0
        assert s[2] == 0.0 and s[3] == 1.0

    def test_sigmoid_gradient(self):
        probe = RNG.uniform(-1, 1, (1, 1, 4, 4))
        rep = grad_check(probe_loss(lambda p: nnops.sigmoid(p["x"]), probe), {"x": RNG.uniform(-4, 4, (1, 1, 4, 4))})
        assert rep.max_error < 1e-4

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-30, 30))
    def test_sigmoid_open_interval(self, z):
        s = nnops.sigmoid(np.full((1, 1, 1, 1), z)).value.item()
        assert 0.0 < s < 1.0


class TestConcatAdd:
    def test_concat_shape(self):
        assert nnops.concat_channels([np.ones((1, 2, 4, 4)), np.ones((1, 3, 4, 4))]).shape == (1, 5, 4, 4)

    def test_concat_round_trip(self):
        a, b = RNG.normal(size=(2, 2, 3, 3)), RNG.normal(size=(2, 3, 3, 3))
        out = nnops.concat_channels([a, b]).value
        assert np.array_equal(out[:, :2], a) and np.array_equal(out[:, 2:], b)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            nnops.concat_channels([np.ones((1, 2, 4, 4)), np.ones((1, 3, 4, 5))])

    def test_concat_gradients(self):
        probe = RNG.uniform(-1, 1, (1, 5, 3, 3))
        rep = grad_check(probe_loss(lambda p: nnops.concat_channels([p["a"], p["b"]]), probe),
                         {"a": RNG.normal(size=(1, 2, 3, 3)), "b": RNG.normal(size=(1, 3, 3, 3))})
        assert rep.max_error < 1e-4

    def test_add_identity(self):
        x = RNG.normal(size=(1, 2, 3, 3))
        assert np.array_equal(nnops.add(x, np.zeros_like(x)).value, x)

    def test_add_commutes(self):
        x, y = RNG.normal(size=(1, 2, 3, 3)), RNG.normal(size=(1, 2, 3, 3))
        assert nnops.add(x, y).value.tobytes() == nnops.add(y, x).value.tobytes()

    def test_add_gradient(self):
        tape = Tape()
        x, y = tape.leaf(np.ones((1, 1, 2, 2))), tape.leaf(np.ones((1, 1, 2, 2)))
        up = RNG.normal(size=(1, 1, 2, 2))
        g = backward(tape, sum_all(mul(nnops.add(x, y), up)))
        assert np.array_equal(g[x.id], up) and np.array_equal(g[y.id], up)

    def test_add_mismatch(self):
        with pytest.raises(ShapeError):
            nnops.add(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 3)))


class TestSpatialDropout:
    def test_rate_zero(self):
        x = RNG.normal(size=(2, 3, 4, 4))
        for mode in ("train", "eval"):
            assert np.array_equal(nnops.spatial_dropout(x, 0.0, mode, 0).value, x)

    def test_eval_identity(self):
        x = RNG.normal(size=(2, 3, 4, 4))
        assert np.array_equal(nnops.spatial_dropout(x, 0.7, "eval", 0).value, x)

    def test_statistics(self):
        x = np.ones((100, 100, 2, 2))
        out = nnops.spatial_dropout(x, 0.5, "train", 11).value
        dropped = np.all(out == 0.0, axis=(2, 3))
        assert abs(dropped.mean() - 0.5) < 0.02
        kept = out[~dropped]
        assert np.all(kept == 2.0)

    def test_whole_channels_only(self):
        x = RNG.random((4, 16, 5, 5)) + 0.5
        out = nnops.spatial_dropout(x, 0.3, "train", 3).value
        zero_pix = out == 0.0
        # every channel is all-zero or all-nonzero
        assert np.all(zero_pix.all(axis=(2, 3)) | ~zero_pix.any(axis=(2, 3)))

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            nnops.spatial_dropout(np.ones((1, 1, 1, 1)), 1.0, "train", 0)

    def test_gradient_fixed_mask(self):
        probe = RNG.uniform(-1, 1, (2, 6, 3, 3))
        rep = grad_check(probe_loss(lambda p: nnops.spatial_dropout(p["x"], 0.4, "train", 9), probe),
                         {"x": RNG.normal(size=(2, 6, 3, 3))})
        assert rep.max_error < 1e-4


class TestBCE:
    def test_zero_logits(self):
        t = (RNG.random((1, 1, 4, 4)) > 0.5).astype(float)
        assert nnops.bce_loss(np.zeros((1, 1, 4, 4)), t).value.item() == pytest.approx(np.log(2), abs=1e-15)
        assert nnops.bce_loss(np.zeros((1, 1, 4, 4)), t).value.item() == pytest.approx(0.693147, abs=1e-6)

    def test_saturated(self):
        t = np.array([[[[1.0, 0.0]]]])
        assert nnops.bce_loss(np.array([[[[40.0, -40.0]]]]), t).value.item() < 1e-10

    def test_matches_direct_formula(self):
        z = RNG.uniform(-8, 8, (2, 1, 5, 5))
        t = (RNG.random(z.shape) > 0.5).astype(float)
        p = np.clip(1 / (1 + np.exp(-z)), 1e-12, 1 - 1e-12)
        direct = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
        assert abs(nnops.bce_loss(z, t).value.item() - direct) < 1e-9

    def test_non_binary_target(self):
        with pytest.raises(ValueError):
            nnops.bce_loss(np.zeros((1, 1, 2, 2)), np.full((1, 1, 2, 2), 0.5))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-1e6, 1e6), st.sampled_from([0.0, 1.0]))
    def test_finite(self, z, t):
        assert np.isfinite(nnops.bce_loss(np.full((1, 1, 1, 1), z), np.full((1, 1, 1, 1), t)).value.item())

    def test_gradient(self):
        t = (RNG.random((1, 1, 4, 4)) > 0.5).astype(float)
        rep = grad_check(lambda p: nnops.bce_loss(p["z"], t), {"z": RNG.uniform(-3, 3, (1, 1, 4, 4))})
        assert rep.max_error < 1e-4
