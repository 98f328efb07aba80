import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dexined import autodiff as ad
from dexined.autodiff import Tape, Tensor
from dexined.gradcheck import check_op, numerical_grad, relative_error


def naive_conv(x, k, b, stride):
    """Triple-loop SAME cross-correlation (TF padding convention)."""
    n, c, h, w = x.shape
    oc, _, kh, kw = k.shape
    ho, wo = math.ceil(h / stride), math.ceil(w / stride)
    pt = max((ho - 1) * stride + kh - h, 0) // 2
    pl = max((wo - 1) * stride + kw - w, 0) // 2
    out = np.zeros((n, oc, ho, wo))
    for b_ in range(n):
        for o in range(oc):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                yi, xj = i * stride + di - pt, j * stride + dj - pl
                                if 0 <= yi < h and 0 <= xj < w:
                                    acc += x[b_, ci, yi, xj] * k[o, ci, di, dj]
                    out[b_, o, i, j] = acc
    return out


def zero_stuff_tconv(x, k, s):
    """Transposed conv as zero insertion followed by a full correlation with the flipped kernel."""
    n, c, h, w = x.shape
    _, oc, kk, _ = k.shape
    up = np.zeros((n, c, (h - 1) * s + 1, (w - 1) * s + 1))
    up[:, :, ::s, ::s] = x
    up = np.pad(up, ((0, 0), (0, 0), (kk - 1, kk - 1), (kk - 1, kk - 1)))
    flipped = k[:, :, ::-1, ::-1]
    H, W = up.shape[2] - kk + 1, up.shape[3] - kk + 1
    full = np.zeros((n, oc, H, W))
    for o in range(oc):
        for ci in range(c):
            for di in range(kk):
                for dj in range(kk):
                    full[:, o] += up[:, ci, di:di + H, dj:dj + W] * flipped[ci, o, di, dj]
    crop = (kk - s) // 2
    return full[:, :, crop:crop + h * s, crop:crop + w * s]


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 5, 7))
        out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_ones_overlap_counts(self):
        out = ad.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
        assert out[1, 1] == 9 and out[2, 2] == 9
        assert out[0, 0] == 4 and out[3, 3] == 4 and out[0, 3] == 4
        assert out[0, 1] == 6

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_loop_oracle(self, stride):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride).data
        np.testing.assert_allclose(out, naive_conv(x, k, b, stride), atol=1e-12, rtol=0)

    def test_1x1_strided_matches_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 12, 5, 6))
        k = rng.standard_normal((4, 12, 1, 1))
        out = ad.conv2d(Tensor(x), Tensor(k), stride=2).data
        np.testing.assert_allclose(out, naive_conv(x, k, None, 2), atol=1e-12, rtol=0)

    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
            ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    @pytest.mark.parametrize("stride", [0, -1])
    def test_bad_stride(self, stride):
        with pytest.raises(ad.ArgumentError):
            ad.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=stride)

    @given(size=st.integers(1, 64), stride=st.sampled_from([1, 2]))
    @settings(max_examples=60, deadline=None)
    def test_same_shape_law(self, size, stride):
        out = ad.conv2d(Tensor(np.zeros((1, 1, size, size))), Tensor(np.zeros((1, 1, 3, 3))), stride=stride)
        assert out.shape[2:] == (math.ceil(size / stride),) * 2
        pooled = ad.max_pool(Tensor(np.zeros((1, 1, size, size + 1))), stride=stride)
        assert pooled.shape[2:] == (math.ceil(size / stride), math.ceil((size + 1) / stride))


class TestTransposeConv:
    def test_shape(self):
        out = ad.transpose_conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), 2)
        assert out.shape == (1, 1, 4, 4)

    @pytest.mark.parametrize("k,s", [(2, 2), (4, 2), (3, 3), (4, 4)])
    def test_matches_zero_stuffing_oracle(self, k, s):
        rng = np.random.default_rng(k * 10 + s)
        x = rng.standard_normal((2, 3, 3, 4))
        kern = rng.standard_normal((3, 2, k, k))
        out = ad.transpose_conv2d(Tensor(x), Tensor(kern), s).data
        np.testing.assert_allclose(out, zero_stuff_tconv(x, kern, s), atol=1e-12, rtol=0)

    def test_stride_below_two(self):
        with pytest.raises(ad.ArgumentError):
            ad.transpose_conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 1, 1))), 1)

    @pytest.mark.parametrize("size", [2, 4])
    def test_bilinear_constant_preserved(self, size):
        x = np.full((1, 3, 6, 6), 0.37)
        out = ad.transpose_conv2d(Tensor(x), Tensor(ad.bilinear_kernel(size, 3)), 2).data
        np.testing.assert_allclose(out[:, :, 2:-2, 2:-2], 0.37, atol=1e-12)
        if size == 2:
            np.testing.assert_allclose(out, 0.37, atol=1e-12)

    def test_adjoint_of_strided_conv(self):
        # tconv(k, s) is the transpose of VALID conv(k, s) when no cropping is involved.
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 3, 3))
        kern = rng.standard_normal((2, 3, 2, 2))  # [inC, outC, k, k]
        y = rng.standard_normal((1, 3, 6, 6))
        lhs = np.sum(ad.transpose_conv2d(Tensor(x), Tensor(kern), 2).data * y)
        # kern read as a conv kernel is [outC=2, inC=3]: no flip, no transpose
        rhs = np.sum(x * ad.conv2d(Tensor(y), Tensor(kern), stride=2, padding="VALID").data)
        assert abs(lhs - rhs) < 1e-10


class TestBilinear:
    def test_size4_taps(self):
        np.testing.assert_allclose(ad.bilinear_weights_1d(4), [0.25, 0.75, 0.75, 0.25])

    def test_size2(self):
        np.testing.assert_allclose(ad.bilinear_weights_1d(2), [0.5, 0.5])
        k = ad.bilinear_kernel(2, 1)
        # raw taps 0.25 per entry, times 4 so each output pixel sums to one
        np.testing.assert_allclose(k[0, 0], np.full((2, 2), 0.25 * 4))

    def test_no_channel_mixing(self):
        k = ad.bilinear_kernel(4, 3)
        for a in range(3):
            for b in range(3):
                if a != b:
                    assert not k[a, b].any()

    def test_size_error(self):
        with pytest.raises(ad.ArgumentError):
            ad.bilinear_kernel(1, 1)


class TestMaxPool:
    def test_window_max_oracle(self):
        x = np.random.default_rng(4).permutation(16).reshape(1, 1, 4, 4).astype(float)
        out = ad.max_pool(Tensor(x)).data[0, 0]
        # SAME on 4 with stride 2: pad 0 top, 1 bottom
        xp = np.pad(x[0, 0], ((0, 1), (0, 1)), constant_values=-np.inf)
        expected = np.array([[xp[2 * i:2 * i + 3, 2 * j:2 * j + 3].max() for j in range(2)] for i in range(2)])
        np.testing.assert_array_equal(out, expected)

    def test_constant(self):
        out = ad.max_pool(Tensor(np.full((1, 2, 5, 5), 3.0))).data
        np.testing.assert_array_equal(out, 3.0)

    def test_400(self):
        assert ad.max_pool(Tensor(np.zeros((1, 1, 400, 400)))).shape == (1, 1, 200, 200)

    def test_tie_goes_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            y = ad.total(ad.max_pool(x))
        tape.backward(y)
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


class TestBatchNorm:
    def _bn(self, x, g, b, training=True):
        c = x.shape[1]
        return ad.batch_norm(Tensor(x), Tensor(g), Tensor(b), np.zeros(c), np.ones(c), training)

    def test_standardizes(self):
        x = np.random.default_rng(5).standard_normal((4, 3, 5, 5)) * 7 + 2
        out = self._bn(x, np.ones(3), np.zeros(3)).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)

    def test_affine(self):
        x = np.random.default_rng(6).standard_normal((4, 2, 5, 5))
        out = self._bn(x, np.full(2, 2.0), np.full(2, 3.0)).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 3, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2, atol=1e-4)

    def test_running_stats_update(self):
        x = np.random.default_rng(7).standard_normal((2, 1, 4, 4)) + 5
        rm, rv = np.zeros(1), np.ones(1)
        ad.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, True, momentum=0.9)
        np.testing.assert_allclose(rm, 0.1 * x.mean())
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(ddof=1))

    def test_infer_uses_running_stats(self):
        x = np.random.default_rng(8).standard_normal((1, 1, 3, 3))
        out = ad.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                            np.array([1.0]), np.array([4.0]), training=False, epsilon=0.0).data
        np.testing.assert_allclose(out, (x - 1) / 2)

    def test_zero_batch(self):
        with pytest.raises(ad.ArgumentError):
            self._bn(np.zeros((0, 2, 3, 3)), np.ones(2), np.zeros(2))

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, training):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((3, 2, 4, 4))
        g = rng.standard_normal(2) + 1
        b = rng.standard_normal(2)

        def fn(xt, gt, bt):
            return ad.batch_norm(xt, gt, bt, np.zeros(2), np.full(2, 1.5), training)

        assert check_op(fn, [x, g, b]) < 1e-4


class TestActivations:
    def test_values(self):
        assert ad.sigmoid(Tensor(np.array(0.0))).data == 0.5
        np.testing.assert_array_equal(ad.relu(Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])
        with pytest.raises(ad.ArgumentError):
            ad.activation(Tensor(np.zeros(1)), "tanh")

    def test_sigmoid_extreme_finite(self):
        out = ad.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
        assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0

    def test_sigmoid_grad_fd(self):
        x = np.linspace(-6, 6, 25)
        t = Tensor(x.copy(), requires_grad=True)
        with Tape() as tape:
            y = ad.total(ad.sigmoid(t))
        tape.backward(y)
        s = 1 / (1 + np.exp(-x))
        np.testing.assert_allclose(t.grad, s * (1 - s), atol=1e-15)
        num = numerical_grad(lambda: float(ad.sigmoid(Tensor(t.data)).data.sum()), t.data, step=1e-5)
        assert np.max(np.abs(num - t.grad)) < 1e-6

    def test_relu_backward_mask(self):
        t = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
        with Tape() as tape:
            y = ad.total(ad.relu(t))
        tape.backward(y)
        np.testing.assert_array_equal(t.grad, [0, 1, 1])


class TestPixelShuffle:
    def test_layout(self):
        out = ad.pixel_shuffle(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)), 2).data
        np.testing.assert_array_equal(out[0, 0], [[1, 2], [3, 4]])

    def test_inverse(self):
        x = np.random.default_rng(10).standard_normal((2, 8, 3, 5))
        back = ad.pixel_unshuffle(ad.pixel_shuffle(Tensor(x), 2), 2).data
        np.testing.assert_array_equal(back, x)

    def test_index_formula(self):
        r = 3
        x = np.random.default_rng(11).standard_normal((2, 2 * r * r, 3, 4))
        out = ad.pixel_shuffle(Tensor(x), r).data
        for n, c, y, xx in np.ndindex(out.shape):
            h, i = divmod(y, r)
            w, j = divmod(xx, r)
            assert out[n, c, y, xx] == x[n, c * r * r + i * r + j, h, w]

    def test_bad_channels(self):
        with pytest.raises(ad.ShapeError):
            ad.pixel_shuffle(Tensor(np.zeros((1, 6, 2, 2))), 2)


class TestElementwise:
    def test_average_of_copies(self):
        x = np.random.default_rng(12).standard_normal((1, 2, 3, 3))
        np.testing.assert_allclose(ad.average([Tensor(x)] * 4).data, x, rtol=1e-15)

    def test_add_negation(self):
        x = np.random.default_rng(13).standard_normal((2, 3))
        np.testing.assert_array_equal(ad.add(Tensor(x), Tensor(-x)).data, 0)

    def test_average_grad(self):
        ts = [Tensor(np.ones((1, 1, 2, 2)), requires_grad=True) for _ in range(3)]
        with Tape() as tape:
            y = ad.total(ad.average(ts))
        tape.backward(y)
        for t in ts:
            np.testing.assert_allclose(t.grad, 1 / 3)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
        with pytest.raises(ad.ShapeError):
            ad.average([Tensor(np.zeros(2)), Tensor(np.zeros(3))])


class TestBackward:
    def test_linear(self):
        x = np.random.default_rng(14).standard_normal((1, 3, 4, 4))
        w = Tensor(np.random.default_rng(15).standard_normal((1, 3, 1, 1)), requires_grad=True)
        with Tape() as tape:
            loss = ad.total(ad.conv2d(Tensor(x), w))
        tape.backward(loss)
        np.testing.assert_allclose(w.grad[0, :, 0, 0], x.sum(axis=(0, 2, 3)), rtol=1e-14)

    def test_unreachable_has_no_grad(self):
        used = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            ad.scale(unused, 2.0)  # recorded but not on the loss path
            loss = ad.total(ad.scale(used, 2.0))
        tape.backward(loss)
        assert unused.grad is None
        np.testing.assert_array_equal(used.grad, 2.0)

    def test_non_scalar(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ad.scale(t, 2.0)
        with pytest.raises(ad.ArgumentError):
            tape.backward(y)

    def test_stale_grad_is_error(self):
        t = Tensor(np.ones(3), requires_grad=True)
        for attempt in range(2):
            with Tape() as tape:
                loss = ad.total(t)
            if attempt == 0:
                ad.backward(loss)
            else:
                with pytest.raises(ad.GradientStateError):
                    ad.backward(loss)
        t.zero_grad()
        with Tape():
            loss = ad.total(t)
        ad.backward(loss)

    def test_tape_order_is_recording_order(self):
        t = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            a = ad.relu(t)
            b = ad.scale(a, 3.0)
            ad.total(b)
        assert [n.op for n in tape.nodes] == ["relu", "scale", "sum"]

    def test_no_tape_no_record(self):
        t = Tensor(np.ones(2), requires_grad=True)
        y = ad.total(t)
        assert y.tape is None


def _rand(rng, *shape):
    return rng.standard_normal(shape)


OPS = {
    "conv2d_s1": (lambda x, k, b: ad.conv2d(x, k, b), lambda r: [_rand(r, 2, 3, 5, 5), _rand(r, 2, 3, 3, 3), _rand(r, 2)]),
    "conv2d_s2": (lambda x, k: ad.conv2d(x, k, stride=2), lambda r: [_rand(r, 1, 2, 6, 5), _rand(r, 3, 2, 3, 3)]),
    "conv2d_1x1": (lambda x, k, b: ad.conv2d(x, k, b, stride=2), lambda r: [_rand(r, 2, 10, 4, 4), _rand(r, 3, 10, 1, 1), _rand(r, 3)]),
    "conv2d_1x1_small": (lambda x, k: ad.conv2d(x, k), lambda r: [_rand(r, 1, 6, 3, 3), _rand(r, 1, 6, 1, 1)]),
    "tconv_k2": (lambda x, k, b: ad.transpose_conv2d(x, k, 2, b), lambda r: [_rand(r, 1, 2, 3, 3), _rand(r, 2, 3, 2, 2), _rand(r, 3)]),
    "tconv_k4": (lambda x, k: ad.transpose_conv2d(x, k, 2), lambda r: [_rand(r, 1, 2, 3, 3), _rand(r, 2, 1, 4, 4)]),
    "max_pool": (lambda x: ad.max_pool(x), lambda r: [_rand(r, 2, 2, 5, 6)]),
    "relu": (ad.relu, lambda r: [_rand(r, 1, 2, 4, 4)]),
    "sigmoid": (ad.sigmoid, lambda r: [_rand(r, 1, 2, 4, 4)]),
    "pixel_shuffle": (lambda x: ad.pixel_shuffle(x, 2), lambda r: [_rand(r, 1, 8, 2, 3)]),
    "concat": (lambda a, b: ad.concat([a, b]), lambda r: [_rand(r, 1, 2, 3, 3), _rand(r, 1, 1, 3, 3)]),
    "crop": (lambda x: ad.crop(x, 1, 0, 2, 3), lambda r: [_rand(r, 1, 2, 4, 4)]),
    "add": (ad.add, lambda r: [_rand(r, 1, 1, 3, 3), _rand(r, 1, 1, 3, 3)]),
    "average": (lambda a, b, c: ad.average([a, b, c]), lambda r: [_rand(r, 2, 3), _rand(r, 2, 3), _rand(r, 2, 3)]),
    "scale": (lambda a: ad.scale(a, -1.7), lambda r: [_rand(r, 2, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    fn, make = OPS[name]
    err = check_op(fn, make(np.random.default_rng(sorted(OPS).index(name))))
    assert err < 1e-3, f"{name}: rel err {err:.2e}"


LINEAR = {
    "conv2d_s1": (lambda x, k: ad.conv2d(x, k), [(1, 3, 5, 5), (2, 3, 3, 3)]),
    "conv2d_s2": (lambda x, k: ad.conv2d(x, k, stride=2), [(1, 2, 6, 5), (3, 2, 3, 3)]),
    "conv2d_1x1": (lambda x, k: ad.conv2d(x, k, stride=2), [(2, 10, 4, 4), (3, 10, 1, 1)]),
    "tconv_k2": (lambda x, k: ad.transpose_conv2d(x, k, 2), [(1, 2, 3, 3), (2, 3, 2, 2)]),
    "tconv_k4": (lambda x, k: ad.transpose_conv2d(x, k, 2), [(1, 2, 3, 3), (2, 1, 4, 4)]),
    "pixel_shuffle": (lambda x: ad.pixel_shuffle(x, 2), [(1, 8, 2, 3)]),
    "crop": (lambda x: ad.crop(x, 1, 0, 2, 3), [(1, 2, 4, 4)]),
    "average": (lambda x: ad.average([x, ad.scale(x, 2.0)]), [(2, 3)]),
    "bn_infer": (lambda x: ad.batch_norm(x, Tensor(np.full(2, 1.3)), Tensor(np.zeros(2)), np.zeros(2),
                                         np.full(2, 2.0), training=False), [(1, 2, 3, 3)]),
}


@pytest.mark.parametrize("name", sorted(LINEAR))
def test_adjoint_identity(name):
    """<L x, y> == <x, L^T y>, L^T taken from the tape, for ops linear in their first argument."""
    fn, shapes = LINEAR[name]
    rng = np.random.default_rng(100)
    x = Tensor(rng.standard_normal(shapes[0]), requires_grad=True)
    rest = [Tensor(rng.standard_normal(s)) for s in shapes[1:]]
    out = fn(x, *rest)
    y = rng.standard_normal(out.shape)
    with Tape() as tape:
        o = fn(x, *rest)
        loss = ad.record("dot", (o,), np.asarray(np.sum(o.data * y)), lambda g: (g * y,))
    tape.backward(loss)
    lhs = float(np.sum(out.data * y))
    rhs = float(np.sum(x.data * x.grad))
    assert abs(lhs - rhs) < 1e-10


def test_relative_error_floor():
    assert relative_error([0.0], [1e-9]) < 1e-2


def test_determinism_bit_identical():
    rng = np.random.default_rng(16)
    x, k = rng.standard_normal((1, 3, 9, 9)), rng.standard_normal((4, 3, 3, 3))
    a = ad.conv2d(Tensor(x), Tensor(k), stride=2).data
    b = ad.conv2d(Tensor(x.copy()), Tensor(k.copy()), stride=2).data
    assert a.tobytes() == b.tobytes()
