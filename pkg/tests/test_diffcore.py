import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msca import diffcore as dc
from msca.diffcore import ShapeError, Tape, Tensor, grad_check
from msca.diffcore.suite import PRIMITIVES, check_primitive, run_suite

from conftest import t64


def naive_conv3x3(x, w, b, stride):
    cin, h, wd = x.shape
    cout = w.shape[0]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[co] if b is not None else 0.0
                for ci in range(cin):
                    for di in range(3):
                        for dj in range(3):
                            y, xx = i * stride + di - 1, j * stride + dj - 1
                            if 0 <= y < h and 0 <= xx < wd:
                                acc += w[co, ci, di, dj] * x[ci, y, xx]
                out[co, i, j] = acc
    return out


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def bilinear_up2_oracle(x):
    # closed-form weights: output o samples source (o + 0.5) / 2 - 0.5, clamped at the borders
    c, h, w = x.shape

    def taps(o, n):
        s = min(max((o + 0.5) / 2 - 0.5, 0.0), n - 1)
        i0 = int(math.floor(s))
        i1 = min(i0 + 1, n - 1)
        return [(i0, 1 - (s - i0)), (i1, s - i0)]

    out = np.zeros((c, 2 * h, 2 * w))
    for ch in range(c):
        for oy in range(2 * h):
            for ox in range(2 * w):
                out[ch, oy, ox] = sum(wy * wx * x[ch, iy, ix]
                                      for iy, wy in taps(oy, h) for ix, wx in taps(ox, w))
    return out


class TestConv1x1:
    def test_identity_kernel(self, rng):
        x = t64(rng.normal(size=(4, 3, 5)))
        out = dc.conv1x1(x, t64(np.eye(4)), t64(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_summation(self):
        out = dc.conv1x1(Tensor(np.ones((3, 2, 2))), Tensor(np.ones((1, 3))))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 3.0))

    def test_input_gradient_is_weight_column_sums(self, f64, rng):
        w = rng.normal(size=(5, 3))
        x = t64(rng.normal(size=(3, 4, 4)), requires_grad=True)
        with Tape() as tape:
            s = dc.sum(dc.conv1x1(x, t64(w)))
        (gx,) = tape.gradient(s, [x])
        np.testing.assert_allclose(gx, np.broadcast_to(w.sum(axis=0)[:, None, None], (3, 4, 4)))
        # same quantity from central differences
        report = grad_check(lambda xx: dc.sum(dc.conv1x1(xx, t64(w))), x, eps=1e-4)
        assert report.passed

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="input channels"):
            dc.conv1x1(Tensor(np.ones((3, 2, 2))), Tensor(np.ones((1, 4))))


class TestConv3x3:
    def test_impulse_response(self, rng):
        k = rng.normal(size=(1, 1, 3, 3))
        x = np.zeros((1, 5, 5))
        x[0, 2, 2] = 1.0
        out = dc.conv3x3(t64(x), t64(k)).data
        # cross-correlation of a delta gives the flipped kernel around the delta
        np.testing.assert_allclose(out[0, 1:4, 1:4], k[0, 0, ::-1, ::-1])
        assert out[0, 2, 2] == pytest.approx(k[0, 0, 1, 1])

    def test_zero_kernel(self, rng):
        out = dc.conv3x3(t64(rng.normal(size=(2, 4, 4))), t64(np.zeros((3, 2, 3, 3))))
        assert not out.data.any()

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("h,w", [(5, 5), (4, 6), (7, 3)])
    def test_matches_naive(self, rng, stride, h, w):
        x = rng.normal(size=(2, h, w))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = dc.conv3x3(t64(x), t64(k), t64(b), stride=stride).data
        np.testing.assert_allclose(out, naive_conv3x3(x, k, b, stride), rtol=1e-12, atol=1e-12)

    def test_bad_stride(self):
        with pytest.raises(ValueError):
            dc.conv3x3(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=3)


class TestBilinear:
    def test_constant(self):
        out = dc.bilinear_up2(Tensor(np.full((2, 3, 5), 5.0)))
        assert out.shape == (2, 6, 10)
        np.testing.assert_allclose(out.data, 5.0, rtol=1e-6)

    def test_single_pixel(self):
        np.testing.assert_allclose(dc.bilinear_up2(t64([[[7.0]]])).data, np.full((1, 2, 2), 7.0))

    def test_hand_computed(self):
        x = np.array([[[0.0, 1.0], [2.0, 3.0]]])
        expected = np.array([[[0.0, 0.25, 0.75, 1.0],
                              [0.5, 0.75, 1.25, 1.5],
                              [1.5, 1.75, 2.25, 2.5],
                              [2.0, 2.25, 2.75, 3.0]]])
        np.testing.assert_allclose(bilinear_up2_oracle(x), expected)
        np.testing.assert_allclose(dc.bilinear_up2(t64(x)).data, expected, atol=1e-15)

    def test_random_vs_oracle(self, rng):
        x = rng.normal(size=(2, 3, 4))
        np.testing.assert_allclose(dc.bilinear_up2(t64(x)).data, bilinear_up2_oracle(x), atol=1e-12)


class TestSoftmax:
    def test_uniform_spatial(self):
        np.testing.assert_array_equal(dc.softmax_spatial(t64(np.zeros((3, 2, 2)))).data, 0.25)

    def test_saturation(self):
        x = np.zeros((1, 3, 3))
        x[0, 1, 2] = 1000.0
        y = dc.softmax_spatial(t64(x)).data
        assert y.max() >= 1 - 1e-6
        assert np.isfinite(y).all()

    def test_closed_form_spatial(self):
        x = np.log(np.array([1.0, 2.0, 4.0, 8.0])).reshape(1, 2, 2)
        y = dc.softmax_spatial(t64(x)).data.reshape(-1)
        np.testing.assert_allclose(y, np.array([1, 2, 4, 8]) / 15, rtol=1e-14)

    def test_channel_single(self, rng):
        np.testing.assert_array_equal(dc.softmax_channel(t64(rng.normal(size=(1, 3, 3)))).data, 1.0)

    def test_channel_uniform(self):
        np.testing.assert_array_equal(dc.softmax_channel(t64(np.zeros((4, 2, 3)))).data, 0.25)

    def test_channel_closed_form(self):
        x = np.zeros((2, 2, 2))
        x[1] = np.log(3.0)
        y = dc.softmax_channel(t64(x)).data
        np.testing.assert_allclose(y[0], 0.25, rtol=1e-14)
        np.testing.assert_allclose(y[1], 0.75, rtol=1e-14)

    @pytest.mark.parametrize("op", [dc.softmax_spatial, dc.softmax_channel])
    def test_rejects_non_finite(self, op):
        x = np.zeros((2, 2, 2))
        x[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            op(t64(x))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1),
           st.floats(-50, 50))
    def test_normalized_and_shift_invariant(self, k, h, w, seed, shift):
        x = np.random.default_rng(seed).normal(scale=3.0, size=(k, h, w))
        ys = dc.softmax_spatial(t64(x)).data
        assert (ys > 0).all()
        np.testing.assert_allclose(ys.sum(axis=(1, 2)), 1.0, atol=1e-6)
        np.testing.assert_allclose(dc.softmax_spatial(t64(x + shift)).data, ys, atol=1e-6)
        yc = dc.softmax_channel(t64(x)).data
        assert (yc > 0).all()
        np.testing.assert_allclose(yc.sum(axis=0), 1.0, atol=1e-6)
        np.testing.assert_allclose(dc.softmax_channel(t64(x + shift)).data, yc, atol=1e-6)


class TestSmallOps:
    def test_gap(self):
        assert dc.gap(t64([[[1.0, 3.0], [5.0, 7.0]]])).data[0] == 4.0
        np.testing.assert_array_equal(dc.gap(t64(np.full((2, 3, 3), 2.5))).data, [2.5, 2.5])

    def test_gap_gradient_uniform(self, rng):
        x = t64(rng.normal(size=(2, 3, 4)), requires_grad=True)
        with Tape() as tape:
            s = dc.sum(dc.gap(x))
        np.testing.assert_allclose(tape.gradient(s, [x])[0], 1 / 12)

    def test_matmul(self, rng):
        b = rng.normal(size=(3, 5))
        np.testing.assert_array_equal(dc.matmul(t64(np.eye(3)), t64(b)).data, b)
        assert dc.matmul(t64([[2.0]]), t64([[3.5]])).data[0, 0] == 7.0
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(dc.matmul(t64(a), t64(b)).data, naive_matmul(a, b), rtol=1e-12)
        with pytest.raises(ShapeError):
            dc.matmul(t64(a), t64(a))

    def test_leaky_relu(self):
        y = dc.leaky_relu(t64([2.0, -10.0, 0.0])).data
        np.testing.assert_array_equal(y, [2.0, 1.0, 0.0])

    def test_leaky_relu_gradient(self):
        x = t64([-3.0, -0.5, 0.0, 4.0], requires_grad=True)
        with Tape() as tape:
            s = dc.sum(dc.leaky_relu(x))
        np.testing.assert_array_equal(tape.gradient(s, [x])[0], [-0.1, -0.1, 1.0, 1.0])

    def test_sigmoid(self):
        y = dc.sigmoid(t64([0.0, np.inf, -np.inf, 700.0, -700.0])).data
        assert y[0] == 0.5 and y[1] == 1.0 and y[2] == 0.0
        assert np.isfinite(y).all()

    def test_sigmoid_derivative(self):
        x = t64([2.0], requires_grad=True)
        with Tape() as tape:
            s = dc.sum(dc.sigmoid(x))
        h = 1e-6
        sig = lambda v: 1 / (1 + math.exp(-v))  # noqa: E731
        numeric = (sig(2 + h) - sig(2 - h)) / (2 * h)
        assert tape.gradient(s, [x])[0][0] == pytest.approx(numeric, rel=1e-8)
        assert numeric == pytest.approx(sig(2) * (1 - sig(2)), rel=1e-8)

    def test_reshape_roundtrip(self, rng):
        x = t64(rng.normal(size=(3, 4, 5)))
        back = dc.reshape(dc.reshape(x, (3, 20)), (3, 4, 5))
        np.testing.assert_array_equal(back.data, x.data)


class TestTensor:
    def test_immutable(self):
        t = Tensor(np.zeros(3))
        with pytest.raises(ValueError):
            t.data[0] = 1.0

    def test_copy_on_construct(self):
        a = np.zeros(3)
        t = Tensor(a)
        a[0] = 5.0
        assert t.data[0] == 0.0

    def test_default_dtype(self):
        assert Tensor([1.0]).dtype == np.float32
        with dc.precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_no_recording_outside_tape(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = dc.mul(x, 2.0)
        assert y._node is None

    def test_tape_order_and_replay(self, f64, rng):
        x = t64(rng.normal(size=(2, 4, 4)), requires_grad=True)
        w = t64(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        with Tape() as tape:
            y = dc.softmax_spatial(dc.conv3x3(dc.leaky_relu(x), w))
            dc.sum(dc.bilinear_up2(y))
        ops = [n.op for n in tape.nodes]
        assert ops == ["leaky_relu", "conv3x3", "softmax_spatial", "bilinear_up2", "sum"]
        # every node's inputs were produced earlier on the tape
        seen = {id(x), id(w)}
        for node in tape.nodes:
            assert all(id(i) in seen for i in node.inputs if i.tracked)
            seen.add(id(node.output))
        for node, again in zip(tape.nodes, tape.replay()):
            np.testing.assert_array_equal(again, node.output.data)

    def test_gradient_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = dc.mul(x, 2.0)
        with pytest.raises(ShapeError):
            tape.gradient(y, [x])


# ---------------------------------------------------------------- gradient suite

@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("c,h,w", [(1, 1, 1), (2, 3, 5), (3, 8, 8), (2, 16, 16)])
def test_primitive_gradients(name, c, h, w):
    report = check_primitive(name, c, h, w, seed=zlib.crc32(f"{name}{c}{h}{w}".encode()))
    assert report.passed, (name, report)


def _broken_square(x):
    # value x^2, but one factor is a constant so the gradient is x instead of 2x
    return dc.mul(x, dc.Tensor(x.data))


def test_suite_flags_wrong_gradient():
    table = {"broken": (_broken_square, lambda c, h, w, r: [r.normal(size=(c, h, w))])}
    results = run_suite(sizes=((2, 3, 3),), primitives=table)
    assert len(results) == 1 and not results[0].report.passed
    assert results[0].line().endswith("FAIL")


def test_suite_passes_on_library():
    results = run_suite(sizes=((2, 3, 5),))
    assert {r.name for r in results} == set(PRIMITIVES)
    assert all(r.report.passed for r in results)


class TestGradCheck:
    def test_linear_exact(self, f64, rng):
        a = t64(rng.normal(size=(4, 3)))
        report = grad_check(lambda x: dc.sum(dc.mul(x, a)), t64(rng.normal(size=(4, 3))))
        assert report.max_rel_error <= 1e-10

    def test_corrupted_backward_fails(self, f64, rng):
        def bad_square(x):
            xd = x.data
            return dc.record("bad_square", xd * xd, (x,), lambda g: (g * 3 * xd,), lambda a: a * a)

        report = grad_check(lambda x: dc.sum(bad_square(x)), t64(rng.normal(size=5)))
        assert not report.passed

    def test_rejects_vector_output(self, f64):
        with pytest.raises(ShapeError):
            grad_check(lambda x: dc.mul(x, 2.0), t64(np.ones(3)))

    def test_rejects_non_finite_theta(self, f64):
        with pytest.raises(ValueError):
            grad_check(lambda x: dc.sum(x), t64([np.inf]))


class TestGradCheckStencils:
    def test_fourth_order_beats_second_on_smooth_cubic(self, f64):
        x = Tensor(np.array([0.7, -1.3]))
        f = lambda t: dc.sum(dc.mul(dc.mul(t, t), t))  # noqa: E731
        r2 = grad_check(f, x, eps=1e-2, tol=1.0)
        r4 = grad_check(f, x, eps=1e-2, tol=1.0, stencil=4)
        assert r4.max_rel_error < 1e-10 < r2.max_rel_error

    def test_kink_avoidance_shrinks_step(self, f64):
        # the kink of |t| sits 1e-4 away: a 1e-3 step straddles it
        x = Tensor(np.array([1e-4]))
        f = lambda t: dc.sum(dc.abs(t))  # noqa: E731
        assert not grad_check(f, x, eps=1e-3).passed
        assert grad_check(f, x, eps=1e-3, avoid_kinks=True).passed

    def test_rejects_unknown_stencil(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: dc.sum(t), Tensor(np.ones(2)), stencil=3)
