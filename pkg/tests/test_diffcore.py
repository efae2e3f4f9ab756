"""Primitive-op semantics, gradients vs finite differences, and AdamW."""

import zlib

import numpy as np
import pytest

from fusedet.diffcore import (
    AdamW,
    OptimizerState,
    ShapeError,
    Tensor,
    adamw_step,
    grad_check,
    lr_at_step,
    ops,
    primitive_forward,
)


def rand(shape, rng, dtype=np.float32, scale=1.0):
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype))


class TestForwardSemantics:
    def test_identity_conv(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 4, 4, 3)).astype(np.float32))
        kernel = Tensor(np.eye(3, dtype=np.float32).reshape(1, 1, 3, 3))
        out = ops.conv2d(x, kernel, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_softmax_uniform_on_zeros(self):
        out = ops.softmax(Tensor(np.zeros((1, 4), np.float32)), axis=-1)
        np.testing.assert_allclose(out.data, 0.25, atol=1e-7)

    def test_matmul_identity(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], np.float32))
        eye = Tensor(np.eye(2, dtype=np.float32))
        np.testing.assert_array_equal(ops.matmul(a, eye).data, a.data)

    def test_softmax_rows_stochastic(self):
        rng = np.random.default_rng(1)
        out = ops.softmax(rand((6, 9), rng, scale=3.0), axis=-1)
        assert (out.data >= 0).all()
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_concat_split_roundtrip(self):
        rng = np.random.default_rng(2)
        parts = [rand((2, n, 3), rng) for n in (1, 4, 2)]
        merged = ops.concat(parts, axis=1)
        back = ops.split(merged, [1, 4, 2], axis=1)
        for orig, out in zip(parts, back):
            np.testing.assert_array_equal(out.data, orig.data)

    def test_upsample_constant_preserved(self):
        const = Tensor(np.full((1, 3, 5, 2), 0.7, np.float32))
        out = ops.upsample2d_bilinear(const, 2)
        assert out.shape == (1, 6, 10, 2)
        np.testing.assert_allclose(out.data, 0.7, atol=1e-7)

    def test_shape_mismatch_names_op(self):
        a = Tensor(np.zeros((2, 3), np.float32))
        b = Tensor(np.zeros((4, 5), np.float32))
        with pytest.raises(ShapeError, match="matmul.*2, 3.*4, 5"):
            ops.matmul(a, b)

    def test_primitive_forward_dispatch(self):
        x = Tensor(np.ones((2, 2), np.float32))
        out = primitive_forward("sum", [x])
        assert out.item() == 4.0
        with pytest.raises(ShapeError, match="unknown op_kind"):
            primitive_forward("frobnicate", [x])

    def test_avg_pool_rejects_indivisible(self):
        x = Tensor(np.zeros((1, 5, 4, 1), np.float32))
        with pytest.raises(ShapeError, match="avg_pool2d"):
            ops.avg_pool2d(x, 2)


class TestBackwardExamples:
    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
        ops.sum_(ops.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-6)

    def test_relu_gradient(self):
        x = Tensor(np.array([-1.0, 1.0], np.float32), requires_grad=True)
        ops.sum_(ops.relu(x)).backward()
        np.testing.assert_allclose(x.grad, [0.0, 1.0])

    def test_softmax_sum_gradient_zero(self):
        x = Tensor(np.random.default_rng(3).normal(size=(2, 5)).astype(np.float32),
                   requires_grad=True)
        ops.sum_(ops.softmax(x, axis=-1)).backward()
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-6)

    def test_backward_accumulates_without_reset(self):
        x = Tensor(np.array([3.0], np.float32), requires_grad=True)
        loss = ops.sum_(ops.mul(x, x))
        loss.backward()
        first = x.grad.copy()
        ops.sum_(ops.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * first)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones((2,), np.float32), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            ops.mul(x, x).backward()


def rand_kink_safe(shape, rng, dtype=np.float32):
    """Values bounded away from 0 with guaranteed pairwise gaps, so finite
    differences never cross a ReLU kink or flip a max-pool argmax."""
    n = int(np.prod(shape))
    magnitudes = np.linspace(0.1, 1.0, n)
    signs = rng.choice([-1.0, 1.0], size=n)
    vals = rng.permuted(magnitudes * signs) + rng.uniform(-0.003, 0.003, n)
    return Tensor(vals.reshape(shape).astype(dtype))


# one gradcheck target per primitive; shapes stay tiny so FD is cheap.
# entries: (input shape, function, const shapes, float32 eps, kink-safe?)
GRAD_CASES = {
    "matmul": ((3, 4), lambda x, c: ops.sum_(ops.mul(ops.matmul(x, c[0]), c[1])),
               [(4, 2), (3, 2)], 3e-2, False),
    "conv2d": ((1, 5, 5, 2), lambda x, c: ops.sum_(ops.mul(
        ops.conv2d(x, c[0], 1, 1), c[1])), [(3, 3, 2, 3), (1, 5, 5, 3)], 3e-2, False),
    "conv2d_strided": ((1, 6, 6, 2), lambda x, c: ops.sum_(ops.mul(
        ops.conv2d(x, c[0], 2, 1), c[1])), [(3, 3, 2, 3), (1, 3, 3, 3)], 3e-2, False),
    "avg_pool2d": ((1, 4, 6, 2), lambda x, c: ops.sum_(ops.mul(
        ops.avg_pool2d(x, 2), c[0])), [(1, 2, 3, 2)], 3e-2, False),
    "max_pool2d": ((1, 4, 4, 2), lambda x, c: ops.sum_(ops.mul(
        y := ops.max_pool2d(x, 2), y)), [], 1e-3, True),
    "relu": ((7,), lambda x, c: ops.sum_(ops.mul(y := ops.relu(x), y)), [],
             1e-3, True),
    "sigmoid": ((5,), lambda x, c: ops.sum_(ops.mul(y := ops.sigmoid(x), y)), [],
                3e-2, False),
    "softmax": ((3, 5), lambda x, c: ops.sum_(ops.mul(ops.softmax(x, -1), c[0])),
                [(3, 5)], 1e-2, False),
    "log_softmax": ((3, 5), lambda x, c: ops.sum_(ops.mul(ops.log_softmax(x, -1),
                                                          c[0])), [(3, 5)], 1e-2, False),
    "layer_norm": ((1, 24), lambda x, c: ops.sum_(ops.mul(
        ops.layer_norm(x, -1), c[0])), [(1, 24)], 2e-2, True),
    "add": ((4, 3), lambda x, c: ops.sum_(ops.mul(y := ops.add(x, c[0]), y)),
            [(3,)], 3e-2, False),
    "sub": ((4, 3), lambda x, c: ops.sum_(ops.mul(y := ops.sub(x, c[0]), y)),
            [(4, 3)], 3e-2, False),
    "mul": ((4, 3), lambda x, c: ops.sum_(ops.mul(ops.mul(x, c[0]), x)),
            [(4, 3)], 3e-2, False),
    "neg": ((5,), lambda x, c: ops.sum_(ops.mul(y := ops.neg(x), y)), [],
            3e-2, False),
    "log": ((6,), lambda x, c: ops.sum_(ops.log(ops.add(ops.mul(x, x),
            Tensor(np.full((6,), 0.5, x.dtype))))), [], 1e-2, False),
    "concat": ((2, 3), lambda x, c: ops.sum_(ops.mul(
        y := ops.concat([x, c[0]], axis=0), y)), [(1, 3)], 3e-2, False),
    "split": ((4, 3), lambda x, c: ops.sum_(ops.mul(
        y := ops.split(x, [1, 3], axis=0)[1], y)), [], 3e-2, False),
    "reshape": ((2, 6), lambda x, c: ops.sum_(ops.mul(
        y := ops.reshape(x, (3, 4)), y)), [], 3e-2, False),
    "transpose": ((2, 3, 4), lambda x, c: ops.sum_(ops.mul(
        y := ops.transpose(x, (2, 0, 1)), y)), [], 3e-2, False),
    "upsample2d_bilinear": ((1, 3, 4, 2), lambda x, c: ops.sum_(ops.mul(
        ops.upsample2d_bilinear(x, 2), c[0])), [(1, 6, 8, 2)], 3e-2, False),
    "sum": ((3, 4), lambda x, c: ops.sum_(ops.mul(ops.sum_(x, axis=1), c[0])),
            [(3,)], 3e-2, False),
    "mean": ((3, 4), lambda x, c: ops.sum_(ops.mul(ops.mean(x, axis=0), c[0])),
             [(4,)], 3e-2, False),
}


def _case_input(name, shape, kink_safe, rng, dtype):
    if kink_safe:
        return rand_kink_safe(shape, rng, dtype)
    return rand(shape, rng, dtype=dtype, scale=0.5)


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck_float32(name):
    shape, fn, const_shapes, eps, kink_safe = GRAD_CASES[name]
    for trial in range(20):
        rng = np.random.default_rng([trial, zlib.crc32(name.encode())])
        consts = [rand(s, rng, scale=0.5) for s in const_shapes]
        x = _case_input(name, shape, kink_safe, rng, np.float32)
        report = grad_check(lambda t: fn(t, consts), x, eps=eps, tol=1e-2)
        assert report.passed, f"{name} trial {trial}: {report.max_rel_error:.3e}"


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck_float64(name):
    shape, fn, const_shapes, _, kink_safe = GRAD_CASES[name]
    for trial in range(20):
        rng = np.random.default_rng([trial, zlib.crc32(name.encode())])
        consts = [rand(s, rng, dtype=np.float64, scale=0.5) for s in const_shapes]
        x = _case_input(name, shape, kink_safe, rng, np.float64)
        report = grad_check(lambda t: fn(t, consts), x, eps=1e-5, tol=1e-5)
        assert report.passed, f"{name} trial {trial}: {report.max_rel_error:.3e}"


class TestGradCheckHarness:
    def test_quadratic_passes(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(-1, 1, size=8).astype(np.float32))
        report = grad_check(lambda t: ops.sum_(ops.mul(t, t)), x, eps=1e-3, tol=1e-3)
        assert report.passed

    def test_planted_bug_fails(self):
        # op with a deliberately wrong gradient rule: claims d(x^2) = 3x
        def buggy_square(x):
            from fusedet.diffcore.tensor import make_result

            def backward(g):
                x.accumulate_grad(g * 3.0 * x.data)

            return make_result(x.data * x.data, (x,), backward)

        x = Tensor(np.random.default_rng(6).uniform(0.5, 1.5, 8).astype(np.float32))
        report = grad_check(lambda t: ops.sum_(buggy_square(t)), x,
                            eps=1e-3, tol=1e-2)
        assert not report.passed

    def test_non_finite_reported(self):
        x = Tensor(np.zeros(3, np.float32))
        report = grad_check(lambda t: ops.sum_(ops.log(t)), x, eps=1e-3, tol=1e-2)
        assert not report.passed
        assert "non-finite" in report.message


class TestAdamW:
    def test_hand_evaluated_first_step(self):
        # m_hat = 0.5, v_hat = 0.25 after one step on g = 0.5
        p = Tensor(np.array([1.0], np.float32), requires_grad=True)
        state = OptimizerState([p], base_lr=1e-4, weight_decay=1e-4)
        adamw_step([p], [np.array([0.5], np.float32)], state)
        assert state.step_count == 1
        np.testing.assert_allclose(p.data, 0.999899990002, atol=1e-9)

    def test_zero_grad_no_decay_is_identity(self):
        start = np.array([0.7, -0.3], np.float32)
        p = Tensor(start.copy(), requires_grad=True)
        state = OptimizerState([p], base_lr=1e-4, weight_decay=0.0)
        adamw_step([p], [np.zeros(2, np.float32)], state)
        np.testing.assert_array_equal(p.data, start)

    def test_zero_grad_pure_decay(self):
        p = Tensor(np.array([2.0], np.float64), requires_grad=True)
        state = OptimizerState([p], base_lr=1e-4, weight_decay=1e-4)
        adamw_step([p], [np.zeros(1, np.float64)], state)
        np.testing.assert_allclose(p.data, 2.0 - 1e-4 * 1e-4 * 2.0, rtol=1e-12)

    def test_moments_start_at_zero_and_step_increments(self):
        p = Tensor(np.ones(3, np.float32), requires_grad=True)
        opt = AdamW([p])
        assert opt.step_count == 0
        assert not opt.state.m[0].any() and not opt.state.v[0].any()
        p.grad = np.ones(3, np.float32)
        opt.step()
        opt.step()
        assert opt.step_count == 2

    def test_deterministic(self):
        def run():
            p = Tensor(np.linspace(-1, 1, 6).astype(np.float32), requires_grad=True)
            opt = AdamW([p], lr=1e-3, weight_decay=1e-2)
            for i in range(5):
                p.grad = (np.arange(6, dtype=np.float32) - i)
                opt.step()
            return p.data.tobytes()

        assert run() == run()

    def test_invalid_hyperparameters_rejected(self):
        p = Tensor(np.ones(1, np.float32), requires_grad=True)
        with pytest.raises(ValueError, match="learning rate"):
            AdamW([p], lr=0.0)
        state = OptimizerState([p], base_lr=1e-4, weight_decay=0.0)
        with pytest.raises(ValueError, match="betas"):
            adamw_step([p], [np.ones(1, np.float32)], state, betas=(1.0, 0.999))


class TestLrSchedule:
    def test_examples(self):
        assert lr_at_step(1e-4, 0) == 1e-4
        assert lr_at_step(1e-4, 1) == 1e-4
        np.testing.assert_allclose(lr_at_step(1e-4, 4), 9.999200016e-5, rtol=1e-12)

    def test_decay_every_two_steps(self):
        for step in range(0, 50):
            expected = 1e-4 * 0.99996 ** (step // 2)
            assert lr_at_step(1e-4, step) == expected

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            lr_at_step(1e-4, -1)
