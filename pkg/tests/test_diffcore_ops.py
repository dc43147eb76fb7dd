"""Forward semantics of the differentiable operations against independent oracles."""

import math

import numpy as np
import pytest

from nve.diffcore import DiffArray, Parameter, Tape, backward, ops, set_check_finite
from oracles import conv1d_loops, conv2d_loops, cross_entropy_longdouble


class TestConv1d:
    def test_hand_computed_edge_detector(self):
        x = DiffArray(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
        k = DiffArray(np.array([[[1.0, 0.0, -1.0]]]))
        out = ops.conv1d(x, k)
        np.testing.assert_allclose(out.values, [[[-2.0, -2.0]]])

    def test_identity_kernel_any_dilation(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 40))
        out = ops.conv1d(DiffArray(x), DiffArray(np.ones((3, 3, 1)) * np.eye(3)[:, :, None]),
                         dilation=16)
        np.testing.assert_allclose(out.values, x)

    def test_random_vs_nested_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 32))
        k = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=(4,))
        out = ops.conv1d(DiffArray(x), DiffArray(k), DiffArray(b), stride=1, dilation=4)
        ref = conv1d_loops(x, k, b, stride=1, dilation=4)
        np.testing.assert_allclose(out.values, ref, atol=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_random_configs_vs_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        B, cin, cout = (int(v) for v in rng.integers(1, 4, size=3))
        L, K = int(rng.integers(6, 24)), int(rng.integers(1, 6))
        stride, dilation, padding = (int(rng.integers(1, 4)), int(rng.integers(1, 4)),
                                     int(rng.integers(0, 4)))
        if (L + 2 * padding - dilation * (K - 1) - 1) // stride + 1 < 1:
            pytest.skip("degenerate draw")
        x = rng.normal(size=(B, cin, L))
        k = rng.normal(size=(cout, cin, K))
        out = ops.conv1d(DiffArray(x), DiffArray(k), stride=stride,
                         dilation=dilation, padding=padding)
        ref = conv1d_loops(x, k, stride=stride, dilation=dilation, padding=padding)
        np.testing.assert_allclose(out.values, ref, atol=1e-12)

    def test_output_too_short_raises(self):
        x = DiffArray(np.zeros((1, 1, 4)))
        k = DiffArray(np.zeros((1, 1, 3)))
        with pytest.raises(ValueError, match="output length"):
            ops.conv1d(x, k, dilation=2)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            ops.conv1d(DiffArray(np.zeros((1, 2, 8))), DiffArray(np.zeros((1, 3, 3))))


class TestConv2d:
    def test_one_by_one_identity(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 1, 5, 7))
        k = np.ones((1, 1, 1, 1))
        out = ops.conv2d(DiffArray(x), DiffArray(k))
        np.testing.assert_allclose(out.values, x)

    def test_box_kernel_on_ones(self):
        x = np.ones((1, 1, 5, 5))
        k = np.ones((1, 1, 3, 3))
        out = ops.conv2d(DiffArray(x), DiffArray(k))
        np.testing.assert_allclose(out.values, np.full((1, 1, 3, 3), 9.0))

    @pytest.mark.parametrize("seed", range(6))
    def test_random_vs_nested_loop_oracle(self, seed):
        rng = np.random.default_rng(200 + seed)
        x = rng.normal(size=(2, 2, 7, 8))
        k = rng.normal(size=(3, 2, 3, 2))
        b = rng.normal(size=(3,))
        stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        padding = (int(rng.integers(0, 3)), int(rng.integers(0, 3)))
        dilation = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        try:
            out = ops.conv2d(DiffArray(x), DiffArray(k), DiffArray(b),
                             stride=stride, padding=padding, dilation=dilation)
        except ValueError:
            pytest.skip("degenerate draw")
        ref = conv2d_loops(x, k, b, stride=stride, padding=padding, dilation=dilation)
        np.testing.assert_allclose(out.values, ref, atol=1e-12)

    @pytest.mark.parametrize("seed", range(8))
    def test_dense_column_and_row_paths_vs_oracle(self, seed):
        rng = np.random.default_rng(300 + seed)
        column = bool(seed % 2)
        kh, kw = (int(rng.integers(4, 12)), 1) if column else (1, int(rng.integers(4, 12)))
        dil = (int(rng.integers(1, 3)), 1) if column else (1, int(rng.integers(1, 3)))
        x = rng.normal(size=(2, 2, 16, 12) if column else (2, 2, 12, 16))
        k = rng.normal(size=(3, 2, kh, kw))
        b = rng.normal(size=(3,))
        stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        padding = (int(rng.integers(0, 3)), int(rng.integers(0, 3)))
        try:
            out = ops.conv2d(DiffArray(x), DiffArray(k), DiffArray(b),
                             stride=stride, padding=padding, dilation=dil)
        except ValueError:
            pytest.skip("degenerate draw")
        ref = conv2d_loops(x, k, b, stride=stride, padding=padding, dilation=dil)
        np.testing.assert_allclose(out.values, ref, atol=1e-12)

    def test_chunked_path_matches_oracle(self, monkeypatch):
        import nve.diffcore.ops as ops_mod
        monkeypatch.setattr(ops_mod, "_COL_CHUNK_ELEMS", 64)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 2, 6, 10))
        k = rng.normal(size=(3, 2, 3, 3))
        out = ops.conv2d(DiffArray(x), DiffArray(k), stride=(1, 2), padding=(1, 1))
        ref = conv2d_loops(x, k, stride=(1, 2), padding=(1, 1))
        np.testing.assert_allclose(out.values, ref, atol=1e-12)


class TestBatchNorm:
    def _run(self, x, gamma=None, beta=None, mode="train", rm=None, rv=None):
        C = x.shape[1]
        gamma = np.ones(C) if gamma is None else gamma
        beta = np.zeros(C) if beta is None else beta
        rm = np.zeros(C) if rm is None else rm
        rv = np.ones(C) if rv is None else rv
        out = ops.batch_norm(DiffArray(x), DiffArray(gamma), DiffArray(beta),
                             rm, rv, mode=mode)
        return out.values, rm, rv

    def test_standardized_input_passthrough(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(64, 3))
        x = (x - x.mean(0)) / x.std(0)
        out, _, _ = self._run(x)
        assert np.max(np.abs(out - x)) <= 1e-4

    def test_zero_gamma_yields_beta(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(8, 4, 5))
        beta = rng.normal(size=4)
        out, _, _ = self._run(x, gamma=np.zeros(4), beta=beta)
        np.testing.assert_allclose(out, np.broadcast_to(beta[None, :, None], out.shape))

    def test_train_mode_statistics(self):
        rng = np.random.default_rng(6)
        x = rng.normal(loc=3.0, scale=2.0, size=(128, 6))
        out, _, _ = self._run(x)
        assert np.max(np.abs(out.mean(axis=0))) < 1e-6
        assert np.max(np.abs(out.var(axis=0) - 1.0)) < 1e-4

    def test_batch_of_one_raises_in_train(self):
        with pytest.raises(ValueError, match="batch size"):
            self._run(np.zeros((1, 3)))

    def test_eval_uses_running_statistics(self):
        x = np.array([[2.0, 4.0]])
        rm = np.array([1.0, 1.0])
        rv = np.array([4.0, 4.0])
        out, _, _ = self._run(x, mode="eval", rm=rm, rv=rv)
        np.testing.assert_allclose(out, [[0.5, 1.5]], atol=1e-5)

    def test_momentum_update(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(32, 2))
        rm = np.zeros(2)
        rv = np.ones(2)
        ops.batch_norm(DiffArray(x), DiffArray(np.ones(2)), DiffArray(np.zeros(2)),
                       rm, rv, mode="train", momentum=0.25)
        np.testing.assert_allclose(rm, 0.25 * x.mean(0))
        np.testing.assert_allclose(rv, 0.75 + 0.25 * x.var(0))


class TestReluLinear:
    def test_relu_example(self):
        out = ops.relu(DiffArray(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.values, [0.0, 0.0, 2.0])

    def test_linear_identity(self):
        x = np.random.default_rng(8).normal(size=(3, 4))
        out = ops.linear(DiffArray(x), DiffArray(np.eye(4)), DiffArray(np.zeros(4)))
        np.testing.assert_allclose(out.values, x)

    def test_linear_hand_example(self):
        out = ops.linear(DiffArray(np.array([[1.0, 2.0]])),
                         DiffArray(np.array([[3.0, 4.0], [5.0, 6.0]])),
                         DiffArray(np.array([0.0, 1.0])))
        np.testing.assert_allclose(out.values, [[11.0, 18.0]])

    def test_linear_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            ops.linear(DiffArray(np.zeros((2, 3))), DiffArray(np.zeros((4, 5))))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_give_log_k(self):
        logits = DiffArray(np.full((3, 4), 0.7))
        out = ops.softmax_cross_entropy(logits, np.array([0, 1, 3]))
        np.testing.assert_allclose(float(out.values), math.log(4.0), rtol=1e-12)

    def test_saturated_case(self):
        out = ops.softmax_cross_entropy(DiffArray(np.array([[10.0, -10.0]])), [0])
        assert abs(float(out.values) - 2.0611536e-9) < 1e-12

    def test_random_vs_extended_precision_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            logits = rng.normal(size=(5, 7)) * 5.0
            labels = rng.integers(0, 7, size=5)
            out = ops.softmax_cross_entropy(DiffArray(logits), labels)
            ref = cross_entropy_longdouble(logits, labels)
            assert abs(float(out.values) - ref) < 1e-10

    def test_nonnegative(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            logits = rng.normal(size=(4, 3)) * 10.0
            labels = rng.integers(0, 3, size=4)
            assert float(ops.softmax_cross_entropy(DiffArray(logits), labels).values) >= 0.0

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            ops.softmax_cross_entropy(DiffArray(np.zeros((2, 3))), [0, 3])


class TestTapeSemantics:
    def test_sum_of_squares_gradient(self):
        tape = Tape()
        p = Parameter("p", DiffArray(np.array([1.0, -2.0, 3.0]), tape))
        loss = ops.sum(ops.mul(p.array, p.array))
        grads = backward(loss, tape, [p])
        np.testing.assert_allclose(grads["p"], [2.0, -4.0, 6.0])
        np.testing.assert_allclose(p.array.grad, [2.0, -4.0, 6.0])

    def test_tape_reuse_rejected(self):
        tape = Tape()
        p = Parameter("p", DiffArray(np.array(2.0), tape))
        loss = ops.mul(p.array, p.array)
        backward(loss, tape, [p])
        with pytest.raises(RuntimeError, match="consumed"):
            backward(loss, tape, [p])

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        p = Parameter("p", DiffArray(np.array([1.0, 2.0]), tape))
        out = ops.mul(p.array, p.array)
        with pytest.raises(ValueError, match="scalar"):
            backward(out, tape, [p])

    def test_mixed_tapes_rejected(self):
        a = DiffArray(np.zeros(3), Tape())
        b = DiffArray(np.zeros(3), Tape())
        with pytest.raises(ValueError, match="different tapes"):
            ops.add(a, b)

    def test_shared_node_gradient_accumulates(self):
        tape = Tape()
        p = Parameter("p", DiffArray(np.array(3.0), tape))
        loss = ops.add(ops.mul(p.array, p.array), ops.mul(2.0, p.array))
        grads = backward(ops.reshape(loss, ()), tape, [p])
        np.testing.assert_allclose(grads["p"], 2 * 3.0 + 2.0)


class TestFiniteChecking:
    def test_nan_rejected(self):
        with pytest.raises(FloatingPointError):
            DiffArray(np.array([1.0, np.nan]))

    def test_inf_rejected_in_op(self):
        x = DiffArray(np.array([1e308]))
        with pytest.raises(FloatingPointError):
            ops.add(x, x)

    def test_check_can_be_disabled(self):
        prev = set_check_finite(False)
        try:
            arr = DiffArray(np.array([np.inf]))
            assert np.isinf(arr.values[0])
        finally:
            set_check_finite(prev)


def test_forward_determinism():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 3, 16))
    k = rng.normal(size=(4, 3, 3))
    a = ops.conv1d(DiffArray(x), DiffArray(k), stride=2).values
    b = ops.conv1d(DiffArray(x.copy()), DiffArray(k.copy()), stride=2).values
    np.testing.assert_array_equal(a, b)
