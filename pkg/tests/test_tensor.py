import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradcases import CASES, encoder_case
from mmret.errors import ContractError, DegenerateInputError, ShapeError
from mmret.tensor import Parameter, Tape, as_node, backward, ops, precision, storage_dtype
from mmret.tensor.gradcheck import max_gradient_error, relative_error


class TestGradientChecks:
    @pytest.mark.parametrize("op", sorted(CASES))
    def test_hundred_random_cases(self, op):
        rng = np.random.default_rng(sorted(CASES).index(op))
        worst = max(max_gradient_error(*CASES[op](rng)) for _ in range(100))
        assert worst < 1e-3

    def test_encoder_forward_matches_finite_differences(self):
        rng = np.random.default_rng(123)
        errors = [max_gradient_error(*encoder_case(rng)) for _ in range(100)]
        assert max(errors) < 1e-3

    def test_relative_error_floor(self):
        assert relative_error(np.zeros(3), np.full(3, 1e-13)) < 1e-6
        assert relative_error(np.ones(3), 2 * np.ones(3)) == pytest.approx(0.5)


class TestMatmul:
    def test_identity(self):
        out = ops.matmul(np.eye(2), np.array([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_scalar_case(self):
        assert ops.matmul(np.array([[2.0]]), np.array([[3.0]])).data[0, 0] == 6.0

    def test_rank_mismatch(self):
        with pytest.raises(ShapeError):
            ops.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_batched_shared_right(self):
        a = np.random.default_rng(0).normal(size=(3, 2, 4))
        b = np.random.default_rng(1).normal(size=(4, 5))
        np.testing.assert_allclose(ops.matmul(a, b).data, a @ b, rtol=1e-5, atol=1e-5)


class TestBroadcasting:
    def test_only_scalar_broadcast(self):
        with pytest.raises(ShapeError):
            ops.add(np.ones((2, 3)), np.ones(3))
        np.testing.assert_array_equal(ops.add(np.ones((2, 3)), np.array(2.0)).data, np.full((2, 3), 3.0))

    def test_scalar_grad_is_summed(self):
        tape = Tape()
        x, s = tape.watch(np.ones((2, 3))), tape.watch(np.array(2.0))
        tape.backward(ops.sum(ops.mul(x, s)))
        assert s.grad.shape == ()
        assert float(s.grad) == 6.0


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(ops.softmax(np.zeros(2)).data, [0.5, 0.5])

    def test_no_overflow(self):
        out = ops.softmax(np.array([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0)
        assert out[1] < 1e-300 or out[1] == 0.0

    def test_high_precision(self):
        with precision(np.float64):
            out = ops.softmax(np.array([1.0, 2.0, 3.0])).data
        mpmath.mp.dps = 40
        den = sum(mpmath.e ** k for k in (1, 2, 3))
        ref = [float(mpmath.e ** k / den) for k in (1, 2, 3)]
        np.testing.assert_allclose(out, ref, atol=1e-7, rtol=0)

    def test_masked_entries_exact_zero(self):
        out = ops.softmax(np.array([[1.0, 5.0, 2.0]]), mask=np.array([[True, False, True]])).data
        assert out[0, 1] == 0.0
        assert out.sum() == pytest.approx(1.0)

    def test_fully_masked_row(self):
        with pytest.raises(DegenerateInputError):
            ops.softmax(np.array([[1.0, 2.0]]), mask=np.array([[False, False]]))


class TestLayerNorm:
    def test_constant_row(self):
        out = ops.layer_norm(np.array([[5.0, 5.0, 5.0]]), np.ones(3), np.zeros(3)).data
        np.testing.assert_array_equal(out, np.zeros((1, 3)))

    def test_fixed_point(self):
        x = np.array([[-1.0, 1.0, -1.0, 1.0]])
        out = ops.layer_norm(x, np.ones(4), np.zeros(4), eps=1e-5).data
        np.testing.assert_allclose(out, x, atol=1e-5)

    def test_param_shape_checked(self):
        with pytest.raises(ShapeError):
            ops.layer_norm(np.ones((2, 4)), np.ones(3), np.zeros(4))


class TestBackward:
    @pytest.mark.parametrize("shape", [(3,), (2, 3), (2, 1, 4)])
    def test_sum_grad_is_ones(self, shape):
        tape = Tape()
        x = tape.watch(np.random.default_rng(0).normal(size=shape))
        backward(ops.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones(shape))

    def test_half_square_norm(self):
        v = np.random.default_rng(1).uniform(-2, 2, size=(4, 3))
        tape = Tape()
        x = tape.watch(v)
        backward(ops.scale(ops.sum(ops.mul(x, x)), 0.5))
        np.testing.assert_allclose(x.grad, v.astype(np.float32), rtol=1e-6)

    def test_untracked_loss(self):
        with pytest.raises(ContractError):
            backward(ops.sum(as_node(np.ones(3))))

    def test_non_scalar_loss(self):
        tape = Tape()
        with pytest.raises(ContractError):
            tape.backward(ops.exp(tape.watch(np.ones(3))))

    def test_parameter_reuse_accumulates(self):
        p = Parameter("w", np.array([1.0, 2.0], np.float32))
        tape = Tape()
        a, b = tape.watch(p), tape.watch(p)
        assert a is b
        tape.backward(ops.sum(ops.add(ops.mul(a, a), b)))
        np.testing.assert_allclose(tape.grad(p), [3.0, 5.0])

    def test_tapes_do_not_share_storage(self):
        v = np.ones(3)
        t1, t2 = Tape(), Tape()
        x1, x2 = t1.watch(v), t2.watch(v)
        t1.backward(ops.sum(ops.scale(x1, 2.0)))
        t2.backward(ops.sum(ops.scale(x2, 3.0)))
        np.testing.assert_array_equal(x1.grad, [2.0] * 3)
        np.testing.assert_array_equal(x2.grad, [3.0] * 3)
        assert not np.shares_memory(x1.grad, x2.grad)

    def test_mixing_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        with pytest.raises(ContractError):
            ops.add(t1.watch(np.ones(2)), t2.watch(np.ones(2)))

    def test_release_drops_graph(self):
        tape = Tape()
        x = tape.watch(np.ones(2))
        y = ops.exp(x)
        tape.release()
        assert tape.nodes == [] and y.parents == () and not y.tracked

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            fn, arrs = CASES["layer_norm"](rng)
            tape = Tape()
            leaves = [tape.watch(a) for a in arrs]
            loss = fn(*leaves)
            tape.backward(loss)
            return loss.data.tobytes(), [leaf.grad.tobytes() for leaf in leaves]

        assert run() == run()


class TestStorage:
    def test_float32_default(self):
        assert storage_dtype() is np.float32
        assert as_node(np.ones(2, np.float64)).data.dtype == np.float32

    def test_precision_context(self):
        with precision(np.float64):
            assert as_node([1.0]).data.dtype == np.float64
        assert storage_dtype() is np.float32

    def test_zero_dim_preserved(self):
        assert as_node(np.float32(2.0)).shape == ()

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                      elements=st.floats(-2, 2)))
    def test_reshape_roundtrip(self, x):
        out = ops.reshape(ops.reshape(x, (x.size,)), x.shape)
        np.testing.assert_array_equal(out.data, x.astype(np.float32))

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=st.floats(-30, 30)))
    def test_softmax_rows_sum_to_one(self, x):
        s = ops.softmax(x, axis=-1).data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
