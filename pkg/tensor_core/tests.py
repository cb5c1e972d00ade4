import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from tensor_core import ops
from tensor_core.exceptions import (
    ContractError, DimensionError, DivergenceError, MaskError, TokenIndexError,
)
from tensor_core.gradcheck import finite_diff_check, param_objective, relative_error
from tensor_core.params import ParamSet
from tensor_core.tensor import Parameter, Tape, Tensor


def numeric_grad(fn, x, h=1e-5):
    """Central differences of a scalar function of an array."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (fn(plus) - fn(minus)) / (2 * h)
    return grad


def tape_grad(build, x):
    """Gradient of ``build(tensor) -> scalar Tensor`` at ``x`` via the tape."""
    leaf = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = build(leaf)
    tape.backward(loss)
    return leaf.grad


class MatmulTest(SimpleTestCase):
    """Tests for matmul."""

    def test_identity(self):
        """Test that the identity leaves a matrix unchanged."""
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert_array_equal(ops.matmul(np.eye(2), b).data, b)

    def test_projector(self):
        """Test the projector case."""
        out = ops.matmul([[1.0, 0.0], [0.0, 0.0]], [[5.0, 6.0], [7.0, 8.0]])
        assert_array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])

    def test_gradient_of_sum(self):
        """Test d sum(a.b) / da at a=[[1,1]], b=[[2],[3]]."""
        b = np.array([[2.0], [3.0]])
        grad = tape_grad(lambda a: ops.total(ops.matmul(a, b)), np.array([[1.0, 1.0]]))
        assert_allclose(grad, [[2.0, 3.0]], atol=1e-12)
        numeric = numeric_grad(lambda a: float((a @ b).sum()), np.array([[1.0, 1.0]]))
        assert_allclose(grad, numeric, atol=1e-8)

    def test_shape_mismatch_names_both_shapes(self):
        """Test that a mismatch raises DimensionError naming both shapes."""
        with self.assertRaises(DimensionError) as ctx:
            ops.matmul(np.ones((2, 3)), np.ones((2, 3)))
        self.assertIn('(2, 3)', str(ctx.exception))


class RmsNormTest(SimpleTestCase):
    """Tests for rms_norm."""

    def test_three_four(self):
        """Test x=[3,4] with eps=0."""
        out = ops.rms_norm(np.array([3.0, 4.0]), np.ones(2), eps=0.0).data
        assert_allclose(out, [0.848528, 1.131371], atol=1e-6)
        self.assertAlmostEqual(np.linalg.norm(out), np.sqrt(2.0), places=12)

    def test_constant_row(self):
        """Test that a constant positive row maps to ones."""
        assert_allclose(ops.rms_norm(np.full(5, 2.5), np.ones(5), eps=0.0).data, np.ones(5), atol=1e-15)

    def test_zero_row(self):
        """Test that a zero row stays zero with eps > 0."""
        assert_array_equal(ops.rms_norm(np.zeros(4), eps=1e-5).data, np.zeros(4))

    def test_row_norm_is_sqrt_d(self):
        """Test the row-norm identity over random rows."""
        x = np.random.default_rng(0).standard_normal((6, 16))
        norms = np.linalg.norm(ops.rms_norm(x, eps=0.0).data, axis=-1)
        assert_allclose(norms, np.full(6, 4.0), atol=1e-12)

    def test_negative_eps(self):
        """Test that a negative eps is rejected."""
        with self.assertRaises(ContractError):
            ops.rms_norm(np.ones(3), eps=-1.0)

    def test_gradients(self):
        """Test the input and scale gradients against finite differences."""
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 8))
        scale = rng.standard_normal(8)
        weights = rng.standard_normal((2, 8))

        def loss_x(t):
            return ops.total(ops.mul(ops.rms_norm(t, scale), weights))

        grad = tape_grad(loss_x, x)
        numeric = numeric_grad(lambda v: float(np.sum(ops.rms_norm(v, scale).data * weights)), x)
        self.assertLessEqual(relative_error(numeric, grad).max(), 1e-6)

        scale_param = Parameter('s', scale)
        with Tape() as tape:
            loss = ops.total(ops.mul(ops.rms_norm(x, scale_param), weights))
        tape.backward(loss)
        numeric = numeric_grad(lambda s: float(np.sum(ops.rms_norm(x, s).data * weights)), scale)
        assert_allclose(scale_param.grad, numeric, atol=1e-8)


class SwigluTest(SimpleTestCase):
    """Tests for swiglu_mlp and silu."""

    def test_zero_input(self):
        """Test that x=0 gives 0."""
        rng = np.random.default_rng(0)
        out = ops.swiglu_mlp(np.zeros((1, 3)), rng.standard_normal((3, 5)), rng.standard_normal((3, 5)),
                             rng.standard_normal((5, 3)))
        assert_array_equal(out.data, np.zeros((1, 3)))

    def test_zero_down_projection(self):
        """Test that w_down=0 annihilates the output."""
        rng = np.random.default_rng(1)
        out = ops.swiglu_mlp(rng.standard_normal((2, 3)), rng.standard_normal((3, 5)),
                             rng.standard_normal((3, 5)), np.zeros((5, 3)))
        assert_array_equal(out.data, np.zeros((2, 3)))

    def test_scalar_case(self):
        """Test d=h=1, x=1, all weights 1 gives silu(1)."""
        one = np.ones((1, 1))
        self.assertAlmostEqual(ops.swiglu_mlp(one, one, one, one).item(), 0.731059, places=6)

    def test_silu_gradient(self):
        """Test the silu gradient against finite differences."""
        x = np.linspace(-4.0, 4.0, 9)
        grad = tape_grad(lambda t: ops.total(ops.silu(t)), x)
        numeric = numeric_grad(lambda v: float(np.sum(ops.silu(v).data)), x)
        assert_allclose(grad, numeric, atol=1e-9)


class SoftmaxTest(SimpleTestCase):
    """Tests for softmax_rows."""

    def test_uniform(self):
        """Test that equal logits give a uniform row."""
        assert_allclose(ops.softmax_rows(np.zeros(3)).data, np.full(3, 1 / 3), atol=1e-15)

    def test_mask(self):
        """Test that a -inf entry gets zero weight."""
        assert_array_equal(ops.softmax_rows(np.array([0.7, -np.inf])).data, [1.0, 0.0])

    def test_ln2(self):
        """Test [ln2, 0] gives [2/3, 1/3]."""
        assert_allclose(ops.softmax_rows(np.array([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)

    def test_fully_masked_row(self):
        """Test that an all-masked row raises MaskError."""
        with self.assertRaises(MaskError):
            ops.softmax_rows(np.array([[0.0, 1.0], [-np.inf, -np.inf]]))

    def test_rows_sum_to_one_and_shift_invariance(self):
        """Test normalization and invariance to a constant shift."""
        x = np.random.default_rng(5).standard_normal((4, 7)) * 10
        probs = ops.softmax_rows(x).data
        assert_allclose(probs.sum(axis=-1), np.ones(4), atol=1e-12)
        assert_allclose(ops.softmax_rows(x + 123.0).data, probs, atol=1e-12)

    def test_gradient(self):
        """Test the softmax gradient against finite differences."""
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 5))
        weights = rng.standard_normal((2, 5))
        grad = tape_grad(lambda t: ops.total(ops.mul(ops.softmax_rows(t), weights)), x)
        numeric = numeric_grad(lambda v: float(np.sum(ops.softmax_rows(v).data * weights)), x)
        assert_allclose(grad, numeric, atol=1e-9)


class CrossEntropyTest(SimpleTestCase):
    """Tests for cross_entropy_logits."""

    def test_uniform(self):
        """Test uniform logits over V=4 give ln 4."""
        loss = ops.cross_entropy_logits(np.zeros((3, 4)), [0, 1, 3])
        self.assertAlmostEqual(loss.item(), np.log(4.0), places=12)

    def test_near_one_hot(self):
        """Test a confident correct prediction gives almost zero loss."""
        logits = np.zeros((1, 5))
        logits[0, 2] = 30.0
        self.assertLessEqual(ops.cross_entropy_logits(logits, [2]).item(), 1e-9)

    def test_two_classes(self):
        """Test logits [1,0] with target 1."""
        loss = ops.cross_entropy_logits(np.array([[1.0, 0.0]]), [1])
        self.assertAlmostEqual(loss.item(), 1.313262, places=6)

    def test_out_of_range_target(self):
        """Test that an out-of-range target raises an IndexError."""
        with self.assertRaises(TokenIndexError):
            ops.cross_entropy_logits(np.zeros((1, 3)), [3])
        with self.assertRaises(IndexError):
            ops.cross_entropy_logits(np.zeros((1, 3)), [-1])

    def test_masked_rows_get_no_gradient(self):
        """Test that zero-weight rows receive exactly zero gradient."""
        logits = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = ops.cross_entropy_logits(logits, [0, 1, 2], weights=[0.0, 1.0, 0.0])
        tape.backward(loss)
        assert_array_equal(logits.grad[0], np.zeros(4))
        assert_array_equal(logits.grad[2], np.zeros(4))
        self.assertTrue(np.any(logits.grad[1] != 0))


class TapeTest(SimpleTestCase):
    """Tests for Tape.backward."""

    def test_sum_gives_ones(self):
        """Test that the gradient of sum(x) is all ones."""
        x = np.random.default_rng(0).standard_normal((2, 3, 4))
        assert_array_equal(tape_grad(ops.total, x), np.ones_like(x))

    def test_half_squared_norm(self):
        """Test that the gradient of 0.5*|x|^2 is x."""
        x = np.random.default_rng(1).standard_normal(6)
        grad = tape_grad(lambda t: ops.scale(ops.total(ops.mul(t, t)), 0.5), x)
        assert_allclose(grad, x, atol=1e-15)

    def test_non_scalar_loss(self):
        """Test that a non-scalar loss raises ContractError."""
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ops.scale(x, 2.0)
        with self.assertRaises(ContractError):
            tape.backward(y)

    def test_loss_from_other_tape(self):
        """Test that a loss recorded elsewhere is rejected."""
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            loss = ops.total(x)
        with self.assertRaises(ContractError):
            Tape().backward(loss)

    def test_parameter_grads_accumulate(self):
        """Test that repeated backward calls accumulate into parameters."""
        p = Parameter('w', np.array([1.0, 2.0]))
        with Tape() as tape:
            loss = ops.total(ops.mul(p, p))
        tape.backward(loss)
        tape.backward(loss)
        assert_allclose(p.grad, 4.0 * p.data)
        p.zero_grad()
        assert_array_equal(p.grad, np.zeros(2))

    def test_linear_in_adjoint(self):
        """Test that doubling the adjoint doubles every gradient exactly."""
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 4))
        w = rng.standard_normal((4, 3))
        grads = []
        for adjoint in (1.0, 2.0):
            p = Parameter('w', w)
            with Tape() as tape:
                loss = ops.total(ops.silu(ops.matmul(x, p)))
            tape.backward(loss, adjoint=adjoint)
            grads.append(p.grad)
        assert_array_equal(grads[1], 2.0 * grads[0])

    def test_intermediate_grads_are_kept(self):
        """Test that intermediate tensors expose their adjoint."""
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        with Tape() as tape:
            hidden = ops.scale(x, 3.0)
            loss = ops.total(hidden)
        tape.backward(loss)
        assert_array_equal(hidden.grad, np.ones(2))
        assert_array_equal(x.grad, np.full(2, 3.0))

    def test_identity_copy_has_own_adjoint(self):
        """Test that an identity copy only sees the adjoint of its own uses."""
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        with Tape() as tape:
            copy = ops.identity(x)
            loss = ops.add(ops.total(ops.scale(x, 3.0)), ops.total(copy))
        tape.backward(loss)
        assert_array_equal(copy.data, x.data)
        assert_array_equal(copy.grad, np.ones(2))
        assert_array_equal(x.grad, np.full(2, 4.0))

    def test_untracked_ops_are_not_recorded(self):
        """Test that constants do not land on the tape."""
        with Tape() as tape:
            ops.add(np.ones(2), np.ones(2))
        self.assertEqual(len(tape), 0)

    def test_take_rows(self):
        """Test gather, its scatter-add gradient and range checks."""
        table = Parameter('t', np.arange(6.0).reshape(3, 2))
        with Tape() as tape:
            loss = ops.total(ops.take_rows(table, np.array([[0, 2, 2]])))
        tape.backward(loss)
        assert_array_equal(table.grad, [[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]])
        with self.assertRaises(TokenIndexError):
            ops.take_rows(table, np.array([3]))


class ParamSetTest(SimpleTestCase):
    """Tests for ParamSet."""

    def setUp(self):
        """Set up a small parameter set."""
        self.params = ParamSet()
        self.params.add('layer.0.attn.w_q', np.ones((2, 2)))
        self.params.add('layer.0.ln_x.scale', np.ones(2))
        self.params.add('final.ln.scale', np.full(2, 3.0))

    def test_duplicate_name(self):
        """Test that names are unique."""
        with self.assertRaises(ContractError):
            self.params.add('final.ln.scale', np.ones(2))

    def test_flat_round_trip(self):
        """Test flattening and restoring values in insertion order."""
        flat = self.params.flat_values()
        self.assertEqual(flat.shape, (8,))
        self.params.set_flat_values(np.arange(8.0))
        assert_array_equal(self.params['final.ln.scale'].data, [6.0, 7.0])
        with self.assertRaises(DimensionError):
            self.params.set_flat_values(np.zeros(3))

    def test_matching_and_copy(self):
        """Test pattern lookup and that copies are independent."""
        self.assertEqual([p.name for p in self.params.matching('*.scale')],
                         ['layer.0.ln_x.scale', 'final.ln.scale'])
        clone = self.params.copy()
        clone['final.ln.scale'].data[:] = 0.0
        assert_array_equal(self.params['final.ln.scale'].data, [3.0, 3.0])

    def test_renamed_drops_none(self):
        """Test renaming with dropped names."""
        renamed = self.params.renamed(lambda n: None if 'ln_x' in n else n.upper())
        self.assertEqual(renamed.names(), ['LAYER.0.ATTN.W_Q', 'FINAL.LN.SCALE'])


class FiniteDiffCheckTest(SimpleTestCase):
    """Tests for the finite-difference oracle."""

    def test_quadratic(self):
        """Test p^T p is checked to roundoff."""
        p = np.random.default_rng(0).standard_normal(10)
        self.assertLessEqual(finite_diff_check(lambda v: (float(v @ v), 2 * v), p), 1e-9)

    def test_rms_norm_chain(self):
        """Test a chain through rms_norm at d=8."""
        rng = np.random.default_rng(0)
        weights = rng.standard_normal(8)
        params = ParamSet()
        params.add('x', rng.standard_normal(8))
        params.add('scale', rng.standard_normal(8))
        objective = param_objective(params, lambda ps: ops.total(ops.mul(
            ops.silu(ops.rms_norm(ps['x'], ps['scale'])), weights)))
        self.assertLessEqual(finite_diff_check(objective, params.flat_values()), 1e-6)

    def test_step_range(self):
        """Test that h outside [1e-7, 1e-3] is rejected."""
        with self.assertRaises(ContractError):
            finite_diff_check(lambda v: (0.0, v), np.zeros(2), h=1e-2)

    def test_non_finite_objective(self):
        """Test that a non-finite objective raises DivergenceError."""
        with self.assertRaises(DivergenceError):
            finite_diff_check(lambda v: (float('nan'), v), np.zeros(2))

    def test_detects_corrupted_rule(self):
        """Test that a scaled backward rule is caught."""
        rng = np.random.default_rng(1)
        params = ParamSet()
        params.add('w', rng.standard_normal((3, 3)))
        x = rng.standard_normal((2, 3))
        objective = param_objective(params, lambda ps: ops.total(ops.silu(ops.matmul(x, ps['w']))))
        with ops.inject_gradient_fault('matmul', factor=1.5):
            error = finite_diff_check(objective, params.flat_values())
        self.assertGreater(error, 1e-3)
