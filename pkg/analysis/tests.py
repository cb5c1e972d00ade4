import json

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from blocks.config import ModelConfig
from blocks.initialization import init_params
from blocks.layers import block_params
from tensor_core import ops
from tensor_core.exceptions import ContractError, DimensionError
from tensor_core.tensor import Tape, Tensor
from topologies.kinds import TopologyKind
from topologies.state import StreamState
from topologies.wiring import layer_forward, layer_norm_params, model_forward
from training.loop import MetricsRecord

from .jacobian import (
    block_jacobian_assembled, jacobian_bruteforce, jacobian_reverse_mode, rms_norm_jacobian,
    update_sensitivity,
)
from .lens import logit_lens_match
from .profiles import (
    ProfileRow, build_profile, contribution_ratio, depth_monotone, fusion_weights, grad_norm_profile,
    grad_norm_summary, magnitude_profile, stream_contribution_ratios,
)
from .spectral import ln_jacobian_spectrum, spectral_norm
from .utils import format_float, generate_jacobian_json, generate_profile_csv, parse_float, parse_profile_csv

SIAMESE = (TopologyKind.SIAMESE_CANONICAL, TopologyKind.SIAMESE_PRACTICAL)


def token_case(kind, seed=0, i=0, d=4, randomize_scales=True, **overrides):
    """A single-token stream state and the parameters of sub-layer ``i``."""
    config = ModelConfig(n_layers=1, d_model=d, n_heads=2, vocab_size=7, seq_len=1,
                         topology=kind, seed=seed, **overrides)
    params = init_params(config)
    rng = np.random.default_rng(seed + 1000)
    if randomize_scales:
        for param in params:
            if param.name.endswith(('.scale', 'gamma')):
                param.data = rng.uniform(0.5, 1.5, size=param.shape)
    x = Tensor(rng.standard_normal((1, 1, d)))
    y = Tensor(rng.standard_normal((1, 1, d))) if config.topology.two_stream else None
    state = StreamState(i, x, y)
    return config, params, state, block_params(params, i), layer_norm_params(params, i)


class BlockJacobianTest(SimpleTestCase):
    """Tests for the assembled and brute-force block Jacobians."""

    def test_assembled_matches_bruteforce_siamese(self):
        """Test both Siamese kinds across depth scaling and the fused input norm."""
        for kind in SIAMESE:
            for scaled in (False, True):
                for fused in (False, True):
                    for seed in range(10):
                        for i in (0, 1):
                            config, _, state, block, norms = token_case(
                                kind, seed, i, depth_scaling=scaled, fused_input_norm=fused,
                            )
                            assembled = block_jacobian_assembled(kind, state, block, norms, i, config)
                            brute = jacobian_bruteforce(kind, state, block, norms, i, config)
                            self.assertEqual(assembled.matrix.shape, (8, 8))
                            assert_allclose(
                                assembled.matrix, brute, rtol=0, atol=1e-6,
                                err_msg=f'{kind.value} seed={seed} i={i} scaled={scaled} fused={fused}',
                            )

    def test_assembled_matches_bruteforce_baselines(self):
        """Test the single-stream and ResiDual-family assemblies."""
        for kind in TopologyKind:
            if kind.siamese:
                continue
            for i in (0, 1):
                config, _, state, block, norms = token_case(kind, seed=3, i=i)
                assembled = block_jacobian_assembled(kind, state, block, norms, i, config)
                brute = jacobian_bruteforce(kind, state, block, norms, i, config)
                assert_allclose(assembled.matrix, brute, rtol=0, atol=1e-6, err_msg=kind.value)

    def test_block_arrangement(self):
        """Test that matrix is [[dXX, dXY], [dYX, dYY]]."""
        config, _, state, block, norms = token_case(TopologyKind.SIAMESE_CANONICAL)
        jac = block_jacobian_assembled(config.topology, state, block, norms, 0, config)
        assert_array_equal(jac.matrix[:4, :4], jac.dXX)
        assert_array_equal(jac.matrix[:4, 4:], jac.dXY)
        assert_array_equal(jac.matrix[4:, :4], jac.dYX)
        assert_array_equal(jac.matrix[4:, 4:], jac.dYY)

    def test_zeroed_branch(self):
        """Test that J_F = 0 gives [[J_LNX, 0], [0, I]]."""
        config, params, state, block, norms = token_case(TopologyKind.SIAMESE_CANONICAL, i=0)
        block.weights['w_o'] = Tensor(np.zeros((4, 4)))
        jac = block_jacobian_assembled(config.topology, state, block, norms, 0, config)
        x = state.X.data[0, 0]
        assert_allclose(jac.dXX, rms_norm_jacobian(x, norms['ln_x'].data, config.norm_eps), atol=1e-8)
        assert_array_equal(jac.dXY, np.zeros((4, 4)))
        assert_array_equal(jac.dYX, np.zeros((4, 4)))
        assert_array_equal(jac.dYY, np.eye(4))
        brute = jacobian_bruteforce(config.topology, state, block, norms, 0, config)
        assert_allclose(brute, jac.matrix, atol=1e-6)

    def test_pre_norm_form(self):
        """Test that the Pre-Norm Jacobian is I + J_F J_LN."""
        config, _, state, block, norms = token_case(TopologyKind.PRE_NORM, seed=5, i=1)
        jac = block_jacobian_assembled(config.topology, state, block, norms, 1, config)
        self.assertFalse(jac.two_stream)
        exact = jacobian_reverse_mode(config.topology, state, block, norms, 1, config)
        assert_allclose(jac.dXX, exact, atol=1e-6)

    def test_residual_structural_zeros(self):
        """Test dXY = 0 and dYY = I for ResiDual, to roundoff."""
        for kind in (TopologyKind.RESIDUAL, TopologyKind.HYBRID_RESIDUAL):
            for seed in range(5):
                for i in (0, 1):
                    config, _, state, block, norms = token_case(kind, seed, i)
                    exact = jacobian_reverse_mode(kind, state, block, norms, i, config)
                    assert_allclose(exact[:4, 4:], np.zeros((4, 4)), atol=1e-10)
                    assert_allclose(exact[4:, 4:], np.eye(4), atol=1e-10)

    def test_reverse_mode_matches_bruteforce(self):
        """Test the two oracles against each other."""
        config, _, state, block, norms = token_case(TopologyKind.SIAMESE_PRACTICAL, seed=2, depth_scaling=True)
        exact = jacobian_reverse_mode(config.topology, state, block, norms, 0, config)
        brute = jacobian_bruteforce(config.topology, state, block, norms, 0, config)
        assert_allclose(exact, brute, atol=1e-6)

    def test_affine_layer_exact(self):
        """Test that differences are exact to roundoff when every LN is absent from the path."""
        config, _, state, block, norms = token_case(TopologyKind.PRE_NORM, i=1, randomize_scales=False)
        block.weights['w_down'] = Tensor(np.zeros_like(block['w_down'].data))
        state.X = Tensor(np.array([[[0.25, -0.125, 0.375, 0.0625]]]))
        brute = jacobian_bruteforce(config.topology, state, block, norms, 1, config)
        assert_allclose(brute, np.eye(4), rtol=0, atol=1e-10)

    def test_multi_token_rejected(self):
        """Test that T > 1 is a contract error."""
        config, _, _, block, norms = token_case(TopologyKind.SIAMESE_CANONICAL)
        state = StreamState(0, Tensor(np.zeros((1, 2, 4))), Tensor(np.ones((1, 2, 4))))
        with self.assertRaises(ContractError):
            block_jacobian_assembled(config.topology, state, block, norms, 0, config)
        with self.assertRaises(ContractError):
            jacobian_bruteforce(config.topology, state, block, norms, 0, config)

    def test_update_sensitivity(self):
        """Test that perturbing O_i by delta moves Y by delta and X by J_LNX s delta."""
        for kind in SIAMESE:
            for i in (0, 1):
                config, _, state, block, norms = token_case(kind, seed=4, i=i, depth_scaling=True)
                layer_forward(kind, state, block, norms, i, config)
                delta = np.random.default_rng(i).standard_normal(4)
                response = update_sensitivity(kind, state, block, norms, i, config, delta)
                s = state.depth_scale
                assert_allclose(response[4:], delta, atol=1e-8)
                x, o = state.X.data[0, 0], state.O.data[0, 0]
                if 'ln_x' in norms:
                    expected = rms_norm_jacobian(x + s * o, norms['ln_x'].data, config.norm_eps) @ (s * delta)
                else:
                    expected = s * delta
                assert_allclose(response[:4], expected, atol=1e-7)

    def test_update_sensitivity_rejects_baselines(self):
        """Test that update sensitivity needs a Siamese topology."""
        config, _, state, block, norms = token_case(TopologyKind.RESIDUAL)
        with self.assertRaises(ContractError):
            update_sensitivity(config.topology, state, block, norms, 0, config, np.ones(4))


class SpectralNormTest(SimpleTestCase):
    """Tests for spectral_norm."""

    def test_examples(self):
        """Test diag(2,1), the identity and a nilpotent shift."""
        self.assertAlmostEqual(spectral_norm(np.diag([2.0, 1.0])).value, 2.0, places=7)
        self.assertAlmostEqual(spectral_norm(np.eye(3)).value, 1.0, places=7)
        result = spectral_norm(np.array([[0.0, 1.0], [0.0, 0.0]]))
        self.assertAlmostEqual(float(result), 1.0, places=7)
        self.assertTrue(result.converged)

    def test_zero_matrix(self):
        """Test that the zero matrix gives 0, converged."""
        result = spectral_norm(np.zeros((3, 3)))
        self.assertEqual(result.value, 0.0)
        self.assertTrue(result.converged)

    def test_svd_oracle(self):
        """Test random PSD-derived matrices against numpy's SVD."""
        rng = np.random.default_rng(0)
        for d in range(2, 9):
            a = rng.standard_normal((d, d))
            m = a @ a.T + 0.1 * rng.standard_normal((d, d))
            expected = np.linalg.svd(m, compute_uv=False)[0]
            self.assertAlmostEqual(spectral_norm(m, tol=1e-12).value / expected, 1.0, delta=1e-6)

    def test_rejects_bad_input(self):
        """Test non-square input."""
        with self.assertRaises(ContractError):
            spectral_norm(np.ones((2, 3)))

    def test_ln_spectrum_is_inverse_rms(self):
        """Test that the unit-scale LN Jacobian has spectral norm 1/RMS of its input."""
        config = ModelConfig(n_layers=2, d_model=8, n_heads=2, vocab_size=11, seq_len=3,
                             topology=TopologyKind.POST_NORM)
        params = init_params(config)
        _, trace = model_forward(config, params, np.array([[1, 2, 3]]))
        rows = ln_jacobian_spectrum(trace, params, config)
        self.assertEqual([i for i, _ in rows], [0, 1, 2, 3])
        for (i, value), state in zip(rows, trace):
            v = state.X.data[0, 0] + state.O.data[0, 0]
            self.assertAlmostEqual(value, 1.0 / np.sqrt(np.mean(v * v) + config.norm_eps), places=6)


class ProfileTest(SimpleTestCase):
    """Tests for magnitude, gradient-norm and ratio profiles."""

    def setUp(self):
        """Set up a small Pre-Norm model after one backward pass."""
        self.config = ModelConfig(n_layers=2, d_model=8, n_heads=2, vocab_size=11, seq_len=4)
        self.tokens = np.random.default_rng(0).integers(0, 11, size=(2, 4))
        self.targets = np.random.default_rng(1).integers(0, 11, size=8)

    def backward(self, params, adjoint=1.0):
        with Tape() as tape:
            logits, trace = model_forward(self.config, params, self.tokens)
            loss = ops.cross_entropy_logits(ops.reshape(logits, (-1, 11)), self.targets)
        tape.backward(loss, adjoint=adjoint)
        return trace

    def test_magnitude_rows(self):
        """Test one row per state and no Y column for one stream."""
        _, trace = model_forward(self.config, init_params(self.config), self.tokens)
        rows = magnitude_profile(trace)
        self.assertEqual([r.layer_index for r in rows], [0, 1, 2, 3, 4])
        self.assertTrue(all(r.magnitude_X > 0 and r.magnitude_Y is None for r in rows))
        with self.assertRaises(ContractError):
            magnitude_profile([])

    def test_pythagorean_identity(self):
        """Test that global norm^2 equals the sum of block and other norms^2."""
        params = init_params(self.config)
        self.backward(params)
        profile = grad_norm_profile(params)
        self.assertEqual(len(profile.per_block), 4)
        total = sum(n ** 2 for n in profile.per_block) + sum(n ** 2 for n in profile.other.values())
        self.assertAlmostEqual(profile.global_norm ** 2, total, places=12)
        self.assertIn('unembed', profile.other)

    def test_doubling_and_zero_adjoint(self):
        """Test linearity in the loss adjoint."""
        once, twice, none = (init_params(self.config) for _ in range(3))
        self.backward(once)
        self.backward(twice, adjoint=2.0)
        self.backward(none, adjoint=0.0)
        assert_allclose(grad_norm_profile(twice).per_block, 2 * np.array(grad_norm_profile(once).per_block),
                        rtol=1e-12)
        self.assertEqual(grad_norm_profile(none).global_norm, 0.0)

    def test_build_profile_columns(self):
        """Test that a Siamese profile carries ratios on every row but the last."""
        config = ModelConfig(n_layers=1, d_model=8, n_heads=2, vocab_size=11, seq_len=4,
                             topology=TopologyKind.SIAMESE_PRACTICAL)
        params = init_params(config)
        _, trace = model_forward(config, params, self.tokens)
        rows = build_profile(trace, params)
        self.assertEqual(len(rows), 3)
        self.assertEqual((rows[0].ratio_X, rows[0].ratio_Y), (0.5, 0.5))
        self.assertIsNone(rows[-1].ratio_X)
        self.assertIsNone(rows[-1].grad_norm_block)
        self.assertEqual(rows[0].grad_norm_block, 0.0)

    def test_grad_norm_summary(self):
        """Test post-warmup statistics."""
        records = [MetricsRecord(step=s, loss=1.0, lr=1e-3, grad_norm=g, clip_factor=1.0)
                   for s, g in [(1, 500.0), (10, 0.1), (20, 150.0), (30, 0.2), (40, float('nan'))]]
        summary = grad_norm_summary(records, warmup_steps=5)
        self.assertEqual(summary['max_grad_norm'], 150.0)
        self.assertAlmostEqual(summary['frac_above_threshold'], 1 / 3)
        self.assertAlmostEqual(summary['frac_below_calm'], 2 / 3)
        self.assertIsNone(grad_norm_summary([], warmup_steps=0)['max_grad_norm'])

    def test_depth_monotone(self):
        """Test the monotonicity helper."""
        self.assertTrue(depth_monotone([1.0, 1.0, 2.0]))
        self.assertFalse(depth_monotone([1.0, 0.9]))
        self.assertTrue(depth_monotone([1.0, 0.9], tol=0.2))


class ContributionRatioTest(SimpleTestCase):
    """Tests for stream contribution ratios."""

    def siamese_params(self, kind=TopologyKind.SIAMESE_PRACTICAL):
        config = ModelConfig(n_layers=2, d_model=8, n_heads=2, vocab_size=11, seq_len=4, topology=kind)
        return init_params(config)

    def test_examples(self):
        """Test the learned-scale example, both zero and m_Y = 0."""
        ratio_x, ratio_y = contribution_ratio(1.05, 0.42)
        self.assertAlmostEqual(ratio_x, 0.714, places=3)
        self.assertAlmostEqual(ratio_y, 0.286, places=3)
        self.assertEqual(contribution_ratio(0.0, 0.0), (0.5, 0.5))
        self.assertEqual(contribution_ratio(2.0, 0.0), (1.0, 0.0))

    def test_init(self):
        """Test (0.5, 0.5) everywhere at init."""
        for kind in (TopologyKind.SIAMESE_CANONICAL, TopologyKind.SIAMESE_PRACTICAL):
            self.assertEqual(stream_contribution_ratios(self.siamese_params(kind)), [(0.5, 0.5)] * 4)

    def test_zero_y_scales(self):
        """Test m_Y = 0 gives (1.0, 0.0)."""
        params = self.siamese_params()
        for name in params.names():
            if '.ln_y.' in name:
                params[name].data = np.zeros(8)
        self.assertEqual(stream_contribution_ratios(params), [(1.0, 0.0)] * 4)

    def test_mlp_sublayer_uses_last_ln_x(self):
        """Test that m_X at a practical MLP sub-layer comes from the preceding LN^X."""
        params = self.siamese_params()
        params['layer.0.ln_x.scale'].data = np.full(8, -3.0)
        params['layer.0.gamma'].data = np.full(8, 0.5)
        ratios = stream_contribution_ratios(params)
        self.assertAlmostEqual(ratios[0][0], 1 / 3)
        self.assertAlmostEqual(ratios[1][0], 0.75)

    def test_shares_sum_to_one(self):
        """Test ratio_X + ratio_Y = 1 for random scales."""
        params = self.siamese_params(TopologyKind.SIAMESE_CANONICAL)
        rng = np.random.default_rng(0)
        for param in params:
            if param.name.endswith('.scale'):
                param.data = rng.standard_normal(8)
        for ratio_x, ratio_y in stream_contribution_ratios(params):
            self.assertAlmostEqual(ratio_x + ratio_y, 1.0, delta=1e-12)

    def test_fusion_weights(self):
        """Test the weights of both streams at the final fusion."""
        params = self.siamese_params()
        params['layer.2.ln_x.scale'].data = np.full(8, 2.0)
        params['final.ln.scale'].data = np.full(8, -0.5)
        self.assertEqual(fusion_weights(params), (2.0, 0.5))

    def test_wrong_topology(self):
        """Test that non-Siamese parameters are rejected."""
        with self.assertRaises(ContractError):
            stream_contribution_ratios(self.siamese_params(TopologyKind.RESIDUAL))


class LogitLensTest(SimpleTestCase):
    """Tests for logit_lens_match."""

    def setUp(self):
        """Set up random streams and an unembedding."""
        rng = np.random.default_rng(0)
        self.x = rng.standard_normal((2, 5, 8))
        self.y = rng.standard_normal((2, 5, 8)) * 10
        self.unembed = rng.standard_normal((8, 13))
        self.tokens = np.zeros((2, 5), dtype=int)

    def test_identical_streams(self):
        """Test match_X = match_Y = 1 when both streams equal the fused hidden state."""
        logits = ops.rms_norm(self.x).data @ self.unembed
        result = logit_lens_match((self.x, self.x), logits, None, self.unembed, self.tokens)
        self.assertEqual((result.match_X, result.match_Y), (1.0, 1.0))
        self.assertEqual(result.divergent_positions, 0)
        self.assertEqual(result.positions, 10)

    def test_fractions_bounded(self):
        """Test that every fraction lies in [0, 1] and divergent shares sum to at most 1."""
        logits = (self.x + ops.rms_norm(self.y).data) @ self.unembed
        for y in (self.y, np.zeros_like(self.y)):
            result = logit_lens_match((self.x, y), logits, None, self.unembed, self.tokens)
            for value in (result.match_X, result.match_Y, result.divergent_align_X, result.divergent_align_Y):
                self.assertTrue(0.0 <= value <= 1.0)
            self.assertLessEqual(result.divergent_align_X + result.divergent_align_Y, 1.0)

    def test_mask(self):
        """Test that a mask restricts the scored positions."""
        logits = ops.rms_norm(self.x).data @ self.unembed
        mask = np.zeros((2, 5), dtype=bool)
        mask[:, -1] = True
        result = logit_lens_match((self.x, self.y), logits, None, self.unembed, self.tokens, mask=mask)
        self.assertEqual(result.positions, 2)
        self.assertEqual(result.match_X, 1.0)
        with self.assertRaises(ContractError):
            logit_lens_match((self.x, self.y), logits, None, self.unembed, self.tokens, mask=np.zeros((2, 5)))

    def test_empty_and_mismatched(self):
        """Test the empty-input and shape errors."""
        empty = np.zeros((1, 0, 8))
        with self.assertRaises(ContractError):
            logit_lens_match((empty, empty), np.zeros((1, 0, 13)), None, self.unembed, np.zeros((1, 0)))
        with self.assertRaises(DimensionError):
            logit_lens_match((self.x, self.y[:1]), np.zeros((2, 5, 13)), None, self.unembed, self.tokens)


class UtilsTest(SimpleTestCase):
    """Tests for the profile CSV and Jacobian JSON writers."""

    def test_profile_csv_round_trip(self):
        """Test that written rows parse back to identical values."""
        rows = [
            ProfileRow(0, 2.8284271247461903, 2.8284271247461903, 0.125, 0.5, 0.5),
            ProfileRow(1, 1e-300, None, 3.3333333333333335, None, None),
            ProfileRow(2, 7.0),
        ]
        text = generate_profile_csv(rows)
        self.assertTrue(text.startswith('layer,magnitude_x,magnitude_y,grad_norm,ratio_x,ratio_y\n'))
        self.assertIn('\n2,7.0,,,,\n', text)
        self.assertEqual(parse_profile_csv(text), rows)

    def test_non_finite_cells(self):
        """Test that None is an empty cell and non-finite values keep their spelling."""
        self.assertEqual([format_float(v) for v in (None, float('nan'), float('inf'), -float('inf'))],
                         ['', 'nan', 'inf', '-inf'])
        self.assertIsNone(parse_float(''))
        self.assertTrue(np.isnan(parse_float('nan')))
        self.assertEqual(parse_float('-inf'), -float('inf'))
        rows = parse_profile_csv(generate_profile_csv([ProfileRow(0, float('inf'), None, float('nan'))]))
        self.assertEqual(rows[0].magnitude_X, float('inf'))
        self.assertIsNone(rows[0].magnitude_Y)
        self.assertTrue(np.isnan(rows[0].grad_norm_block))

    def test_jacobian_json(self):
        """Test the metadata header and the hoisted LN spectrum."""
        metadata = {'kind': 'siamese_canonical', 'd': 2, 'seed': 0, 'ln_spectrum': [[0, 1.5]]}
        layers = [{'layer': 0, 'assembled': np.eye(2), 'bruteforce': np.eye(2), 'max_abs_diff': np.float64(0.0)}]
        payload = json.loads(generate_jacobian_json(metadata, layers))
        self.assertEqual(payload['metadata'], {'kind': 'siamese_canonical', 'd': 2, 'seed': 0})
        self.assertEqual(payload['ln_spectrum'], [[0, 1.5]])
        self.assertEqual(payload['layers'][0]['assembled'], [[1.0, 0.0], [0.0, 1.0]])
        self.assertIn('ln_spectrum', metadata)
