import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from blocks.config import ModelConfig
from blocks.initialization import init_params
from blocks.layers import block_params
from tensor_core import ops
from tensor_core.exceptions import ContractError, DivergenceError
from tensor_core.gradcheck import finite_diff_check, param_objective
from tensor_core.tensor import Tape, Tensor
from topologies.kinds import Reduction, TopologyKind
from topologies.reduction import apply_reduction, reference_params
from topologies.state import StreamState
from topologies.wiring import depth_scale, layer_forward, layer_norm_params, model_forward

SEEDS = range(10)


def config_for(kind, **overrides):
    values = dict(n_layers=2, d_model=8, n_heads=2, vocab_size=11, seq_len=4, topology=kind, seed=0)
    values.update(overrides)
    return ModelConfig(**values)


def tokens_for(config, batch=2, seed=0):
    return np.random.default_rng(seed + 100).integers(0, config.vocab_size, size=(batch, config.seq_len))


def zero_output_projections(params):
    for name in params.names():
        if name.endswith(('attn.w_o', 'mlp.w_down')):
            params[name].data = np.zeros_like(params[name].data)
    return params


def mean_norm(tensor):
    return float(np.mean(np.linalg.norm(tensor.data, axis=-1)))


class TopologyKindTest(SimpleTestCase):
    """Tests for TopologyKind properties."""

    def test_stream_counts(self):
        """Test which kinds carry the Y-stream."""
        two = {k for k in TopologyKind if k.two_stream}
        self.assertEqual(two, {TopologyKind.RESIDUAL, TopologyKind.HYBRID_RESIDUAL,
                               TopologyKind.SIAMESE_CANONICAL, TopologyKind.SIAMESE_PRACTICAL})

    def test_trace_shapes(self):
        """Test that Y is present exactly for two-stream kinds."""
        for kind in TopologyKind:
            config = config_for(kind)
            logits, trace = model_forward(config, init_params(config), tokens_for(config))
            self.assertEqual(logits.shape, (2, 4, 11))
            self.assertEqual(len(trace), config.n_sublayers + 1)
            for state in trace:
                self.assertEqual(state.two_stream, kind.two_stream)
                self.assertEqual(state.X.shape, (2, 4, 8))
            for state in trace[:-1]:
                self.assertEqual(state.O.shape, (2, 4, 8))


class LayerForwardTest(SimpleTestCase):
    """Tests for layer_forward."""

    def run_layer(self, kind, i=0, zero_branch=False, **overrides):
        config = config_for(kind, **overrides)
        params = init_params(config)
        if zero_branch:
            zero_output_projections(params)
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((1, 3, 8)))
        y = Tensor(rng.standard_normal((1, 3, 8))) if kind.two_stream else None
        state = StreamState(i, x, y)
        out = layer_forward(kind, state, block_params(params, i), layer_norm_params(params, i), i, config)
        return config, params, state, out

    def test_depth_scale_values(self):
        """Test s = 1/sqrt(i+1) when on, 1 when off or unsupported."""
        config = config_for(TopologyKind.SIAMESE_CANONICAL, depth_scaling=True)
        self.assertEqual(depth_scale(config.topology, 0, config), 1.0)
        self.assertEqual(depth_scale(config.topology, 3, config), 0.5)
        plain = config_for(TopologyKind.POST_NORM, depth_scaling=True)
        self.assertEqual(depth_scale(plain.topology, 3, plain), 1.0)

    def test_pre_norm_zero_branch_is_identity(self):
        """Test that X passes through exactly when F is zero."""
        _, _, state, out = self.run_layer(TopologyKind.PRE_NORM, zero_branch=True)
        assert_array_equal(out.X.data, state.X.data)

    def test_siamese_zero_update(self):
        """Test X' = LN^X(X) and Y' = Y when O is zero."""
        config, params, state, out = self.run_layer(TopologyKind.SIAMESE_CANONICAL, i=1, zero_branch=True)
        assert_array_equal(state.O.data, np.zeros_like(state.O.data))
        assert_array_equal(out.Y.data, state.Y.data)
        expected = ops.rms_norm(state.X, params['layer.1.ln_x.scale'], config.norm_eps).data
        assert_array_equal(out.X.data, expected)

    def test_practical_mlp_has_no_main_path_norm(self):
        """Test that the practical MLP sub-layer adds the scaled update without LN."""
        _, _, state, out = self.run_layer(TopologyKind.SIAMESE_PRACTICAL, i=3, depth_scaling=True)
        self.assertEqual(state.depth_scale, 0.5)
        assert_allclose(out.X.data, state.X.data + 0.5 * state.O.data, atol=1e-15)

    def test_hybrid_attention_norms_main_path(self):
        """Test that HybridNorm applies the main-path LN after attention only."""
        _, _, _, out = self.run_layer(TopologyKind.HYBRID_NORM, i=0, norm_eps=0.0)
        assert_allclose(np.linalg.norm(out.X.data, axis=-1), np.full((1, 3), np.sqrt(8)), atol=1e-12)
        _, _, state, out = self.run_layer(TopologyKind.HYBRID_NORM, i=1)
        assert_allclose(out.X.data, state.X.data + state.O.data, atol=1e-15)

    def test_residual_shortcut(self):
        """Test Y' = Y + F(X) for ResiDual."""
        _, _, state, out = self.run_layer(TopologyKind.RESIDUAL)
        assert_array_equal(out.Y.data, state.Y.data + state.O.data)

    def test_stream_mismatch(self):
        """Test that a single-stream state is rejected by a two-stream kind."""
        config = config_for(TopologyKind.SIAMESE_CANONICAL)
        params = init_params(config)
        with self.assertRaises(ContractError):
            layer_forward(config.topology, StreamState(0, Tensor(np.zeros((1, 1, 8)))),
                          block_params(params, 0), layer_norm_params(params, 0), 0, config)

    def test_divergence_carries_index_and_trace(self):
        """Test that a non-finite activation is signalled with its sub-layer."""
        config = config_for(TopologyKind.PRE_NORM)
        params = init_params(config)
        params['layer.1.mlp.w_down'].data[0, 0] = np.inf
        with self.assertRaises(DivergenceError) as ctx:
            model_forward(config, params, tokens_for(config))
        self.assertEqual(ctx.exception.layer_index, 1)
        trace = ctx.exception.trace
        self.assertEqual(len(trace), 3)
        self.assertTrue(np.all(np.isfinite(trace[1].X.data)))
        self.assertFalse(np.all(np.isfinite(trace[2].X.data)))
        self.assertIs(trace[2], ctx.exception.state)


class ModelForwardTest(SimpleTestCase):
    """Tests for model_forward."""

    def test_streams_start_equal(self):
        """Test X_0 = Y_0 = embedded input for two-stream kinds."""
        for kind in (TopologyKind.RESIDUAL, TopologyKind.SIAMESE_CANONICAL, TopologyKind.SIAMESE_PRACTICAL):
            config = config_for(kind)
            _, trace = model_forward(config, init_params(config), tokens_for(config))
            assert_array_equal(trace[0].X.data, trace[0].Y.data)

    def test_zero_layer_model(self):
        """Test that a 0-layer Pre-Norm model is unembed(LN_final(embedding))."""
        config = config_for(TopologyKind.PRE_NORM, n_layers=0)
        params = init_params(config)
        tokens = tokens_for(config)
        logits, trace = model_forward(config, params, tokens)
        hidden = params['embed.tokens'].data[tokens] + params['embed.positions'].data[:4]
        expected = ops.rms_norm(hidden, params['final.ln.scale']).data @ params['unembed'].data
        assert_allclose(logits.data, expected, atol=1e-13)
        self.assertEqual(len(trace), 1)

    def test_deterministic(self):
        """Test bit-identical logits across runs."""
        config = config_for(TopologyKind.SIAMESE_PRACTICAL, fused_input_norm=True, depth_scaling=True)
        first = model_forward(config, init_params(config), tokens_for(config))[0].data
        second = model_forward(config, init_params(config), tokens_for(config))[0].data
        assert_array_equal(first, second)

    def test_gradcheck_every_topology(self):
        """Test full-model gradients of a 2-sub-layer model of every kind, d=4."""
        for kind in TopologyKind:
            with self.subTest(kind=kind.value):
                config = config_for(kind, n_layers=1, d_model=4, n_heads=1, seq_len=3)
                params = init_params(config)
                tokens = tokens_for(config)
                targets = np.random.default_rng(1).integers(0, config.vocab_size, size=tokens.size)

                def loss_fn(ps, config=config, tokens=tokens, targets=targets):
                    logits, _ = model_forward(config, ps, tokens)
                    return ops.cross_entropy_logits(ops.reshape(logits, (-1, config.vocab_size)), targets)

                objective = param_objective(params.copy(), loss_fn)
                self.assertLessEqual(finite_diff_check(objective, params.flat_values()), 1e-6)


class ReductionTest(SimpleTestCase):
    """Tests for the canonical SiameseNorm reductions."""

    def check_equivalence(self, target, seed, d_model, n_layers):
        config = config_for(TopologyKind.SIAMESE_CANONICAL, d_model=d_model, n_heads=2, n_layers=n_layers, seed=seed)
        params = init_params(config)
        rng = np.random.default_rng(seed)
        for param in params:
            if param.name.endswith('.scale'):
                param.data = rng.uniform(0.5, 1.5, size=param.shape)
        tokens = tokens_for(config, seed=seed)
        reduced_logits, _ = model_forward(config, apply_reduction(params, target), tokens)
        ref_config, ref_params = reference_params(params, target)
        ref_logits, _ = model_forward(ref_config, ref_params, tokens)
        assert_allclose(reduced_logits.data, ref_logits.data, rtol=0, atol=1e-12)

    def test_to_pre_norm(self):
        """Test that zeroing LN^X gives the Pre-Norm model on the Y-stream."""
        for seed in SEEDS:
            self.check_equivalence(Reduction.TO_PRE_NORM, seed, d_model=4 + 4 * (seed % 4), n_layers=1 + seed % 4)

    def test_to_post_norm(self):
        """Test that zeroing LN^Y and LN_final gives the Post-Norm model on the X-stream."""
        for seed in SEEDS:
            self.check_equivalence(Reduction.TO_POST_NORM, seed, d_model=4 + 4 * (seed % 4), n_layers=1 + seed % 4)

    def test_both_reductions_smoke(self):
        """Test that applying both reductions still runs."""
        config = config_for(TopologyKind.SIAMESE_CANONICAL)
        params = apply_reduction(apply_reduction(init_params(config), 'to_pre_norm'), 'to_post_norm')
        logits, _ = model_forward(config, params, tokens_for(config))
        self.assertTrue(np.all(np.isfinite(logits.data)))

    def test_only_touches_one_stream(self):
        """Test that ToPreNorm zeroes LN^X and the gate and nothing else."""
        params = init_params(config_for(TopologyKind.SIAMESE_CANONICAL))
        reduced = apply_reduction(params, Reduction.TO_PRE_NORM)
        for param in reduced:
            zeroed = '.ln_x.' in param.name or param.name == 'embed.x_gate'
            if zeroed:
                assert_array_equal(param.data, np.zeros_like(param.data))
            else:
                assert_array_equal(param.data, params[param.name].data)

    def test_preconditions(self):
        """Test that other topologies and flags are rejected."""
        with self.assertRaises(ContractError):
            apply_reduction(init_params(config_for(TopologyKind.SIAMESE_PRACTICAL)), Reduction.TO_PRE_NORM)
        with self.assertRaises(ContractError):
            apply_reduction(init_params(config_for(TopologyKind.SIAMESE_CANONICAL, depth_scaling=True)),
                            Reduction.TO_POST_NORM)


class MagnitudeDynamicsTest(SimpleTestCase):
    """Tests for hidden-state magnitudes at initialization."""

    def magnitudes(self, kind, seed, stream='X', **overrides):
        config = config_for(kind, n_layers=8, d_model=16, n_heads=2, seq_len=4, seed=seed, **overrides)
        _, trace = model_forward(config, init_params(config), tokens_for(config, batch=4, seed=seed))
        return [mean_norm(getattr(state, stream)) for state in trace]

    def test_pre_norm_grows_with_depth(self):
        """Test that the seed-averaged Pre-Norm magnitude never decreases over 16 sub-layers."""
        profile = np.mean([self.magnitudes(TopologyKind.PRE_NORM, seed) for seed in range(8)], axis=0)
        self.assertEqual(len(profile), 17)
        self.assertTrue(np.all(np.diff(profile) >= 0), profile)

    def test_post_norm_pinned_at_sqrt_d(self):
        """Test that every Post-Norm output has magnitude sqrt(d)."""
        for seed in range(8):
            profile = self.magnitudes(TopologyKind.POST_NORM, seed, norm_eps=0.0)
            assert_allclose(profile[1:], np.full(16, 4.0), atol=1e-9)

    def test_siamese_x_stream_pinned_at_sqrt_d(self):
        """Test the bounded stream after every LN^X."""
        for seed in range(8):
            canonical = self.magnitudes(TopologyKind.SIAMESE_CANONICAL, seed, norm_eps=0.0)
            assert_allclose(canonical[1:], np.full(16, 4.0), atol=1e-9)
            practical = self.magnitudes(TopologyKind.SIAMESE_PRACTICAL, seed, norm_eps=0.0)
            # Outputs of attention sub-layers 0, 2, ... enter sub-layers 1, 3, ...
            assert_allclose(practical[1::2], np.full(8, 4.0), atol=1e-9)

    def test_embed_norm_layer_zero(self):
        """Test that embed_norm puts the layer-0 magnitude at sqrt(64) = 8."""
        config = config_for(TopologyKind.PRE_NORM, d_model=64, n_heads=4, embed_norm=True, norm_eps=0.0)
        _, trace = model_forward(config, init_params(config), tokens_for(config))
        assert_allclose(np.linalg.norm(trace[0].X.data, axis=-1), np.full((2, 4), 8.0), atol=1e-9)


class GradientHighwayTest(SimpleTestCase):
    """Tests for the identity gradient path through the unbounded stream."""

    def adjoints(self, kind, stream):
        config = config_for(kind, n_layers=3)
        params = zero_output_projections(init_params(config))
        tokens = tokens_for(config)
        targets = np.random.default_rng(2).integers(0, config.vocab_size, size=tokens.size)
        with Tape() as tape:
            logits, trace = model_forward(config, params, tokens)
            loss = ops.cross_entropy_logits(ops.reshape(logits, (-1, config.vocab_size)), targets)
        tape.backward(loss)
        return [getattr(state, stream).grad for state in trace]

    def test_pre_norm(self):
        """Test that every X_i adjoint equals the X_N adjoint bitwise."""
        grads = self.adjoints(TopologyKind.PRE_NORM, 'X')
        for grad in grads:
            assert_array_equal(grad, grads[-1])

    def test_siamese(self):
        """Test that every Y_i adjoint equals the Y_N adjoint bitwise."""
        for kind in (TopologyKind.SIAMESE_CANONICAL, TopologyKind.SIAMESE_PRACTICAL):
            grads = self.adjoints(kind, 'Y')
            self.assertTrue(np.any(grads[-1] != 0))
            for grad in grads:
                assert_array_equal(grad, grads[-1])

    def test_residual_y_stream_gets_no_branch_gradient(self):
        """Test that the ResiDual shortcut only carries the final-fusion adjoint."""
        for kind in (TopologyKind.RESIDUAL, TopologyKind.HYBRID_RESIDUAL):
            grads = self.adjoints(kind, 'Y')
            for grad in grads:
                assert_array_equal(grad, grads[-1])


class DepthScalingTest(SimpleTestCase):
    """Tests for depth-wise scaling of the bounded-stream update."""

    def test_recorded_scales(self):
        """Test that the trace records s = 1/sqrt(i+1)."""
        config = config_for(TopologyKind.SIAMESE_PRACTICAL, depth_scaling=True)
        _, trace = model_forward(config, init_params(config), tokens_for(config))
        assert_allclose([s.depth_scale for s in trace[:-1]], [1.0, 1 / np.sqrt(2), 1 / np.sqrt(3), 0.5])

    def test_y_stream_unscaled(self):
        """Test Y_{i+1} = Y_i + O_i exactly and an unchanged first sub-layer."""
        for kind in (TopologyKind.SIAMESE_CANONICAL, TopologyKind.SIAMESE_PRACTICAL):
            scaled_cfg = config_for(kind, depth_scaling=True)
            plain_cfg = config_for(kind, depth_scaling=False)
            params = init_params(plain_cfg)
            tokens = tokens_for(plain_cfg)
            _, scaled = model_forward(scaled_cfg, params, tokens)
            _, plain = model_forward(plain_cfg, params, tokens)
            for before, after in zip(scaled[:-1], scaled[1:]):
                assert_array_equal(after.Y.data, before.Y.data + before.O.data)
            assert_array_equal(scaled[1].Y.data, plain[1].Y.data)
            assert_array_equal(scaled[1].X.data, plain[1].X.data)
