import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from blocks.checkpoint import load_params, read_metadata, save_params
from blocks.config import ModelConfig
from blocks.initialization import deepnorm_constants, init_params, truncated_normal
from blocks.layers import attention_forward, block_params, embed, mlp_forward
from tensor_core import ops
from tensor_core.exceptions import ConfigError, SequenceLengthError, TokenIndexError
from tensor_core.gradcheck import finite_diff_check, param_objective
from tensor_core.tensor import Tensor
from topologies.kinds import TopologyKind


def small_config(**overrides):
    values = dict(n_layers=2, d_model=8, n_heads=2, vocab_size=13, seq_len=4, seed=0)
    values.update(overrides)
    return ModelConfig(**values)


class ModelConfigTest(SimpleTestCase):
    """Tests for ModelConfig validation."""

    def test_heads_must_divide_d(self):
        """Test that n_heads must divide d_model."""
        with self.assertRaises(ConfigError):
            small_config(d_model=6, n_heads=4)

    def test_limits(self):
        """Test the seq_len, vocab_size and topology checks."""
        with self.assertRaises(ConfigError):
            small_config(seq_len=0)
        with self.assertRaises(ConfigError):
            small_config(vocab_size=1)
        with self.assertRaises(ConfigError):
            small_config(topology='sandwich_norm')

    def test_sublayer_indexing(self):
        """Test that sub-layers alternate attention and MLP."""
        config = small_config(n_layers=3)
        self.assertEqual(config.n_sublayers, 6)
        self.assertEqual([config.is_attention(i) for i in range(4)], [True, False, True, False])

    def test_dict_round_trip(self):
        """Test to_dict / from_dict."""
        config = small_config(topology=TopologyKind.SIAMESE_PRACTICAL, depth_scaling=True)
        self.assertEqual(ModelConfig.from_dict(config.to_dict()), config)


class InitParamsTest(SimpleTestCase):
    """Tests for init_params."""

    def test_deterministic(self):
        """Test that the same seed gives bit-identical parameters."""
        config = small_config(topology=TopologyKind.SIAMESE_PRACTICAL)
        first, second = init_params(config), init_params(config)
        self.assertEqual(first.names(), second.names())
        assert_array_equal(first.flat_values(), second.flat_values())

    def test_scales_and_gamma_start_at_one(self):
        """Test that every LN scale, gamma and gate is 1.0 for every topology."""
        for kind in TopologyKind:
            params = init_params(small_config(topology=kind, fused_input_norm=True, qk_norm=True))
            for param in params:
                if param.name.endswith('.scale') or param.name.endswith(('gamma', 'x_gate')):
                    assert_array_equal(param.data, np.ones_like(param.data), err_msg=param.name)

    def test_truncated_normal_std(self):
        """Test the sample std at d=2048 and the truncation bound."""
        std = 1.0 / np.sqrt(2048)
        samples = truncated_normal(np.random.default_rng(0), (200_000,), std)
        self.assertAlmostEqual(std, 0.0221, places=4)
        self.assertLess(abs(samples.std() - std) / std, 0.1)
        self.assertLessEqual(np.abs(samples).max(), 3 * std)

    def test_weights_shared_across_topologies(self):
        """Test that block weights do not depend on the wiring."""
        pre = init_params(small_config(topology=TopologyKind.PRE_NORM))
        siamese = init_params(small_config(topology=TopologyKind.SIAMESE_CANONICAL))
        for name in ('embed.tokens', 'layer.0.attn.w_q', 'layer.3.mlp.w_down', 'unembed'):
            assert_array_equal(pre[name].data, siamese[name].data)

    def test_deepnorm_beta(self):
        """Test that DeepNorm rescales the residual-output weights by beta."""
        plain = init_params(small_config(topology=TopologyKind.POST_NORM))
        deep = init_params(small_config(topology=TopologyKind.DEEP_NORM))
        alpha, beta = deepnorm_constants(2)
        self.assertAlmostEqual(alpha, 4 ** 0.25)
        assert_allclose(deep['layer.0.attn.w_o'].data, beta * plain['layer.0.attn.w_o'].data)
        assert_array_equal(deep['layer.0.attn.w_q'].data, plain['layer.0.attn.w_q'].data)

    def test_siamese_parameter_overhead(self):
        """Test that SiameseNorm adds only scale vectors over Pre-Norm."""
        for n_layers in (1, 2, 4):
            pre = init_params(small_config(n_layers=n_layers, topology=TopologyKind.PRE_NORM))
            for kind in (TopologyKind.SIAMESE_CANONICAL, TopologyKind.SIAMESE_PRACTICAL):
                siamese = init_params(small_config(n_layers=n_layers, topology=kind))
                excess = siamese.num_values() - pre.num_values()
                self.assertGreater(excess, 0)
                self.assertLess(excess, 3 * (2 * n_layers + 1) * 8)


class AttentionTest(SimpleTestCase):
    """Tests for attention_forward."""

    def setUp(self):
        """Set up an attention block."""
        self.config = small_config()
        self.params = init_params(self.config)
        self.block = block_params(self.params, 0)

    def test_single_position(self):
        """Test that with T=1 the output is x.w_v.w_o."""
        x = np.random.default_rng(0).standard_normal((1, 1, 8))
        expected = x @ self.block['w_v'].data @ self.block['w_o'].data
        assert_allclose(attention_forward(self.block, Tensor(x), self.config).data, expected, atol=1e-14)

    def test_zero_value_projection(self):
        """Test that w_v=0 gives zero output."""
        self.block.weights['w_v'] = Tensor(np.zeros((8, 8)))
        x = np.random.default_rng(1).standard_normal((2, 4, 8))
        assert_array_equal(attention_forward(self.block, Tensor(x), self.config).data, np.zeros((2, 4, 8)))

    def test_causality(self):
        """Test that perturbing position t leaves earlier positions bit-identical."""
        x = np.random.default_rng(2).standard_normal((1, 4, 8))
        base = attention_forward(self.block, Tensor(x), self.config).data
        for t in range(4):
            perturbed = x.copy()
            perturbed[0, t] += 0.5
            out = attention_forward(self.block, Tensor(perturbed), self.config).data
            assert_array_equal(out[0, :t], base[0, :t])

    def test_too_long(self):
        """Test that T > seq_len raises."""
        with self.assertRaises(SequenceLengthError):
            attention_forward(self.block, Tensor(np.zeros((1, 5, 8))), self.config)

    def test_gradcheck_with_qk_norm(self):
        """Test attention weight gradients, qk-norm on."""
        config = small_config(qk_norm=True)
        params = init_params(config)
        x = np.random.default_rng(3).standard_normal((1, 4, 8))
        weights = np.random.default_rng(4).standard_normal((1, 4, 8))
        layer = params.with_prefix('layer.0.attn.')
        subset = params.renamed(lambda n: n if n.startswith('layer.0.attn.') else None)
        self.assertEqual(len(subset), len(layer))
        objective = param_objective(subset, lambda ps: ops.total(ops.mul(
            attention_forward(block_params(ps, 0), Tensor(x), config), weights)))
        self.assertLessEqual(finite_diff_check(objective, subset.flat_values()), 1e-5)


class MlpTest(SimpleTestCase):
    """Tests for mlp_forward."""

    def test_gradcheck(self):
        """Test MLP weight gradients."""
        config = small_config()
        params = init_params(config).renamed(lambda n: n if n.startswith('layer.1.mlp.') else None)
        x = np.random.default_rng(0).standard_normal((2, 3, 8))
        objective = param_objective(params, lambda ps: ops.total(mlp_forward(block_params(ps, 1), Tensor(x))))
        self.assertLessEqual(finite_diff_check(objective, params.flat_values()), 1e-5)


class EmbedTest(SimpleTestCase):
    """Tests for embed."""

    def test_without_norm(self):
        """Test that the output is table[token] + pos[t] exactly."""
        rng = np.random.default_rng(0)
        table, pos = rng.standard_normal((5, 4)), rng.standard_normal((3, 4))
        tokens = np.array([[4, 0, 2]])
        out = embed(tokens, table, pos).data
        assert_array_equal(out[0], table[[4, 0, 2]] + pos)

    def test_norm_gives_sqrt_d(self):
        """Test that embed_norm puts every row at sqrt(d), d=2048."""
        rng = np.random.default_rng(1)
        table, pos = rng.standard_normal((7, 2048)) * 0.02, rng.standard_normal((2, 2048)) * 0.02
        out = embed(np.array([[1, 6]]), table, pos, embed_norm=True, eps=0.0).data
        assert_allclose(np.linalg.norm(out, axis=-1), np.full((1, 2), 45.254834), atol=1e-6)

    def test_unit_rms_row_unchanged(self):
        """Test that a unit-RMS row is unchanged up to eps."""
        out = embed(np.array([[0]]), np.ones((1, 4)), np.zeros((1, 4)), embed_norm=True).data
        assert_allclose(out[0, 0], np.ones(4), atol=1e-5)

    def test_out_of_range_token(self):
        """Test that an unknown token raises an IndexError."""
        with self.assertRaises(TokenIndexError):
            embed(np.array([[5]]), np.ones((5, 4)), np.zeros((1, 4)))


class CheckpointTest(SimpleTestCase):
    """Tests for ParamSet checkpoints."""

    def test_round_trip(self):
        """Test that values, names, order, config and metadata survive."""
        config = small_config(topology=TopologyKind.SIAMESE_PRACTICAL, fused_input_norm=True)
        params = init_params(config)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'sub' / 'checkpoint.bin'
            save_params(params, path, metadata={'status': 'converged'})
            loaded = load_params(path)
            self.assertEqual(read_metadata(path), {'status': 'converged'})
        self.assertEqual(loaded.names(), params.names())
        self.assertEqual(loaded.config, config)
        assert_array_equal(loaded.flat_values(), params.flat_values())

    def test_rejects_foreign_files(self):
        """Test that other files raise ConfigError and missing ones FileNotFoundError."""
        with tempfile.TemporaryDirectory() as tmp:
            bogus = Path(tmp) / 'bogus.bin'
            bogus.write_bytes(b'\x02\x00\x00\x00\x00\x00\x00\x00{}')
            with self.assertRaises(ConfigError):
                load_params(bogus)
            with self.assertRaises(FileNotFoundError):
                load_params(Path(tmp) / 'missing.bin')
