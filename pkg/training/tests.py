import dataclasses
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from blocks.config import ModelConfig
from blocks.initialization import init_params
from tensor_core.exceptions import ConfigError, ContractError, DivergenceError
from tensor_core.params import ParamSet
from tensor_core.tensor import Tape
from topologies.kinds import TopologyKind

from .config import AdamWHyper, DatasetSpec, NO_DECAY_PATTERNS, TrainConfig
from .datasets import (
    build_dataset, iter_batches, make_copy_dataset, make_modular_addition_dataset, make_text_dataset,
    modular_addition_tokens, sample_batch,
)
from .loop import MetricsRecord, RunStatus, batch_loss, evaluate, train
from .optim import AdamWState, adamw_step, clip_global_norm, global_grad_norm
from .schedule import cosine_lr
from .utils import generate_metrics_csv, parse_metrics_csv

SLOW_TESTS = bool(os.environ.get('NORMLAB_SLOW_TESTS'))


def tiny_model(kind=TopologyKind.SIAMESE_PRACTICAL, **overrides):
    values = dict(n_layers=1, d_model=8, n_heads=2, vocab_size=9, seq_len=4, topology=kind, seed=0)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_train(**overrides):
    values = dict(
        peak_lr=1e-2, warmup_steps=2, total_steps=12, batch_size=8, eval_every=4,
        dataset={'kind': 'modular_add', 'p': 7, 'n_examples': 49},
    )
    values.update(overrides)
    return TrainConfig(**values)


def single_param(value, grad, name='w'):
    params = ParamSet()
    param = params.add(name, np.array(value, dtype=np.float64))
    param.grad = np.array(grad, dtype=np.float64)
    return params


class TrainConfigTest(SimpleTestCase):
    """Tests for TrainConfig and DatasetSpec validation."""

    def test_rejects_bad_values(self):
        """Test the lr, warmup, spike and beta checks."""
        for overrides in ({'peak_lr': 0.0}, {'warmup_steps': 12}, {'spike_factor': 1.0},
                          {'betas': (0.9, 1.0)}, {'final_lr_factor': 1.5}):
            with self.assertRaises(ConfigError, msg=str(overrides)):
                tiny_train(**overrides)

    def test_dataset_from_dict(self):
        """Test that a dataset dict becomes a DatasetSpec."""
        cfg = tiny_train()
        self.assertEqual(cfg.dataset, DatasetSpec(kind='modular_add', p=7, n_examples=49))
        self.assertEqual(TrainConfig(**cfg.to_dict()), cfg)

    def test_dataset_spec_errors(self):
        """Test unknown kinds and missing paths."""
        with self.assertRaises(ConfigError):
            DatasetSpec(kind='wikitext')
        with self.assertRaises(ConfigError):
            DatasetSpec(kind='text_file')
        with self.assertRaises(ConfigError):
            DatasetSpec(eval_fraction=1.0)

    def test_decay_exemption_flag(self):
        """Test that only the flag fills decay_exempt."""
        self.assertEqual(tiny_train().hyper(1e-3).decay_exempt, ())
        self.assertEqual(tiny_train(exempt_norms_from_decay=True).hyper(1e-3).decay_exempt, NO_DECAY_PATTERNS)


class CosineScheduleTest(SimpleTestCase):
    """Tests for cosine_lr."""

    def setUp(self):
        """Set up a 10-step warmup over 110 steps."""
        self.cfg = TrainConfig(peak_lr=1e-3, warmup_steps=10, total_steps=110)

    def test_examples(self):
        """Test step 0, the end of warmup and the last step."""
        self.assertEqual(cosine_lr(0, self.cfg), 0.0)
        self.assertAlmostEqual(cosine_lr(5, self.cfg), 5e-4)
        self.assertAlmostEqual(cosine_lr(10, self.cfg), 1e-3, places=15)
        self.assertAlmostEqual(cosine_lr(110, self.cfg), 1e-4, places=15)

    def test_continuous_and_monotone(self):
        """Test continuity at the warmup boundary and no increase after it."""
        values = [cosine_lr(step, self.cfg) for step in range(111)]
        self.assertLess(abs(values[10] - values[9]), 1.01e-4)
        self.assertLess(abs(values[11] - values[10]), 1e-6)
        self.assertTrue(all(b <= a for a, b in zip(values[10:], values[11:])))

    def test_out_of_range(self):
        """Test that steps outside [0, total_steps] raise."""
        for step in (-1, 111):
            with self.assertRaises(ContractError):
                cosine_lr(step, self.cfg)


class AdamWTest(SimpleTestCase):
    """Tests for adamw_step."""

    def test_zero_gradient_decay(self):
        """Test that wd=0.1, lr=0.001 multiplies theta by 1 - 1e-4."""
        params = single_param([2.0, -3.0], [0.0, 0.0])
        adamw_step(params, AdamWState(), AdamWHyper(lr=1e-3, weight_decay=0.1), step=1)
        assert_allclose(params['w'].data, np.array([2.0, -3.0]) * (1 - 1e-4), rtol=1e-15)

    def test_zero_gradient_no_decay(self):
        """Test that wd=0 leaves theta unchanged."""
        params = single_param([2.0, -3.0], [0.0, 0.0])
        adamw_step(params, AdamWState(), AdamWHyper(lr=1e-3), step=1)
        assert_array_equal(params['w'].data, [2.0, -3.0])

    def test_first_step(self):
        """Test that theta=0, g=1 at step 1 moves by -lr/(1 + eps)."""
        params = single_param([0.0], [1.0])
        state = AdamWState()
        adamw_step(params, state, AdamWHyper(lr=1e-3), step=1)
        self.assertAlmostEqual(params['w'].data[0], -1e-3 / (1 + 1e-8), places=15)
        assert_allclose(state.m['w'], [0.1])
        assert_allclose(state.v['w'], [0.05])

    def test_exempt_names(self):
        """Test that exempted names skip the decay."""
        params = ParamSet()
        params.add('layer.0.ln.scale', np.ones(2))
        params.add('layer.0.attn.w_q', np.ones(2))
        hyper = AdamWHyper(lr=0.5, weight_decay=0.1, decay_exempt=NO_DECAY_PATTERNS)
        adamw_step(params, AdamWState(), hyper, step=1)
        assert_array_equal(params['layer.0.ln.scale'].data, np.ones(2))
        assert_allclose(params['layer.0.attn.w_q'].data, np.full(2, 0.95))

    def test_non_finite_gradient(self):
        """Test that a NaN gradient raises before anything changes."""
        params = single_param([1.0, 1.0], [0.5, np.nan])
        state = AdamWState()
        with self.assertRaises(DivergenceError):
            adamw_step(params, state, AdamWHyper(lr=1e-3, weight_decay=0.1), step=1)
        assert_array_equal(params['w'].data, [1.0, 1.0])
        self.assertEqual(state.m, {})

    def test_step_must_be_positive(self):
        """Test that step 0 is a contract error."""
        with self.assertRaises(ContractError):
            adamw_step(single_param([0.0], [1.0]), AdamWState(), AdamWHyper(lr=1e-3), step=0)


class ClipTest(SimpleTestCase):
    """Tests for clip_global_norm."""

    def test_below_threshold(self):
        """Test that g = 0.5 leaves the gradients untouched."""
        params = single_param([0.0, 0.0], [0.3, 0.4])
        self.assertEqual(clip_global_norm(params, 1.0), 1.0)
        assert_array_equal(params['w'].grad, [0.3, 0.4])

    def test_scales_down(self):
        """Test g = 4 gives factor 0.25 and unit norm afterwards."""
        params = ParamSet()
        params.add('a', np.zeros(2)).grad = np.array([2.4, 0.0])
        params.add('b', np.zeros(1)).grad = np.array([3.2])
        self.assertAlmostEqual(clip_global_norm(params, 1.0), 0.25)
        self.assertAlmostEqual(global_grad_norm(params), 1.0, delta=1e-12)

    def test_three_four(self):
        """Test [3, 4] -> [0.6, 0.8]."""
        params = single_param([0.0, 0.0], [3.0, 4.0])
        clip_global_norm(params, 1.0)
        assert_allclose(params['w'].grad, [0.6, 0.8], atol=1e-15)

    def test_idempotent(self):
        """Test that clipping twice equals clipping once."""
        params = single_param(np.zeros(5), np.random.default_rng(0).standard_normal(5) * 10)
        clip_global_norm(params, 1.0)
        once = params['w'].grad.copy()
        clip_global_norm(params, 1.0)
        assert_allclose(params['w'].grad, once, rtol=1e-15)


class DatasetTest(SimpleTestCase):
    """Tests for the token datasets."""

    def test_modular_addition_examples(self):
        """Test the encoding and answers for p=7."""
        self.assertEqual(modular_addition_tokens(3, 5, 7), ([3, 7, 5, 8], 1))
        self.assertEqual(modular_addition_tokens(0, 0, 7)[1], 0)

    def test_modular_addition_splits(self):
        """Test disjoint splits covering at most p^2 pairs and answer-only weights."""
        dataset = make_modular_addition_dataset(7, 100, seed=0, eval_fraction=0.2)
        self.assertEqual(dataset.vocab_size, 9)
        self.assertEqual(len(dataset.train) + len(dataset.eval), 49)
        train_pairs = {(int(a), int(b)) for a, _, b, _ in dataset.train.inputs}
        eval_pairs = {(int(a), int(b)) for a, _, b, _ in dataset.eval.inputs}
        self.assertFalse(train_pairs & eval_pairs)
        for split in (dataset.train, dataset.eval):
            assert_array_equal(split.weights.sum(axis=0), [0, 0, 0, len(split)])
            assert_array_equal(split.targets[:, 3], (split.inputs[:, 0] + split.inputs[:, 2]) % 7)

    def test_modular_addition_vocab(self):
        """Test that p + 2 tokens must fit the vocabulary."""
        with self.assertRaises(ConfigError):
            make_modular_addition_dataset(7, 10, seed=0, vocab_size=8)

    def test_copy_dataset(self):
        """Test the copy layout and its loss mask."""
        dataset = make_copy_dataset(alphabet=3, length=2, n=5, seed=0, eval_fraction=0.0)
        train = dataset.train
        self.assertEqual(train.inputs.shape, (5, 4))
        assert_array_equal(train.inputs[:, 2], np.full(5, 3))
        assert_array_equal(train.targets[:, 2:], train.inputs[:, :2])
        assert_array_equal(train.weights[0], [0, 0, 1, 1])
        self.assertEqual(len({tuple(row) for row in train.inputs}), 5)
        with self.assertRaises(ConfigError):
            make_copy_dataset(alphabet=2, length=2, n=5, seed=0)

    def test_text_dataset(self):
        """Test byte windows and the tail eval split."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'corpus.txt'
            path.write_bytes(bytes(range(50)))
            dataset = make_text_dataset(path, seq_len=4, eval_fraction=0.2)
            with self.assertRaises(ConfigError):
                make_text_dataset(Path(tmp) / 'missing.txt', seq_len=4)
        self.assertEqual(len(dataset.train) + len(dataset.eval), 10)
        assert_array_equal(dataset.train.inputs[1], [5, 6, 7, 8])
        assert_array_equal(dataset.train.targets[1], [6, 7, 8, 9])

    def test_build_checks_model(self):
        """Test that the model must hold the task's vocabulary and length."""
        spec = DatasetSpec(kind='copy', alphabet=3, length=4, n_examples=10)
        with self.assertRaises(ConfigError):
            build_dataset(spec, tiny_model(seq_len=4))
        self.assertEqual(build_dataset(spec, tiny_model(seq_len=8)).train.seq_len, 8)
        with self.assertRaises(ConfigError):
            build_dataset(DatasetSpec(kind='modular_add', p=11), tiny_model())

    def test_batches(self):
        """Test sampling and in-order iteration."""
        dataset = make_modular_addition_dataset(7, 49, seed=0)
        batch = sample_batch(dataset.train, 16, np.random.default_rng(0))
        self.assertEqual(batch.inputs.shape, (16, 4))
        sizes = [len(b) for b in iter_batches(dataset.eval, 4)]
        self.assertEqual(sum(sizes), len(dataset.eval))


class TrainingLoopTest(SimpleTestCase):
    """Tests for batch_loss, evaluate and train."""

    def test_loss_mask_zeroes_other_logits(self):
        """Test that non-answer logits get exactly zero gradient."""
        model = tiny_model()
        dataset = make_modular_addition_dataset(7, 49, seed=0)
        batch = sample_batch(dataset.train, 8, np.random.default_rng(0))
        with Tape() as tape:
            loss, logits, _ = batch_loss(model, init_params(model), batch)
        tape.backward(loss)
        assert_array_equal(logits.grad[:, :3], np.zeros((8, 3, 9)))
        self.assertTrue(np.any(logits.grad[:, 3] != 0))

    def test_evaluate(self):
        """Test accuracy bounds and the empty split."""
        model = tiny_model()
        dataset = make_modular_addition_dataset(7, 49, seed=0)
        acc, loss = evaluate(model, init_params(model), dataset.eval, 4)
        self.assertTrue(0.0 <= acc <= 1.0)
        self.assertGreater(loss, 0.0)
        empty = make_modular_addition_dataset(7, 49, seed=0, eval_fraction=0.0).eval
        self.assertEqual(evaluate(model, init_params(model), empty, 4), (None, None))

    def test_records_and_profiles(self):
        """Test a record every eval_every steps and on the last step."""
        outcome = train(tiny_model(), tiny_train(total_steps=10))
        self.assertEqual([r.step for r in outcome.metrics], [4, 8, 10])
        self.assertEqual([step for step, _ in outcome.profiles], [4, 8, 10])
        self.assertEqual(len(outcome.profiles[0][1]), 3)
        self.assertEqual(outcome.status, RunStatus.CONVERGED)
        self.assertEqual(outcome.final_loss, outcome.metrics[-1].loss)
        self.assertTrue(all(0 < r.clip_factor <= 1.0 for r in outcome.metrics))

    def test_deterministic(self):
        """Test identical metrics streams for identical seeds and configs."""
        first = train(tiny_model(), tiny_train())
        second = train(tiny_model(), tiny_train())
        self.assertEqual(first.metrics, second.metrics)
        assert_array_equal(first.params.flat_values(), second.params.flat_values())

    def test_zero_learning_rate(self):
        """Test that lr = 0 leaves the parameters alone and the run converged."""
        model = tiny_model()
        initial = init_params(model).flat_values()
        outcome = train(model, tiny_train(), lr_fn=lambda step: 0.0)
        self.assertEqual(outcome.status, RunStatus.CONVERGED)
        assert_array_equal(outcome.params.flat_values(), initial)
        self.assertEqual(len({r.eval_loss for r in outcome.metrics}), 1)

    def test_non_finite_loss_diverges(self):
        """Test that an infinite weight ends the run as Diverged at step 1."""
        model = tiny_model()
        params = init_params(model)
        params['unembed'].data[0, 0] = np.inf
        outcome = train(model, tiny_train(), params=params)
        self.assertEqual(outcome.status, RunStatus.DIVERGED)
        self.assertEqual(outcome.diverged_step, 1)
        self.assertEqual(outcome.metrics, [])

    def test_huge_learning_rate_diverges(self):
        """Test that a learning rate of 10 is caught by the divergence rule."""
        outcome = train(
            tiny_model(TopologyKind.POST_NORM),
            tiny_train(total_steps=40, eval_every=1, divergence_patience=3, weight_decay=0.0),
            lr_fn=lambda step: 10.0,
        )
        self.assertEqual(outcome.status, RunStatus.DIVERGED)
        self.assertIsNotNone(outcome.diverged_step)

    def spiked_run(self, restore_step=None):
        """Inflate the unembedding after step 12, optionally restoring it later."""
        model = tiny_model()
        params = init_params(model)
        original = params['unembed'].data.copy()

        def lr_fn(step):
            if step == 12:
                params['unembed'].data = original * 1000.0
            if step == restore_step:
                params['unembed'].data = original.copy()
            return 0.0

        cfg = tiny_train(total_steps=20, spike_factor=50.0, divergence_patience=100)
        return train(model, cfg, lr_fn=lr_fn, params=params)

    def test_recovered_spike(self):
        """Test that a loss jump followed by recovery ends as SpikeDetected."""
        outcome = self.spiked_run(restore_step=14)
        self.assertEqual(outcome.status, RunStatus.SPIKE_DETECTED)
        self.assertEqual(outcome.spike_steps, [13])
        self.assertIsNone(outcome.diverged_step)

    def test_unrecovered_spike_diverges(self):
        """Test that a loss jump that never comes back down is Diverged at its onset."""
        outcome = self.spiked_run()
        self.assertEqual(outcome.status, RunStatus.DIVERGED)
        self.assertEqual(outcome.diverged_step, 13)
        self.assertEqual(outcome.spike_steps, [])
        self.assertGreater(outcome.final_loss, 10 * outcome.initial_loss)


class MetricsCsvTest(SimpleTestCase):
    """Tests for the metrics CSV writer."""

    def test_round_trip(self):
        """Test that records survive generate and parse unchanged."""
        records = [
            MetricsRecord(50, 2.1972245773362196, 5e-4, 0.731, 1.0),
            MetricsRecord(100, 1.25, 1e-3, 3.5, 0.2857142857142857, 0.4, 1.5),
        ]
        text = generate_metrics_csv(records)
        self.assertEqual(text.splitlines()[0], 'step,loss,lr,grad_norm,clip_factor,eval_acc,eval_loss')
        self.assertEqual(parse_metrics_csv(text), records)


@unittest.skipUnless(SLOW_TESTS, 'set NORMLAB_SLOW_TESTS=1 to run the characterization grid')
class CharacterizationTest(SimpleTestCase):
    """Seeded stability characterization on the committed desk recipe."""

    def run_config(self, name):
        from experiments.config import load_experiment_config

        experiment = load_experiment_config(Path(settings.BASE_DIR) / 'configs' / 'characterization' / name)
        return train(experiment.model, experiment.train)

    def test_divergence_pattern(self):
        """Test Post-Norm failing at the top lr where both Siamese kinds converge."""
        post = self.run_config('post_norm_lr1e-2.json')
        self.assertIn(post.status, (RunStatus.DIVERGED, RunStatus.SPIKE_DETECTED))
        for kind in ('siamese_canonical', 'siamese_practical'):
            outcome = self.run_config(f'{kind}_lr1e-2.json')
            self.assertEqual(outcome.status, RunStatus.CONVERGED, kind)
            self.assertLess(outcome.final_loss, outcome.initial_loss)

    def test_pre_norm_converges(self):
        """Test Pre-Norm converging over the whole grid."""
        for lr in ('1e-3', '3e-3', '1e-2'):
            self.assertEqual(self.run_config(f'pre_norm_lr{lr}.json').status, RunStatus.CONVERGED, lr)


@unittest.skipUnless(SLOW_TESTS, 'set NORMLAB_SLOW_TESTS=1 to run the ablation')
class AblationTest(SimpleTestCase):
    """Directional check of fused-input normalization and depth scaling."""

    def test_both_mechanisms_help(self):
        """Test that the full variant has the lowest eval loss on at least 2 of 3 seeds."""
        from experiments.config import load_experiment_config

        base = load_experiment_config(Path(settings.BASE_DIR) / 'configs' / 'ablation' / 'base.json')
        wins = 0
        for seed in range(3):
            losses = {}
            for fused, scaled in ((True, True), (False, True), (True, False)):
                model = dataclasses.replace(base.model, fused_input_norm=fused, depth_scaling=scaled, seed=seed)
                losses[fused, scaled] = train(model, dataclasses.replace(base.train, seed=seed)).eval_loss
            wins += losses[True, True] <= min(losses[False, True], losses[True, False])
        self.assertGreaterEqual(wins, 2)
