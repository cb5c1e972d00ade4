import json
import tempfile
from io import StringIO
from pathlib import Path

from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings

from analysis.utils import parse_profile_csv
from blocks.checkpoint import save_params
from blocks.config import ModelConfig
from blocks.initialization import init_params
from experiments.config import load_experiment_config, parse_experiment_config
from experiments.forms import DatasetForm, ModelConfigForm, TrainConfigForm
from experiments.management.commands.ablate import ABLATION_GRID
from experiments.management.commands.gradcheck import Command as GradcheckCommand, gradcheck_config
from experiments.models import TrainingRun
from experiments.runner import EXIT_CODES, RunResult
from experiments.utils import load_checkpoint, parse_result_csv
from tensor_core.exceptions import ConfigError
from topologies.kinds import TopologyKind
from training.loop import RunOutcome, RunStatus
from training.utils import parse_metrics_csv

EXAMPLES_DIR = Path(settings.BASE_DIR) / 'configs' / 'examples'


def quick_document(**model_overrides):
    document = json.loads((EXAMPLES_DIR / 'quick.json').read_text(encoding='utf-8'))
    document['model'].update(model_overrides)
    return document


class WorkspaceMixin:
    """Temporary directory used as the run output root."""

    def setUp(self):
        """Set up a temporary output directory."""
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)
        override = override_settings(NORMLAB_OUTPUT_DIR=self.tmp / 'runs')
        override.enable()
        self.addCleanup(override.disable)

    def write_config(self, document, name='experiment.json'):
        path = self.tmp / name
        path.write_text(document if isinstance(document, str) else json.dumps(document), encoding='utf-8')
        return path

    def write_checkpoint(self, kind, name='checkpoint.bin'):
        model = dict(quick_document()['model'], topology=kind.value, n_layers=2)
        if not kind.siamese:
            model.update(fused_input_norm=False)
        if not kind.uses_depth_scaling:
            model.update(depth_scaling=False)
        path = self.tmp / name
        save_params(init_params(ModelConfig(**model)), path)
        return path


class ConfigFormTest(SimpleTestCase):
    """Tests for the config section forms."""

    def test_model_form_valid(self):
        """Test that a complete model section validates and keeps only given keys."""
        form = ModelConfigForm(quick_document()['model'])
        self.assertTrue(form.is_valid(), form.errors)
        data = form.section_data()
        self.assertEqual(data['topology'], 'siamese_practical')
        self.assertNotIn('qk_norm', data)

    def test_model_form_heads(self):
        """Test that n_heads must divide d_model."""
        form = ModelConfigForm(dict(quick_document()['model'], d_model=6, n_heads=4))
        self.assertFalse(form.is_valid())

    def test_unknown_keys(self):
        """Test that undeclared keys are errors."""
        form = ModelConfigForm(dict(quick_document()['model'], dropout=0.1))
        self.assertFalse(form.is_valid())
        self.assertIn('dropout', str(form.errors))

    def test_train_form_checks(self):
        """Test peak_lr, betas, warmup and dataset validation."""
        base = quick_document()['train']
        for overrides in ({'peak_lr': 0}, {'betas': [0.9]}, {'warmup_steps': 10},
                          {'dataset': {'kind': 'modular_add', 'modulus': 7}}, {'dataset': [1, 2]}):
            form = TrainConfigForm(dict(base, **overrides))
            self.assertFalse(form.is_valid(), overrides)

    def test_train_form_data(self):
        """Test the cleaned betas and dataset values."""
        form = TrainConfigForm(dict(quick_document()['train'], betas=[0.8, 0.9]))
        self.assertTrue(form.is_valid(), form.errors)
        data = form.section_data()
        self.assertEqual(data['betas'], (0.8, 0.9))
        self.assertEqual(data['dataset'], {'kind': 'modular_add', 'p': 7, 'n_examples': 49})

    def test_dataset_form(self):
        """Test the dataset kinds."""
        self.assertTrue(DatasetForm({'kind': 'copy', 'alphabet': 4, 'length': 3}).is_valid())
        self.assertFalse(DatasetForm({'kind': 'wikitext'}).is_valid())


class ExperimentConfigTest(WorkspaceMixin, SimpleTestCase):
    """Tests for loading experiment configs."""

    def test_load(self):
        """Test a valid config with defaults applied."""
        experiment = load_experiment_config(self.write_config(quick_document()))
        self.assertEqual(experiment.name, 'quick')
        self.assertEqual(experiment.model.topology, TopologyKind.SIAMESE_PRACTICAL)
        self.assertEqual(experiment.train.dataset.p, 7)
        self.assertEqual(experiment.output_dir, self.tmp / 'runs' / 'quick')
        self.assertEqual(experiment.train.divergence_patience, settings.NORMLAB_DIVERGENCE_PATIENCE)

    @override_settings(NORMLAB_DIVERGENCE_PATIENCE=3, NORMLAB_SPIKE_WINDOW=20)
    def test_stability_defaults_from_settings(self):
        """Test that settings supply the stability-rule defaults."""
        experiment = parse_experiment_config(quick_document())
        self.assertEqual((experiment.train.divergence_patience, experiment.train.spike_window), (3, 20))

    def test_seed_override(self):
        """Test that the override replaces both seeds."""
        experiment = parse_experiment_config(quick_document(), seed_override=7)
        self.assertEqual((experiment.model.seed, experiment.train.seed), (7, 7))

    def test_malformed_json(self):
        """Test that a JSON error reports its line and column."""
        path = self.write_config('{\n  "model": {,\n}')
        with self.assertRaisesMessage(ConfigError, 'line 2, column'):
            load_experiment_config(path)

    def test_rejections(self):
        """Test unknown top-level keys, missing sections and missing files."""
        with self.assertRaisesMessage(ConfigError, 'unknown top-level keys: optimizer'):
            parse_experiment_config(dict(quick_document(), optimizer='sgd'))
        with self.assertRaises(ConfigError):
            parse_experiment_config({'model': quick_document()['model']})
        with self.assertRaises(ConfigError):
            load_experiment_config(self.tmp / 'missing.json')

    def test_round_trip(self):
        """Test that to_dict feeds back into the parser."""
        experiment = parse_experiment_config(quick_document())
        self.assertEqual(parse_experiment_config(experiment.to_dict()), experiment)


class TrainCommandTest(WorkspaceMixin, TestCase):
    """Tests for the train command."""

    def test_quick_run(self):
        """Test artifacts, the database row and a zero exit."""
        out = self.tmp / 'quick'
        call_command('train', config=str(EXAMPLES_DIR / 'quick.json'), out=str(out), stdout=StringIO())

        records = parse_metrics_csv((out / 'metrics.csv').read_text(encoding='utf-8'))
        self.assertEqual([r.step for r in records], [5, 10])
        self.assertTrue((out / 'profiles' / 'step_000005.csv').exists())
        self.assertTrue((out / 'profiles' / 'step_000010.csv').exists())
        self.assertEqual(len(list((out / 'profiles').iterdir())), 2)
        self.assertEqual(load_checkpoint(out / 'checkpoint.bin').config.topology, TopologyKind.SIAMESE_PRACTICAL)

        manifest = json.loads((out / 'manifest.json').read_text(encoding='utf-8'))
        self.assertEqual(manifest['status'], 'converged')
        self.assertEqual(manifest['config']['model']['d_model'], 8)
        self.assertIn('git_describe', manifest)

        run = TrainingRun.objects.get()
        self.assertEqual(run.status, 'converged')
        self.assertEqual(run.output_dir, str(out))
        self.assertEqual(str(run), 'quick (siamese_practical @ 0.001): converged')

    def test_rerun_clears_stale_profiles(self):
        """Test that a rerun into the same directory drops profiles of steps it did not record."""
        out = self.tmp / 'quick'
        (out / 'profiles').mkdir(parents=True)
        (out / 'profiles' / 'step_000040.csv').write_text('stale\n', encoding='utf-8')
        call_command('train', config=str(EXAMPLES_DIR / 'quick.json'), out=str(out), stdout=StringIO())
        names = sorted(path.name for path in (out / 'profiles').iterdir())
        self.assertEqual(names, ['step_000005.csv', 'step_000010.csv'])

    def test_config_errors_exit_one(self):
        """Test malformed and invalid configs."""
        for text in ('{"model": ', json.dumps(quick_document(dropout=0.5))):
            with self.assertRaises(CommandError) as ctx:
                call_command('train', config=str(self.write_config(text)), stdout=StringIO())
            self.assertEqual(ctx.exception.returncode, 1)
        self.assertFalse(TrainingRun.objects.exists())


class CompareCommandTest(WorkspaceMixin, TestCase):
    """Tests for the compare command."""

    def test_empty_list(self):
        """Test that no configs is a usage error."""
        with self.assertRaises(CommandError) as ctx:
            call_command('compare', stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 1)

    def test_identical_configs(self):
        """Test that two identical configs give identical rows in separate directories."""
        first = self.write_config(quick_document(), 'a.json')
        second = self.write_config(quick_document(), 'b.json')
        call_command('compare', str(first), str(second), out=str(self.tmp), jobs=2, stdout=StringIO())

        text = (self.tmp / 'comparison.csv').read_text(encoding='utf-8')
        self.assertEqual(text.splitlines()[0], 'topology,lr,status,final_loss,eval_acc')
        rows = parse_result_csv(text)
        self.assertEqual(len(rows), 2)
        self.assertEqual(rows[0], rows[1])
        self.assertEqual(rows[0]['status'], 'converged')
        dirs = sorted(run.output_dir for run in TrainingRun.objects.all())
        self.assertEqual(len(set(dirs)), 2)

    def test_failed_run_keeps_the_others(self):
        """Test that a run raising mid-way is recorded as failed and the rest still land."""
        good = self.write_config(quick_document(), 'good.json')
        document = quick_document(vocab_size=256)
        document['train']['dataset'] = {'kind': 'text_file', 'path': str(self.tmp / 'missing.txt')}
        document['output_dir'] = str(self.tmp / 'broken')
        bad = self.write_config(document, 'bad.json')

        with self.assertRaises(CommandError) as ctx:
            call_command('compare', str(bad), str(good), out=str(self.tmp), jobs=2, stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 1)

        rows = parse_result_csv((self.tmp / 'comparison.csv').read_text(encoding='utf-8'))
        self.assertEqual([r['status'] for r in rows], ['failed', 'converged'])
        self.assertEqual(rows[0]['final_loss'], '')
        self.assertNotEqual(rows[1]['final_loss'], '')

        manifest = json.loads((self.tmp / 'broken' / 'manifest.json').read_text(encoding='utf-8'))
        self.assertEqual(manifest['status'], 'failed')
        self.assertIn('missing.txt', manifest['message'])
        self.assertTrue((self.tmp / 'runs' / 'quick' / 'manifest.json').exists())
        self.assertEqual(sorted(TrainingRun.objects.values_list('status', flat=True)), ['converged', 'failed'])


class GradcheckCommandTest(SimpleTestCase):
    """Tests for the gradcheck command."""

    options = dict(kinds=['pre_norm', 'siamese_practical'], seeds=1, max_coords=40)

    def test_passes(self):
        """Test that correct backward rules pass."""
        out = StringIO()
        call_command('gradcheck', stdout=out, **self.options)
        self.assertIn('siamese_practical', out.getvalue())

    def test_corrupted_rule_fails(self):
        """Test that a scaled matmul backward rule is caught."""
        with self.assertRaises(CommandError) as ctx:
            call_command('gradcheck', corrupt_rule='matmul', stdout=StringIO(), **self.options)
        self.assertEqual(ctx.exception.returncode, 1)

    def test_checks_every_coordinate_by_default(self):
        """Test the unsampled default on a small model."""
        parser = GradcheckCommand().create_parser('manage.py', 'gradcheck')
        self.assertIsNone(parser.parse_args([]).max_coords)
        out = StringIO()
        call_command('gradcheck', kinds=['pre_norm'], d_model=4, n_layers=1, seq_len=2, seeds=1, stdout=out)
        self.assertIn('pre_norm', out.getvalue())

    def test_config(self):
        """Test that optional paths follow the kind."""
        config = gradcheck_config(TopologyKind.SIAMESE_CANONICAL, 8, 2, 4, 11, 2, 0)
        self.assertTrue(config.fused_input_norm and config.depth_scaling)
        config = gradcheck_config(TopologyKind.POST_NORM, 8, 2, 4, 11, 2, 0)
        self.assertFalse(config.fused_input_norm or config.depth_scaling)


class JacobianCommandTest(WorkspaceMixin, SimpleTestCase):
    """Tests for the jacobian command."""

    def test_dump(self):
        """Test the JSON dump of a small canonical model."""
        call_command('jacobian', config=str(EXAMPLES_DIR / 'jacobian.json'), out=str(self.tmp), stdout=StringIO())
        payload = json.loads((self.tmp / 'jacobian.json').read_text(encoding='utf-8'))
        self.assertEqual(payload['metadata']['kind'], 'siamese_canonical')
        self.assertTrue(payload['metadata']['depth_scaling'])
        self.assertEqual(len(payload['layers']), 4)
        self.assertEqual(len(payload['layers'][0]['assembled']), 8)
        self.assertTrue(all(entry['max_abs_diff'] <= 1e-6 for entry in payload['layers']))
        self.assertEqual([i for i, _ in payload['ln_spectrum']], [0, 1, 2, 3])

    def test_too_wide(self):
        """Test that d_model above 16 is refused."""
        path = self.write_config(quick_document(d_model=32, n_heads=2))
        with self.assertRaises(CommandError) as ctx:
            call_command('jacobian', config=str(path), stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 1)


class ProfileCommandTest(WorkspaceMixin, SimpleTestCase):
    """Tests for the profile command."""

    def run_profile(self, kind):
        checkpoint = self.write_checkpoint(kind)
        call_command('profile', checkpoint=str(checkpoint), config=str(EXAMPLES_DIR / 'quick.json'),
                     out=str(self.tmp), stdout=StringIO())
        return parse_profile_csv((self.tmp / 'profile.csv').read_text(encoding='utf-8'))

    def test_post_norm_magnitudes(self):
        """Test sqrt(d) magnitudes after every LN and no Y or ratio columns."""
        rows = self.run_profile(TopologyKind.POST_NORM)
        self.assertEqual(len(rows), 5)
        for row in rows[1:]:
            self.assertAlmostEqual(row.magnitude_X, 8 ** 0.5, delta=1e-3)
            self.assertIsNone(row.magnitude_Y)
            self.assertIsNone(row.ratio_X)
        self.assertGreater(rows[0].grad_norm_block, 0.0)

    def test_siamese_ratios(self):
        """Test ratio columns at init."""
        rows = self.run_profile(TopologyKind.SIAMESE_CANONICAL)
        self.assertEqual([(r.ratio_X, r.ratio_Y) for r in rows[:-1]], [(0.5, 0.5)] * 4)
        self.assertIsNotNone(rows[0].magnitude_Y)

    def test_missing_checkpoint(self):
        """Test that a missing checkpoint exits 1."""
        with self.assertRaises(CommandError) as ctx:
            call_command('profile', checkpoint=str(self.tmp / 'none.bin'),
                         config=str(EXAMPLES_DIR / 'quick.json'), stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 1)


class LensCommandTest(WorkspaceMixin, SimpleTestCase):
    """Tests for the lens command."""

    def test_siamese(self):
        """Test the printed statistics of a fresh SiameseNorm model."""
        out = StringIO()
        checkpoint = self.write_checkpoint(TopologyKind.SIAMESE_PRACTICAL)
        call_command('lens', checkpoint=str(checkpoint), config=str(EXAMPLES_DIR / 'quick.json'), stdout=out)
        summary = json.loads(out.getvalue())
        for key in ('match_X', 'match_Y', 'divergent_align_X', 'divergent_align_Y', 'fused_accuracy'):
            self.assertTrue(0.0 <= summary[key] <= 1.0, key)
        self.assertEqual(summary['fusion_weights'], {'x': 1.0, 'y': 1.0})
        self.assertEqual(summary['positions'], 10)

    def test_single_stream(self):
        """Test that a single-stream checkpoint exits 1."""
        checkpoint = self.write_checkpoint(TopologyKind.PRE_NORM)
        with self.assertRaises(CommandError) as ctx:
            call_command('lens', checkpoint=str(checkpoint), config=str(EXAMPLES_DIR / 'quick.json'),
                         stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 1)


class AblateCommandTest(WorkspaceMixin, TestCase):
    """Tests for the ablate command."""

    def test_grid(self):
        """Test one row per grid entry and one recorded run each."""
        call_command('ablate', config=str(EXAMPLES_DIR / 'quick.json'), out=str(self.tmp), stdout=StringIO())
        rows = parse_result_csv((self.tmp / 'ablation.csv').read_text(encoding='utf-8'))
        self.assertEqual(len(rows), len(ABLATION_GRID))
        self.assertEqual(
            [(r['topology'], r['fused_input_norm'], r['depth_scaling']) for r in rows[:4]],
            [('siamese_practical', 'true', 'true'), ('siamese_practical', 'false', 'true'),
             ('siamese_practical', 'true', 'false'), ('siamese_practical', 'false', 'false')],
        )
        self.assertEqual(TrainingRun.objects.count(), len(ABLATION_GRID))


class RunnerTest(SimpleTestCase):
    """Tests for run results."""

    def test_exit_codes(self):
        """Test the status to exit code mapping."""
        self.assertEqual(EXIT_CODES, {RunStatus.CONVERGED: 0, RunStatus.DIVERGED: 2, RunStatus.SPIKE_DETECTED: 3})
        result = RunResult(experiment=None, outcome=RunOutcome(RunStatus.SPIKE_DETECTED, 1.0), output_dir=Path('.'))
        self.assertEqual(result.exit_code, 3)
        failed = RunResult(experiment=None, outcome=None, output_dir=Path('.'), error='ConfigError: boom')
        self.assertEqual((failed.exit_code, failed.status), (1, 'failed'))
        self.assertIsNone(failed.outcome_value('final_loss'))
