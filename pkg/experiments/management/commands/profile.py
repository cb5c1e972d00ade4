from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from analysis.profiles import build_profile
from analysis.utils import generate_profile_csv
from experiments.config import load_experiment_config
from experiments.utils import load_checkpoint
from tensor_core.exceptions import ConfigError, DivergenceError
from tensor_core.tensor import Tape
from training.datasets import build_dataset, iter_batches
from training.loop import batch_loss


def fixed_batch(dataset, batch_size):
    """First ``batch_size`` eval examples, or training examples without an eval split."""
    split = dataset.eval if len(dataset.eval) else dataset.train
    return next(iter_batches(split, batch_size))


class Command(BaseCommand):
    help = 'Load a checkpoint, run one forward/backward pass on a fixed batch and write profile.csv.'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--config', required=True, help='Experiment config (JSON); supplies the data')
        parser.add_argument('--out', help='Output directory, overrides the config')

    def handle(self, *args, **options):
        try:
            experiment = load_experiment_config(options['config'])
            params = load_checkpoint(options['checkpoint'])
            model_cfg = params.config
            batch = fixed_batch(build_dataset(experiment.train.dataset, model_cfg), experiment.train.batch_size)
        except ConfigError as exc:
            raise CommandError(str(exc), returncode=1)

        params.zero_grad()
        try:
            with Tape() as tape:
                loss, _, trace = batch_loss(model_cfg, params, batch)
            tape.backward(loss)
        except DivergenceError as exc:
            raise CommandError(f'forward pass diverged: {exc}', returncode=2)

        rows = build_profile(trace, params)
        out_dir = Path(options['out'] or experiment.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        target = out_dir / 'profile.csv'
        target.write_text(generate_profile_csv(rows), encoding='utf-8', newline='')
        self.stdout.write(f'loss={loss.item():.6g}; wrote {target}')
