from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from experiments.config import load_experiment_config
from experiments.runner import execute_many
from experiments.utils import generate_comparison_csv
from tensor_core.exceptions import ConfigError


class Command(BaseCommand):
    help = 'Run several experiment configs and write comparison.csv with one row per run.'

    def add_arguments(self, parser):
        parser.add_argument('configs', nargs='*', help='Experiment configs (JSON)')
        parser.add_argument('--out', help='Directory for comparison.csv')
        parser.add_argument('--jobs', type=int, default=1, help='Runs executed concurrently')
        parser.add_argument('--seed-override', type=int, help='Replace the model and training seeds')

    def handle(self, *args, **options):
        paths = options['configs']
        if not paths:
            raise CommandError('compare needs at least one config path', returncode=1)
        if options['jobs'] < 1:
            raise CommandError('--jobs must be >= 1', returncode=1)

        try:
            experiments = [load_experiment_config(p, seed_override=options['seed_override']) for p in paths]
        except ConfigError as exc:
            raise CommandError(str(exc), returncode=1)

        out_dir = Path(options['out'] or settings.NORMLAB_OUTPUT_DIR)
        # Per-run output directories must be disjoint.
        seen = set()
        for index, experiment in enumerate(experiments):
            if str(experiment.output_dir) in seen:
                experiment = experiments[index] = experiment.with_output_dir(f'{experiment.output_dir}-{index}')
            seen.add(str(experiment.output_dir))

        results = execute_many(experiments, jobs=options['jobs'])

        out_dir.mkdir(parents=True, exist_ok=True)
        target = out_dir / 'comparison.csv'
        target.write_text(generate_comparison_csv(results), encoding='utf-8', newline='')
        for result in results:
            detail = result.error if result.failed else f"final_loss={result.outcome.final_loss:.6g}"
            self.stdout.write(f"{result.experiment.name}: {result.status} {detail}")
        self.stdout.write(self.style.SUCCESS(f'Wrote {target}'))
        failed = [r.experiment.name for r in results if r.failed]
        if failed:
            raise CommandError(f"runs failed: {', '.join(failed)}", returncode=1)
