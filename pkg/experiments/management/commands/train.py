from django.core.management.base import BaseCommand, CommandError

from experiments.config import load_experiment_config
from experiments.runner import execute, record_run
from tensor_core.exceptions import ConfigError


class Command(BaseCommand):
    help = 'Train one experiment config and write metrics, profiles, checkpoint and manifest.'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Experiment config (JSON)')
        parser.add_argument('--out', help='Output directory, overrides the config')
        parser.add_argument('--seed-override', type=int, help='Replace the model and training seeds')

    def handle(self, *args, **options):
        try:
            experiment = load_experiment_config(options['config'], seed_override=options['seed_override'])
            if options['out']:
                experiment = experiment.with_output_dir(options['out'])
            result = execute(experiment)
        except ConfigError as exc:
            raise CommandError(str(exc), returncode=1)
        record_run(result)

        outcome = result.outcome
        self.stdout.write(
            f"{experiment.name}: {outcome.status.value} "
            f"final_loss={outcome.final_loss:.6g} eval_acc={outcome.eval_acc} -> {result.output_dir}"
        )
        if result.exit_code:
            raise CommandError(
                f"run {experiment.name} ended with status {outcome.status.value}", returncode=result.exit_code
            )
