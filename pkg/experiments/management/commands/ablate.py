from dataclasses import replace
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from experiments.config import load_experiment_config
from experiments.runner import execute_many
from experiments.utils import generate_ablation_csv
from tensor_core.exceptions import ConfigError
from topologies.kinds import TopologyKind

# (topology, fused_input_norm, depth_scaling)
ABLATION_GRID = (
    (TopologyKind.SIAMESE_PRACTICAL, True, True),
    (TopologyKind.SIAMESE_PRACTICAL, False, True),
    (TopologyKind.SIAMESE_PRACTICAL, True, False),
    (TopologyKind.SIAMESE_PRACTICAL, False, False),
    (TopologyKind.HYBRID_NORM, False, False),
    (TopologyKind.HYBRID_NORM, False, True),
    (TopologyKind.HYBRID_RESIDUAL, False, False),
)


def ablation_experiments(base, out_dir):
    """One experiment per grid entry, sharing everything but the wiring flags."""
    experiments = []
    for kind, fused, scaled in ABLATION_GRID:
        tag = f"{kind.value}{'-fused' if fused else ''}{'-scaled' if scaled else ''}"
        model = replace(base.model, topology=kind, fused_input_norm=fused, depth_scaling=scaled)
        experiments.append(replace(base, name=f'{base.name}-{tag}', model=model, output_dir=out_dir / tag))
    return experiments


class Command(BaseCommand):
    help = 'Run the normalized-input x depth-scaling ablation grid and write ablation.csv.'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Base experiment config (JSON)')
        parser.add_argument('--out', help='Output directory, overrides the config')
        parser.add_argument('--jobs', type=int, default=1)
        parser.add_argument('--seed-override', type=int, help='Replace the model and training seeds')

    def handle(self, *args, **options):
        if options['jobs'] < 1:
            raise CommandError('--jobs must be >= 1', returncode=1)
        try:
            base = load_experiment_config(options['config'], seed_override=options['seed_override'])
            out_dir = Path(options['out'] or base.output_dir)
        except ConfigError as exc:
            raise CommandError(str(exc), returncode=1)
        results = execute_many(ablation_experiments(base, out_dir), jobs=options['jobs'])

        out_dir.mkdir(parents=True, exist_ok=True)
        target = out_dir / 'ablation.csv'
        target.write_text(generate_ablation_csv(results), encoding='utf-8', newline='')
        for result in results:
            model = result.experiment.model
            self.stdout.write(
                f"{model.topology.value:<18} fused={model.fused_input_norm!s:<5} scaled={model.depth_scaling!s:<5} "
                f"{result.status} eval_loss={result.outcome_value('eval_loss')}"
            )
        self.stdout.write(self.style.SUCCESS(f'Wrote {target}'))
        failed = [r.experiment.name for r in results if r.failed]
        if failed:
            raise CommandError(f"runs failed: {', '.join(failed)}", returncode=1)
