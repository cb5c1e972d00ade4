from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from analysis.jacobian import block_jacobian_assembled, jacobian_bruteforce
from analysis.spectral import ln_jacobian_spectrum
from analysis.utils import generate_jacobian_json
from blocks.initialization import init_params
from blocks.layers import block_params
from experiments.config import load_experiment_config
from experiments.utils import sample_tokens
from tensor_core.exceptions import ConfigError, DivergenceError
from topologies.wiring import layer_norm_params, model_forward

MAX_JACOBIAN_DIM = 16


def layer_jacobians(config, params, tokens):
    """
    Assembled and brute-force transition matrices of every sub-layer at the
    states a single-token forward pass visits.

    Returns:
        ``(entries, trace)`` with one dict per sub-layer.
    """
    _, trace = model_forward(config, params, tokens)
    entries = []
    for state in trace[:-1]:
        i = state.layer_index
        block = block_params(params, i)
        ln_params = layer_norm_params(params, i)
        assembled = block_jacobian_assembled(config.topology, state, block, ln_params, i, config).matrix
        brute = jacobian_bruteforce(config.topology, state, block, ln_params, i, config)
        entries.append({
            'layer': i,
            'assembled': assembled,
            'bruteforce': brute,
            'max_abs_diff': float(np.max(np.abs(assembled - brute))) if assembled.size else 0.0,
        })
    return entries, trace


class Command(BaseCommand):
    help = 'Compare assembled and brute-force block Jacobians per sub-layer and dump them as JSON.'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Experiment config (JSON); the model section is used')
        parser.add_argument('--out', help='Output directory, overrides the config')
        parser.add_argument('--seed-override', type=int, help='Replace the model seed')

    def handle(self, *args, **options):
        try:
            experiment = load_experiment_config(options['config'], seed_override=options['seed_override'])
        except ConfigError as exc:
            raise CommandError(str(exc), returncode=1)
        config = experiment.model
        if config.d_model > MAX_JACOBIAN_DIM:
            raise CommandError(f'block Jacobians need d_model <= {MAX_JACOBIAN_DIM}', returncode=1)

        params = init_params(config)
        tokens = sample_tokens(config, batch=1, length=1, seed=config.seed)
        try:
            entries, trace = layer_jacobians(config, params, tokens)
        except DivergenceError as exc:
            raise CommandError(f'forward pass diverged: {exc}', returncode=2)

        tolerance = settings.NORMLAB_JACOBIAN_TOLERANCE
        worst = 0.0
        for entry in entries:
            worst = max(worst, entry['max_abs_diff'])
            self.stdout.write(f"layer {entry['layer']:>3}  max_abs_diff={entry['max_abs_diff']:.3e}")

        metadata = {
            'kind': config.topology.value,
            'd': config.d_model,
            'seed': config.seed,
            'depth_scaling': config.depth_scaling,
            'fused_input_norm': config.fused_input_norm,
            'n_sublayers': config.n_sublayers,
            'tolerance': tolerance,
            'ln_spectrum': [[i, sigma] for i, sigma in ln_jacobian_spectrum(trace, params, config)],
        }
        out_dir = Path(options['out'] or experiment.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        target = out_dir / 'jacobian.json'
        target.write_text(generate_jacobian_json(metadata, entries), encoding='utf-8')
        self.stdout.write(f'Wrote {target}')

        if worst > tolerance:
            raise CommandError(f'assembled and brute-force Jacobians differ by {worst:.3e}', returncode=1)
