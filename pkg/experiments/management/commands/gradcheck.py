import argparse
import contextlib

import numpy as np
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from blocks.config import ModelConfig
from blocks.initialization import init_params
from tensor_core import ops
from tensor_core.exceptions import ConfigError
from tensor_core.gradcheck import finite_diff_check, param_objective
from topologies.kinds import TopologyKind
from training.datasets import Split
from training.loop import batch_loss


def gradcheck_config(kind, d_model, n_layers, seq_len, vocab_size, n_heads, seed, qk_norm=False):
    """Model config used by the suite: every optional path of ``kind`` switched on."""
    return ModelConfig(
        n_layers=n_layers,
        d_model=d_model,
        n_heads=n_heads,
        vocab_size=vocab_size,
        seq_len=seq_len,
        topology=kind,
        fused_input_norm=kind.siamese,
        depth_scaling=kind.uses_depth_scaling,
        qk_norm=qk_norm,
        seed=seed,
    )


def max_relative_error(config, max_coords=None, h=1e-5):
    """
    Largest relative error between tape gradients and central differences of
    the full-model loss on a random batch.
    """
    rng = np.random.default_rng(config.seed + 1000)
    inputs = rng.integers(0, config.vocab_size, size=(2, config.seq_len))
    targets = rng.integers(0, config.vocab_size, size=(2, config.seq_len))
    batch = Split(inputs, targets, np.ones(inputs.shape))
    params = init_params(config).copy()
    objective = param_objective(params, lambda p: batch_loss(config, p, batch)[0])
    start = params.flat_values()
    coords = None
    if max_coords is not None and max_coords < start.size:
        coords = np.sort(rng.choice(start.size, size=max_coords, replace=False))
    return finite_diff_check(objective, start, h=h, coords=coords)


class Command(BaseCommand):
    help = 'Finite-difference gradient check of the full model for every topology kind.'

    def add_arguments(self, parser):
        parser.add_argument('--d-model', type=int, default=8)
        parser.add_argument('--n-layers', type=int, default=2)
        parser.add_argument('--seq-len', type=int, default=4)
        parser.add_argument('--vocab-size', type=int, default=11)
        parser.add_argument('--n-heads', type=int, help='Defaults to 2 when d_model is even, else 1')
        parser.add_argument('--seeds', type=int, default=5)
        parser.add_argument('--max-coords', type=int,
                            help='Check a random subsample of this many coordinates per seed instead of all')
        parser.add_argument('--qk-norm', action='store_true')
        parser.add_argument('--kinds', nargs='*', choices=[k.value for k in TopologyKind])
        parser.add_argument('--corrupt-rule', help=argparse.SUPPRESS)

    def handle(self, *args, **options):
        d_model = options['d_model']
        n_heads = options['n_heads'] or (2 if d_model % 2 == 0 else 1)
        kinds = [TopologyKind(k) for k in options['kinds']] if options['kinds'] else list(TopologyKind)
        max_coords = options['max_coords'] or None
        tolerance = settings.NORMLAB_GRADCHECK_TOLERANCE

        fault = ops.inject_gradient_fault(options['corrupt_rule']) if options['corrupt_rule'] else contextlib.nullcontext()
        failed = []
        with fault:
            for kind in kinds:
                worst = 0.0
                for seed in range(options['seeds']):
                    try:
                        config = gradcheck_config(
                            kind, d_model, options['n_layers'], options['seq_len'],
                            options['vocab_size'], n_heads, seed, options['qk_norm'],
                        )
                    except ConfigError as exc:
                        raise CommandError(str(exc), returncode=1)
                    worst = max(worst, max_relative_error(config, max_coords))
                ok = worst <= tolerance
                if not ok:
                    failed.append(kind.value)
                style = self.style.SUCCESS if ok else self.style.ERROR
                self.stdout.write(style(f'{kind.value:<18} max_rel_err={worst:.3e}'))

        if failed:
            raise CommandError(f"gradient check above {tolerance:g} for: {', '.join(failed)}", returncode=1)
