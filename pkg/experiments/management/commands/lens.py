import json

import numpy as np
from django.core.management.base import BaseCommand, CommandError

from analysis.lens import logit_lens_match
from analysis.profiles import fusion_weights
from experiments.config import load_experiment_config
from experiments.utils import load_checkpoint
from tensor_core.exceptions import ConfigError, ContractError, DivergenceError
from topologies.wiring import model_forward
from training.datasets import build_dataset

LENS_EXAMPLES = 512


class Command(BaseCommand):
    help = 'Logit-lens match statistics of both streams on the eval split, printed as JSON.'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--config', required=True, help='Experiment config (JSON); supplies the data')

    def handle(self, *args, **options):
        try:
            experiment = load_experiment_config(options['config'])
            params = load_checkpoint(options['checkpoint'])
            config = params.config
            dataset = build_dataset(experiment.train.dataset, config)
        except ConfigError as exc:
            raise CommandError(str(exc), returncode=1)
        if not config.topology.two_stream:
            raise CommandError(f'{config.topology.value} has a single stream; the lens needs two', returncode=1)

        split = dataset.eval if len(dataset.eval) else dataset.train
        split = split.take(slice(0, LENS_EXAMPLES))
        try:
            logits, trace = model_forward(config, params, split.inputs)
            result = logit_lens_match(
                (trace[-1].X, trace[-1].Y), logits, None, params['unembed'], split.inputs,
                mask=split.weights > 0, eps=config.norm_eps,
            )
        except DivergenceError as exc:
            raise CommandError(f'forward pass diverged: {exc}', returncode=2)
        except ContractError as exc:
            raise CommandError(str(exc), returncode=1)

        summary = {'topology': config.topology.value, **result.to_dict()}
        if config.topology.siamese:
            m_x, m_y = fusion_weights(params)
            summary['fusion_weights'] = {'x': m_x, 'y': m_y}
        summary['fused_accuracy'] = float(np.mean(
            (np.argmax(logits.data, axis=-1) == split.targets)[split.weights > 0]
        ))
        self.stdout.write(json.dumps(summary, indent=2))
