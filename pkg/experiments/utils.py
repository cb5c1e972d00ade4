import csv
import io
import math

import numpy as np

from blocks.checkpoint import load_params
from tensor_core.exceptions import ConfigError

COMPARISON_HEADER = ['topology', 'lr', 'status', 'final_loss', 'eval_acc']
ABLATION_HEADER = ['topology', 'fused_input_norm', 'depth_scaling', 'status', 'final_loss', 'eval_loss']


def _cell(value):
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return str(value)


def _write_rows(header, rows):
    output = io.StringIO()
    writer = csv.writer(output, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(value) for value in row])
    return output.getvalue()


def generate_comparison_csv(results):
    """
    Generate comparison CSV text, one row per RunResult. Failed runs get
    status ``failed`` and empty outcome cells.
    """
    return _write_rows(COMPARISON_HEADER, [
        (
            r.experiment.model.topology.value,
            r.experiment.train.peak_lr,
            r.status,
            r.outcome_value('final_loss'),
            r.outcome_value('eval_acc'),
        )
        for r in results
    ])


def generate_ablation_csv(results):
    """
    Generate ablation CSV text, one row per RunResult.
    """
    return _write_rows(ABLATION_HEADER, [
        (
            r.experiment.model.topology.value,
            r.experiment.model.fused_input_norm,
            r.experiment.model.depth_scaling,
            r.status,
            r.outcome_value('final_loss'),
            r.outcome_value('eval_loss'),
        )
        for r in results
    ])


def parse_result_csv(csv_file):
    """Parse a comparison or ablation CSV into a list of dicts of strings."""
    if isinstance(csv_file, str):
        csv_file = io.StringIO(csv_file)
    return list(csv.DictReader(csv_file))


def load_checkpoint(path):
    """
    Load a checkpoint for an analysis command.

    Raises:
        ConfigError: If the file is missing or unreadable.
    """
    try:
        params = load_params(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint {path} does not exist") from None
    if params.config is None:
        raise ConfigError(f"checkpoint {path} carries no model config")
    return params


def sample_tokens(config, batch=1, length=None, seed=0):
    """Deterministic random tokens for single-batch analysis passes."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, config.vocab_size, size=(batch, length or config.seq_len))
