"""
Loading experiment config files.

An experiment file is a JSON object with the sections ``model`` and
``train`` and the optional keys ``name`` and ``output_dir``. Anything else
is rejected before a single number is computed.
"""
import json
from dataclasses import dataclass, replace
from pathlib import Path

from django.conf import settings

from blocks.config import ModelConfig
from tensor_core.exceptions import ConfigError
from training.config import DatasetSpec, TrainConfig

from .forms import ModelConfigForm, TrainConfigForm

TOP_LEVEL_KEYS = {'name', 'model', 'train', 'output_dir'}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model: ModelConfig
    train: TrainConfig
    output_dir: Path

    def to_dict(self):
        return {
            'name': self.name,
            'model': self.model.to_dict(),
            'train': self.train.to_dict(),
            'output_dir': str(self.output_dir),
        }

    def with_output_dir(self, output_dir):
        return replace(self, output_dir=Path(output_dir))


def _form_errors(section, form):
    messages = []
    for field, errors in form.errors.items():
        label = section if field == '__all__' else f'{section}.{field}'
        messages.extend(f'{label}: {error}' for error in errors)
    return '; '.join(messages)


def _stability_defaults():
    return {
        'divergence_factor': settings.NORMLAB_DIVERGENCE_FACTOR,
        'divergence_patience': settings.NORMLAB_DIVERGENCE_PATIENCE,
        'spike_window': settings.NORMLAB_SPIKE_WINDOW,
    }


def parse_experiment_config(document, default_name='experiment', seed_override=None):
    """
    Validate a decoded experiment document.

    Args:
        document: The decoded JSON object
        default_name: Name used when the document has none
        seed_override: Replaces both the model and the training seed

    Returns:
        ExperimentConfig

    Raises:
        ConfigError: On unknown keys, missing sections or invalid values.
    """
    if not isinstance(document, dict):
        raise ConfigError("experiment config must be a JSON object")
    unknown = sorted(set(document) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    for section in ('model', 'train'):
        if not isinstance(document.get(section), dict):
            raise ConfigError(f"missing or invalid '{section}' section")

    model_form = ModelConfigForm(document['model'])
    if not model_form.is_valid():
        raise ConfigError(_form_errors('model', model_form))
    train_form = TrainConfigForm(document['train'])
    if not train_form.is_valid():
        raise ConfigError(_form_errors('train', train_form))

    model_data = model_form.section_data()
    train_data = {**_stability_defaults(), **train_form.section_data()}
    if seed_override is not None:
        model_data['seed'] = seed_override
        train_data['seed'] = seed_override
    if 'dataset' in train_data:
        train_data['dataset'] = DatasetSpec(**train_data['dataset'])

    name = str(document.get('name') or default_name)
    output_dir = document.get('output_dir') or Path(settings.NORMLAB_OUTPUT_DIR) / name
    return ExperimentConfig(
        name=name,
        model=ModelConfig(**model_data),
        train=TrainConfig(**train_data),
        output_dir=Path(output_dir),
    )


def load_experiment_config(path, seed_override=None):
    """
    Read and validate an experiment config file.

    Raises:
        ConfigError: If the file is missing, is not valid JSON (the message
            carries line and column) or fails validation.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_experiment_config(document, default_name=path.stem, seed_override=seed_override)
