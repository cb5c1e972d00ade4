from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional, Tuple

from tensor_core.exceptions import ConfigError


class DatasetKind(str, Enum):
    MODULAR_ADD = 'modular_add'
    COPY = 'copy'
    TEXT_FILE = 'text_file'

    @classmethod
    def choices(cls):
        return [(kind.value, kind.value.replace('_', ' ')) for kind in cls]


@dataclass(frozen=True)
class DatasetSpec:
    """
    Which task to train on. Only the fields of the chosen kind matter:
    ``p`` for modular addition, ``alphabet``/``length`` for copy, ``path``
    for a byte-level text file.
    """
    kind: DatasetKind = DatasetKind.MODULAR_ADD
    p: int = 97
    alphabet: int = 8
    length: int = 8
    path: Optional[str] = None
    n_examples: int = 4096
    eval_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, 'kind', DatasetKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown dataset kind {self.kind!r}") from None
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ConfigError(f"eval_fraction must be in [0, 1), got {self.eval_fraction}")
        if self.n_examples < 1:
            raise ConfigError(f"n_examples must be >= 1, got {self.n_examples}")
        if self.kind == DatasetKind.MODULAR_ADD and self.p < 2:
            raise ConfigError(f"modulus p must be >= 2, got {self.p}")
        if self.kind == DatasetKind.COPY and (self.alphabet < 1 or self.length < 1):
            raise ConfigError("copy dataset needs alphabet >= 1 and length >= 1")
        if self.kind == DatasetKind.TEXT_FILE and not self.path:
            raise ConfigError("text_file dataset needs a path")

    def to_dict(self):
        data = asdict(self)
        data['kind'] = self.kind.value
        return data


@dataclass(frozen=True)
class AdamWHyper:
    lr: float
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    decay_exempt: Tuple[str, ...] = ()


# Norm scales, gamma and embeddings; only exempted when the flag asks for it.
NO_DECAY_PATTERNS = ('*.scale', 'layer.*.gamma', 'embed.*')


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimizer, schedule, data and stability-rule settings of one run.

    Divergence: loss above ``divergence_factor`` x the first loss for
    ``divergence_patience`` consecutive records, or any non-finite value.
    Spike: loss above ``spike_factor`` x the median of the trailing
    ``spike_window`` step losses.
    """
    peak_lr: float
    warmup_steps: int
    total_steps: int
    final_lr_factor: float = 0.1
    batch_size: int = 64
    weight_decay: float = 0.1
    betas: Tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    spike_factor: float = 2.0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    eval_every: int = 100
    seed: int = 0
    exempt_norms_from_decay: bool = False
    divergence_factor: float = 10.0
    divergence_patience: int = 10
    spike_window: int = 100

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            object.__setattr__(self, 'dataset', DatasetSpec(**self.dataset))
        object.__setattr__(self, 'betas', tuple(self.betas))
        if not self.peak_lr > 0:
            raise ConfigError(f"peak_lr must be > 0, got {self.peak_lr}")
        if self.warmup_steps < 0 or self.total_steps < 1:
            raise ConfigError("warmup_steps must be >= 0 and total_steps >= 1")
        if self.warmup_steps >= self.total_steps:
            raise ConfigError(
                f"warmup_steps ({self.warmup_steps}) must be smaller than total_steps ({self.total_steps})"
            )
        if not self.spike_factor > 1:
            raise ConfigError(f"spike_factor must be > 1, got {self.spike_factor}")
        if not 0.0 <= self.final_lr_factor <= 1.0:
            raise ConfigError(f"final_lr_factor must be in [0, 1], got {self.final_lr_factor}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1")
        if self.weight_decay < 0 or self.adam_eps <= 0 or self.clip_norm < 0:
            raise ConfigError("weight_decay and clip_norm must be >= 0, adam_eps > 0")
        if self.divergence_factor <= 1 or self.divergence_patience < 1 or self.spike_window < 1:
            raise ConfigError("divergence_factor must be > 1, divergence_patience and spike_window >= 1")

    def hyper(self, lr):
        """AdamW hyper-parameters at learning rate ``lr``."""
        return AdamWHyper(
            lr=lr,
            weight_decay=self.weight_decay,
            betas=self.betas,
            eps=self.adam_eps,
            decay_exempt=NO_DECAY_PATTERNS if self.exempt_norms_from_decay else (),
        )

    def to_dict(self):
        data = asdict(self)
        data['betas'] = list(self.betas)
        data['dataset'] = self.dataset.to_dict()
        return data
