from dataclasses import asdict, dataclass

from tensor_core.exceptions import ConfigError
from tensor_core.ops import DEFAULT_EPS
from topologies.kinds import TopologyKind


@dataclass(frozen=True)
class ModelConfig:
    """
    Full description of one model.

    Each of the ``n_layers`` transformer layers contributes two residual
    sub-layers (attention then MLP), so sub-layer indices run over
    ``0 .. 2 * n_layers - 1``. Even indices are attention, odd are MLP.
    """
    n_layers: int
    d_model: int
    n_heads: int
    vocab_size: int
    seq_len: int
    topology: TopologyKind = TopologyKind.PRE_NORM
    ffn_mult: int = 4
    embed_norm: bool = False
    fused_input_norm: bool = False
    depth_scaling: bool = False
    qk_norm: bool = False
    norm_eps: float = DEFAULT_EPS
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, 'topology', TopologyKind(self.topology))
        except ValueError:
            raise ConfigError(f"unknown topology {self.topology!r}") from None
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.d_model < 1 or self.n_heads < 1:
            raise ConfigError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.ffn_mult < 1:
            raise ConfigError(f"ffn_mult must be >= 1, got {self.ffn_mult}")
        if self.norm_eps < 0:
            raise ConfigError(f"norm_eps must be >= 0, got {self.norm_eps}")

    @property
    def n_sublayers(self):
        return 2 * self.n_layers

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @property
    def ffn_hidden(self):
        return self.ffn_mult * self.d_model

    def is_attention(self, i):
        return i % 2 == 0

    def to_dict(self):
        data = asdict(self)
        data['topology'] = self.topology.value
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)
