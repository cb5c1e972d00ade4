"""
Exception hierarchy shared by every NormLab app.

Management commands map these onto exit codes, so each failure mode
gets its own class rather than a message string.
"""


class NormLabError(Exception):
    """Base class for all lab errors."""


class DimensionError(NormLabError, ValueError):
    """Operand shapes do not fit the operation."""


class SequenceLengthError(DimensionError):
    """A sequence is longer than the configured context."""


class MaskError(NormLabError, ValueError):
    """A softmax row has no unmasked entry."""


class ContractError(NormLabError):
    """A caller broke an operation's precondition."""


class ConfigError(NormLabError, ValueError):
    """A model, training or experiment configuration is invalid."""


class TokenIndexError(NormLabError, IndexError):
    """A token or target id is outside the vocabulary."""


class DivergenceError(NormLabError):
    """
    A non-finite value showed up in a forward pass, a loss or a gradient.

    Args:
        message: Human readable description
        layer_index: Sub-layer that produced the non-finite tensor, if known
        step: Training step at which the divergence happened, if known
        trace: Stream states recorded up to and including the failure
        state: The non-finite state produced by ``layer_index``, if any
    """

    def __init__(self, message, layer_index=None, step=None, trace=None, state=None):
        super().__init__(message)
        self.layer_index = layer_index
        self.step = step
        self.trace = trace if trace is not None else []
        self.state = state
