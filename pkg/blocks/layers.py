"""
Residual transformations F_i: causal multi-head attention and the SwiGLU
MLP, plus the token/position embedding.
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from tensor_core import ops
from tensor_core.exceptions import ContractError, SequenceLengthError, TokenIndexError


class BlockKind(str, Enum):
    ATTENTION = 'attention'
    MLP = 'mlp'


@dataclass
class BlockParams:
    """
    Weights of one residual sub-layer, keyed by short name
    (``w_q`` ... ``w_o``, ``q_norm`` / ``k_norm`` for attention;
    ``w_gate``, ``w_up``, ``w_down`` for the MLP).
    """
    kind: BlockKind
    weights: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.weights[name]

    def get(self, name, default=None):
        return self.weights.get(name, default)


def block_params(params, i):
    """Collect the branch weights of sub-layer ``i`` from a ParamSet."""
    config = params.config
    kind = BlockKind.ATTENTION if config.is_attention(i) else BlockKind.MLP
    prefix = f'layer.{i}.{"attn" if kind == BlockKind.ATTENTION else "mlp"}.'
    weights = {}
    for param in params.with_prefix(prefix):
        short = param.name[len(prefix):]
        if short.endswith('.scale'):
            short = short[:-len('.scale')]
        weights[short] = param
    if not weights:
        raise ContractError(f"no branch weights for sub-layer {i}")
    return BlockParams(kind=kind, weights=weights)


def _causal_mask(length):
    mask = np.zeros((length, length))
    mask[np.triu_indices(length, k=1)] = -np.inf
    return mask


def attention_forward(p, x, config):
    """
    Causal scaled dot-product attention over x of shape (B, T, d).

    Position t attends to positions <= t. With ``config.qk_norm`` queries
    and keys are RMS-normalized per head before the dot product.

    Raises:
        SequenceLengthError: If T exceeds ``config.seq_len``.
    """
    batch, length, d = x.shape
    if length > config.seq_len:
        raise SequenceLengthError(f"sequence of length {length} exceeds seq_len {config.seq_len}")
    heads, d_head = config.n_heads, config.d_head

    def split_heads(t):
        return ops.transpose(ops.reshape(t, (batch, length, heads, d_head)), (0, 2, 1, 3))

    q = split_heads(ops.matmul(x, p['w_q']))
    k = split_heads(ops.matmul(x, p['w_k']))
    v = split_heads(ops.matmul(x, p['w_v']))
    if config.qk_norm:
        q = ops.rms_norm(q, p['q_norm'], config.norm_eps)
        k = ops.rms_norm(k, p['k_norm'], config.norm_eps)

    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d_head))
    weights = ops.softmax_rows(ops.add(scores, _causal_mask(length)))
    mixed = ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3))
    return ops.matmul(ops.reshape(mixed, (batch, length, d)), p['w_o'])


def mlp_forward(p, x, config=None):
    return ops.swiglu_mlp(x, p['w_gate'], p['w_up'], p['w_down'])


def branch_forward(p, x, config):
    """Apply F_i: attention or MLP depending on the block kind."""
    if p.kind == BlockKind.ATTENTION:
        return attention_forward(p, x, config)
    return mlp_forward(p, x, config)


def embed(tokens, table, pos_table, embed_norm=False, eps=ops.DEFAULT_EPS):
    """
    Token embedding plus learned absolute position embedding.

    With ``embed_norm`` each position vector goes through a parameter-free
    RMSNorm, which puts its l2 norm at sqrt(d).

    Args:
        tokens: Integer array of shape (B, T)
        table: Tensor of shape (V, d)
        pos_table: Tensor of shape (seq_len, d)

    Raises:
        TokenIndexError: If a token id is outside the vocabulary.
        SequenceLengthError: If T exceeds the position table.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise TokenIndexError(f"tokens must be a (B, T) grid, got shape {tokens.shape}")
    length = tokens.shape[1]
    if length > pos_table.shape[0]:
        raise SequenceLengthError(f"sequence of length {length} exceeds seq_len {pos_table.shape[0]}")
    hidden = ops.add(ops.take_rows(table, tokens), ops.take_rows(pos_table, np.arange(length)))
    if embed_norm:
        hidden = ops.rms_norm(hidden, None, eps)
    return hidden
