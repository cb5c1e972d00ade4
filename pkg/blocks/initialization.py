"""
Parameter initialization shared by every topology.

Block weights are drawn first, in a fixed order that does not depend on the
topology, so two models with the same seed and dimensions share every
residual-branch weight whatever their wiring. Normalization scales, gamma
and the bounded-stream gate are deterministic ones and consume no
randomness.
"""
import logging

import numpy as np

from tensor_core.params import ParamSet
from topologies.kinds import TopologyKind

logger = logging.getLogger(__name__)

TRUNCATION = 3.0

# Residual-output weights rescaled by beta for DeepNorm.
DEEPNORM_SCALED = ('attn.w_v', 'attn.w_o', 'mlp.w_gate', 'mlp.w_up', 'mlp.w_down')


def truncated_normal(rng, shape, std, bound=TRUNCATION):
    """
    Normal samples with standard deviation ``std``, redrawn until every
    value lies within ``bound * std`` of zero.
    """
    values = rng.standard_normal(shape)
    outside = np.abs(values) > bound
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > bound
    return values * std


def deepnorm_constants(n_layers):
    """(alpha, beta) of the decoder-only DeepNet recipe."""
    n_layers = max(n_layers, 1)
    return (2.0 * n_layers) ** 0.25, (8.0 * n_layers) ** -0.25


def norm_names(config, i):
    """
    Names (relative to ``layer.{i}.``) of the normalization vectors and
    gates sub-layer ``i`` owns under the config's topology.
    """
    kind = config.topology
    attention = config.is_attention(i)
    names = []
    if kind in (TopologyKind.PRE_NORM, TopologyKind.POST_NORM, TopologyKind.DEEP_NORM, TopologyKind.RESIDUAL):
        names.append('ln.scale')
    elif kind in (TopologyKind.HYBRID_NORM, TopologyKind.HYBRID_RESIDUAL):
        names.append('ln_in.scale')
        if attention:
            names.append('ln.scale')
    elif kind == TopologyKind.SIAMESE_CANONICAL:
        names.extend(['ln_x.scale', 'ln_y.scale'])
    elif kind == TopologyKind.SIAMESE_PRACTICAL:
        if attention:
            names.extend(['ln_x.scale', 'gamma'])
        names.append('ln_y.scale')
    if kind.siamese and config.fused_input_norm:
        names.append('ln_fuse.scale')
    return names


def has_final_norm(kind):
    return kind == TopologyKind.PRE_NORM or kind.two_stream


def init_params(config):
    """
    Build the ParamSet for ``config``.

    Weights follow a truncated normal with std 1/sqrt(d_model) cut at three
    standard deviations; every LN scale, gamma and gate starts at 1.0.
    """
    rng = np.random.default_rng(config.seed)
    d, hidden = config.d_model, config.ffn_hidden
    std = 1.0 / np.sqrt(d)
    params = ParamSet(config=config)

    params.add('embed.tokens', truncated_normal(rng, (config.vocab_size, d), std))
    params.add('embed.positions', truncated_normal(rng, (config.seq_len, d), std))

    for i in range(config.n_sublayers):
        prefix = f'layer.{i}'
        if config.is_attention(i):
            for name in ('w_q', 'w_k', 'w_v', 'w_o'):
                params.add(f'{prefix}.attn.{name}', truncated_normal(rng, (d, d), std))
            if config.qk_norm:
                params.add(f'{prefix}.attn.q_norm.scale', np.ones(config.d_head))
                params.add(f'{prefix}.attn.k_norm.scale', np.ones(config.d_head))
        else:
            params.add(f'{prefix}.mlp.w_gate', truncated_normal(rng, (d, hidden), std))
            params.add(f'{prefix}.mlp.w_up', truncated_normal(rng, (d, hidden), std))
            params.add(f'{prefix}.mlp.w_down', truncated_normal(rng, (hidden, d), std))
        for name in norm_names(config, i):
            params.add(f'{prefix}.{name}', np.ones(d))

    params.add('unembed', truncated_normal(rng, (d, config.vocab_size), std))

    if config.topology.siamese:
        params.add('embed.x_gate', np.ones(d))
    if has_final_norm(config.topology):
        params.add('final.ln.scale', np.ones(d))

    if config.topology == TopologyKind.DEEP_NORM:
        _, beta = deepnorm_constants(config.n_layers)
        for param in params:
            if param.name.endswith(DEEPNORM_SCALED):
                param.data = param.data * beta

    logger.debug("Initialized %s with seed %d: %d values", config.topology.value, config.seed, params.num_values())
    return params
