"""
Residual wiring of every topology.

``layer_forward`` advances the stream state through one residual sub-layer;
``model_forward`` embeds tokens, runs every sub-layer, fuses the streams
and unembeds.
"""
import logging

import numpy as np

from blocks.initialization import deepnorm_constants, has_final_norm
from blocks.layers import block_params, branch_forward, embed
from tensor_core import ops
from tensor_core.exceptions import ContractError, DivergenceError

from .kinds import TopologyKind
from .state import StreamState

logger = logging.getLogger(__name__)


def layer_norm_params(params, i):
    """
    Normalization vectors of sub-layer ``i`` keyed by short name:
    ``ln``, ``ln_in``, ``ln_x``, ``ln_y``, ``ln_fuse``, ``gamma``.
    """
    prefix = f'layer.{i}.'
    norms = {}
    for param in params.with_prefix(prefix):
        short = param.name[len(prefix):]
        if short.startswith(('attn.', 'mlp.')):
            continue
        if short.endswith('.scale'):
            short = short[:-len('.scale')]
        norms[short] = param
    return norms


def depth_scale(kind, i, config):
    """1/sqrt(i+1) on the bounded-stream update when depth scaling is on."""
    if config.depth_scaling and kind.uses_depth_scaling:
        return 1.0 / np.sqrt(i + 1.0)
    return 1.0


def _scaled(update, factor):
    return update if factor == 1.0 else ops.scale(update, factor)


def _check_finite(i, *tensors):
    for tensor in tensors:
        if tensor is not None and not np.all(np.isfinite(tensor.data)):
            raise DivergenceError(f"non-finite activation in sub-layer {i}", layer_index=i)


def layer_forward(kind, state, block, ln_params, i, config):
    """
    Run sub-layer ``i`` of topology ``kind`` on ``state``.

    Completes ``state`` with the update ``O`` and the depth scale it used
    and returns the state entering sub-layer ``i + 1``.

    Raises:
        ContractError: If the state's streams do not match the topology.
        DivergenceError: If any produced tensor is not finite.
    """
    kind = TopologyKind(kind)
    if kind.two_stream != state.two_stream:
        raise ContractError(f"{kind.label} expects {'two streams' if kind.two_stream else 'one stream'}")
    eps = config.norm_eps
    attention = config.is_attention(i)
    x, y = state.X, state.Y
    s = depth_scale(kind, i, config)
    y_next = None

    def ln(name, value):
        return ops.rms_norm(value, ln_params[name], eps)

    if kind == TopologyKind.PRE_NORM:
        update = branch_forward(block, ln('ln', x), config)
        x_next = ops.add(x, update)
    elif kind == TopologyKind.POST_NORM:
        update = branch_forward(block, x, config)
        x_next = ln('ln', ops.add(x, update))
    elif kind == TopologyKind.DEEP_NORM:
        alpha, _ = deepnorm_constants(config.n_layers)
        update = branch_forward(block, x, config)
        x_next = ln('ln', ops.add(ops.scale(x, alpha), update))
    elif kind == TopologyKind.RESIDUAL:
        update = branch_forward(block, x, config)
        x_next = ln('ln', ops.add(x, update))
        y_next = ops.add(y, update)
    elif kind in (TopologyKind.HYBRID_NORM, TopologyKind.HYBRID_RESIDUAL):
        update = branch_forward(block, ln('ln_in', x), config)
        x_next = ops.add(x, _scaled(update, s))
        if attention:
            x_next = ln('ln', x_next)
        if kind == TopologyKind.HYBRID_RESIDUAL:
            y_next = ops.add(y, update)
    else:
        practical = kind == TopologyKind.SIAMESE_PRACTICAL
        x_in = ops.mul(x, ln_params['gamma']) if practical and attention else x
        fused = ops.add(x_in, ln('ln_y', y))
        if config.fused_input_norm:
            fused = ln('ln_fuse', fused)
        update = branch_forward(block, fused, config)
        x_next = ops.add(x, _scaled(update, s))
        if attention or not practical:
            x_next = ln('ln_x', x_next)
        y_next = ops.add(y, update)

    state.O = update
    state.depth_scale = s
    next_state = StreamState(layer_index=i + 1, X=x_next, Y=y_next)
    try:
        _check_finite(i, update, x_next, y_next)
    except DivergenceError as exc:
        exc.state = next_state
        raise
    return next_state


def initial_state(config, params, tokens):
    """Embed tokens and seed the stream(s): X_0 = Y_0 = input."""
    hidden = embed(tokens, params['embed.tokens'], params['embed.positions'], config.embed_norm, config.norm_eps)
    kind = config.topology
    if not kind.two_stream:
        return StreamState(layer_index=0, X=hidden)
    # Y_0 is its own node: its adjoint excludes what flows back through X_0.
    x = ops.mul(hidden, params['embed.x_gate']) if kind.siamese else hidden
    return StreamState(layer_index=0, X=x, Y=ops.identity(hidden))


def output_hidden(config, params, state):
    """
    Final representation fed to the unembedding: X_N + LN_final(Y_N) for
    two-stream topologies, LN_final(X_N) for Pre-Norm, X_N otherwise.
    """
    kind = config.topology
    if kind.two_stream:
        return ops.add(state.X, ops.rms_norm(state.Y, params['final.ln.scale'], config.norm_eps))
    if has_final_norm(kind):
        return ops.rms_norm(state.X, params['final.ln.scale'], config.norm_eps)
    return state.X


def model_forward(config, params, tokens):
    """
    Full forward pass.

    Returns:
        ``(logits, trace)``: logits of shape (B, T, V) and the list of
        StreamStates entering sub-layers 0 .. N (the last one is the output
        of the final sub-layer).

    Raises:
        DivergenceError: With ``trace`` holding every state recorded up to
            and including the failing sub-layer.
    """
    kind = config.topology
    state = initial_state(config, params, tokens)
    trace = [state]
    try:
        _check_finite(0, state.X)
        for i in range(config.n_sublayers):
            state = layer_forward(kind, state, block_params(params, i), layer_norm_params(params, i), i, config)
            trace.append(state)
    except DivergenceError as exc:
        if exc.state is not None:
            trace.append(exc.state)
        exc.trace = trace
        logger.debug("Forward pass diverged at sub-layer %s", exc.layer_index)
        raise
    logits = ops.matmul(output_hidden(config, params, state), params['unembed'])
    return logits, trace
