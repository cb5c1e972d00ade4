"""
Per-sub-layer profiles: hidden-state magnitudes, gradient norms and stream
contribution ratios.
"""
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from tensor_core.exceptions import ContractError

_LAYER_NAME = re.compile(r'^layer\.(\d+)\.')


@dataclass
class ProfileRow:
    """
    One CSV row of a profile. Fields that do not apply to a topology (the
    Y-stream of a single-stream model, ratios outside SiameseNorm) stay None.
    """
    layer_index: int
    magnitude_X: Optional[float] = None
    magnitude_Y: Optional[float] = None
    grad_norm_block: Optional[float] = None
    ratio_X: Optional[float] = None
    ratio_Y: Optional[float] = None


@dataclass
class GradNormProfile:
    per_block: list
    global_norm: float
    other: dict


def _mean_row_norm(tensor):
    return float(np.mean(np.linalg.norm(tensor.data, axis=-1)))


def magnitude_profile(trace):
    """
    Batch- and position-averaged l2 norm of every state in a trace.

    Raises:
        ContractError: If the trace is empty.
    """
    if not trace:
        raise ContractError("magnitude_profile needs a non-empty trace")
    rows = []
    for state in trace:
        rows.append(ProfileRow(
            layer_index=state.layer_index,
            magnitude_X=_mean_row_norm(state.X),
            magnitude_Y=_mean_row_norm(state.Y) if state.Y is not None else None,
        ))
    return rows


def grad_norm_profile(params):
    """
    l2 norms of the gradient of every sub-layer (branch weights, LN scales
    and gamma of ``layer.{i}.*``), of the remaining tensors by name, and the
    global norm over everything.
    """
    n_sublayers = params.config.n_sublayers if params.config is not None else 0
    squares = [0.0] * n_sublayers
    other = {}
    for param in params:
        sq = float(np.sum(param.grad * param.grad))
        match = _LAYER_NAME.match(param.name)
        if match:
            i = int(match.group(1))
            while i >= len(squares):
                squares.append(0.0)
            squares[i] += sq
        else:
            other[param.name] = sq
    global_sq = sum(squares) + sum(other.values())
    return GradNormProfile(
        per_block=[float(np.sqrt(sq)) for sq in squares],
        global_norm=float(np.sqrt(global_sq)),
        other={name: float(np.sqrt(sq)) for name, sq in other.items()},
    )


def contribution_ratio(m_x, m_y):
    """(m_x, m_y) normalized to shares; (0.5, 0.5) when both are zero."""
    total = m_x + m_y
    if total == 0.0:
        return 0.5, 0.5
    return m_x / total, m_y / total


def _mean_abs(param):
    return float(np.mean(np.abs(param.data)))


def stream_contribution_ratios(params):
    """
    Share of the X- and Y-stream in every fused block input.

    m_Y is the mean |LN^Y scale| of the sub-layer. m_X is the mean |gamma|
    where gamma gates the X input, otherwise the mean |scale| of the last
    LN^X applied to X before it reaches the fused input (the bounded-stream
    gate at sub-layer 0).

    Raises:
        ContractError: For non-SiameseNorm parameters.
    """
    config = params.config
    if config is None or not config.topology.siamese:
        raise ContractError("stream contribution ratios are defined for SiameseNorm parameters only")
    ratios = []
    x_side = params['embed.x_gate']
    for i in range(config.n_sublayers):
        gamma = params.get(f'layer.{i}.gamma')
        m_x = _mean_abs(gamma if gamma is not None else x_side)
        m_y = _mean_abs(params[f'layer.{i}.ln_y.scale'])
        ratios.append(contribution_ratio(m_x, m_y))
        ln_x = params.get(f'layer.{i}.ln_x.scale')
        if ln_x is not None:
            x_side = ln_x
    return ratios


def fusion_weights(params):
    """
    Mean |scale| of the last LN^X on the X path and of LN_final on the
    Y path, i.e. the weights the two streams carry into the final fusion.
    """
    config = params.config
    if config is None or not config.topology.siamese:
        raise ContractError("fusion weights are defined for SiameseNorm parameters only")
    x_side = params['embed.x_gate']
    for i in range(config.n_sublayers):
        x_side = params.get(f'layer.{i}.ln_x.scale', x_side)
    return _mean_abs(x_side), _mean_abs(params['final.ln.scale'])


def build_profile(trace, params=None):
    """
    Merge magnitudes, per-block gradient norms (when ``params`` carry
    gradients) and contribution ratios (SiameseNorm only) into ProfileRows.
    Row ``i`` describes the state entering sub-layer ``i``; gradient norm and
    ratios belong to sub-layer ``i`` itself and are absent on the last row.
    """
    rows = magnitude_profile(trace)
    if params is None:
        return rows
    grads = grad_norm_profile(params).per_block
    ratios = stream_contribution_ratios(params) if params.config.topology.siamese else []
    for row in rows:
        i = row.layer_index
        if i < len(grads):
            row.grad_norm_block = grads[i]
        if i < len(ratios):
            row.ratio_X, row.ratio_Y = ratios[i]
    return rows


def grad_norm_summary(records, warmup_steps, threshold=100.0, calm=0.5):
    """
    Post-warmup gradient-norm statistics of a metrics stream: the maximum,
    the fraction of records above ``threshold`` and the fraction below
    ``calm``.
    """
    norms = [r.grad_norm for r in records if r.step > warmup_steps and np.isfinite(r.grad_norm)]
    if not norms:
        return {'max_grad_norm': None, 'frac_above_threshold': None, 'frac_below_calm': None}
    norms = np.asarray(norms)
    return {
        'max_grad_norm': float(norms.max()),
        'frac_above_threshold': float(np.mean(norms > threshold)),
        'frac_below_calm': float(np.mean(norms < calm)),
    }


def depth_monotone(magnitudes, tol=0.0):
    """True when a magnitude sequence never drops by more than ``tol``."""
    return all(b >= a - tol for a, b in zip(magnitudes, magnitudes[1:]))

