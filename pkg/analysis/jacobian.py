"""
Block Jacobian transition matrices of a single sub-layer.

Everything here works on one token (batch 1, T = 1) so attention reduces to
a per-position map and the layer is a function of the d-vectors of X and Y
only. ``block_jacobian_assembled`` composes the transition matrix from
sub-Jacobians of LN^X, LN^Y and F; ``jacobian_bruteforce`` differentiates
the whole ``layer_forward`` map and serves as its oracle.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from blocks.initialization import deepnorm_constants
from blocks.layers import BlockParams, branch_forward
from tensor_core import ops
from tensor_core.exceptions import ContractError, DivergenceError
from tensor_core.tensor import Tape, Tensor
from topologies.kinds import TopologyKind
from topologies.state import StreamState
from topologies.wiring import depth_scale, layer_forward

DEFAULT_STEP = 1e-6


@dataclass
class BlockJacobian:
    """
    d(S_{i+1}) / d(S_i) split into d x d blocks. Single-stream topologies
    only have ``dXX``.
    """
    layer_index: int
    dXX: np.ndarray
    dXY: Optional[np.ndarray] = None
    dYX: Optional[np.ndarray] = None
    dYY: Optional[np.ndarray] = None

    @property
    def two_stream(self):
        return self.dYY is not None

    @property
    def matrix(self):
        if not self.two_stream:
            return self.dXX
        return np.block([[self.dXX, self.dXY], [self.dYX, self.dYY]])


def central_jacobian(fn, point, h=DEFAULT_STEP):
    """Jacobian of a vector map by central differences, one column per input."""
    point = np.asarray(point, dtype=np.float64)
    base = np.asarray(fn(point))
    jac = np.zeros((base.size, point.size))
    for k in range(point.size):
        step = np.zeros_like(point)
        step[k] = h
        plus = np.asarray(fn(point + step))
        minus = np.asarray(fn(point - step))
        if not (np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
            raise DivergenceError(f"non-finite layer output while perturbing coordinate {k}")
        jac[:, k] = (plus - minus).reshape(-1) / (2.0 * h)
    return jac


def rms_norm_jacobian(x, scale=None, eps=ops.DEFAULT_EPS):
    """Closed form d rms_norm(x) / dx for one d-vector."""
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    rms = np.sqrt(np.mean(x * x) + eps)
    normed = x / rms
    jac = (np.eye(d) - np.outer(normed, normed) / d) / rms
    if scale is not None:
        jac = np.asarray(scale).reshape(-1, 1) * jac
    return jac


def _token_vector(tensor):
    if tensor.shape[0] != 1 or tensor.shape[1] != 1:
        raise ContractError(f"block Jacobians need batch 1 and a single position, got shape {tensor.shape}")
    return tensor.data[0, 0].copy()


def _as_token(vector):
    return Tensor(np.asarray(vector, dtype=np.float64).reshape(1, 1, -1))


def _ln_map(scale, eps):
    def fn(v):
        return ops.rms_norm(_as_token(v), scale, eps).data.reshape(-1)
    return fn


def _branch_map(block, config, pre_norm=None):
    def fn(v):
        u = _as_token(v)
        if pre_norm is not None:
            u = ops.rms_norm(u, pre_norm, config.norm_eps)
        return branch_forward(block, u, config).data.reshape(-1)
    return fn


def block_jacobian_assembled(kind, state, block, ln_params, i, config, h=DEFAULT_STEP):
    """
    Assemble the transition matrix of sub-layer ``i`` from sub-Jacobians.

    The sub-Jacobians J_LN and J_F are measured by column-wise central
    differences of each sub-function at the operating point the layer
    actually sees; they are then combined in closed form, e.g. for
    SiameseNorm::

        dXX = J_LNX (I + s J_F G)     dXY = J_LNX s J_F J_LNY
        dYX = J_F G                   dYY = I + J_F J_LNY

    with G = diag(gamma) at practical attention sub-layers (else I) and
    J_LNX = I where the X path has no LN.

    Raises:
        ContractError: For inputs with more than one token.
    """
    kind = TopologyKind(kind)
    x = _token_vector(state.X)
    y = _token_vector(state.Y) if state.Y is not None else None
    d = x.size
    eye = np.eye(d)
    eps = config.norm_eps
    attention = config.is_attention(i)
    s = depth_scale(kind, i, config)
    scales = {name: param.data for name, param in ln_params.items()}

    def ln(name, v):
        return _ln_map(scales[name], eps)(v)

    def jac_ln(name, v):
        return central_jacobian(_ln_map(scales[name], eps), v, h)

    if kind == TopologyKind.PRE_NORM:
        j_ln = jac_ln('ln', x)
        j_f = central_jacobian(_branch_map(block, config), ln('ln', x), h)
        return BlockJacobian(i, dXX=eye + j_f @ j_ln)

    if kind in (TopologyKind.POST_NORM, TopologyKind.DEEP_NORM, TopologyKind.RESIDUAL):
        alpha = deepnorm_constants(config.n_layers)[0] if kind == TopologyKind.DEEP_NORM else 1.0
        f = _branch_map(block, config)
        j_f = central_jacobian(f, x, h)
        j_ln = jac_ln('ln', alpha * x + f(x))
        dxx = j_ln @ (alpha * eye + j_f)
        if kind != TopologyKind.RESIDUAL:
            return BlockJacobian(i, dXX=dxx)
        return BlockJacobian(i, dXX=dxx, dXY=np.zeros((d, d)), dYX=j_f, dYY=eye.copy())

    if kind in (TopologyKind.HYBRID_NORM, TopologyKind.HYBRID_RESIDUAL):
        f = _branch_map(block, config)
        normed = ln('ln_in', x)
        j_f = central_jacobian(f, normed, h) @ jac_ln('ln_in', x)
        j_main = jac_ln('ln', x + s * f(normed)) if attention else eye
        dxx = j_main @ (eye + s * j_f)
        if kind == TopologyKind.HYBRID_NORM:
            return BlockJacobian(i, dXX=dxx)
        return BlockJacobian(i, dXX=dxx, dXY=np.zeros((d, d)), dYX=j_f, dYY=eye.copy())

    practical = kind == TopologyKind.SIAMESE_PRACTICAL
    gate = np.diag(scales['gamma']) if practical and attention else eye
    x_in = gate @ x
    fused = x_in + ln('ln_y', y)
    f = _branch_map(block, config, scales['ln_fuse'] if config.fused_input_norm else None)
    j_f = central_jacobian(f, fused, h)
    j_lny = jac_ln('ln_y', y)
    j_lnx = jac_ln('ln_x', x + s * f(fused)) if attention or not practical else eye
    return BlockJacobian(
        i,
        dXX=j_lnx @ (eye + s * j_f @ gate),
        dXY=j_lnx @ (s * j_f @ j_lny),
        dYX=j_f @ gate,
        dYY=eye + j_f @ j_lny,
    )


def _layer_map(kind, block, ln_params, i, config, two_stream, d):
    def fn(v):
        x = _as_token(v[:d])
        y = _as_token(v[d:]) if two_stream else None
        out = layer_forward(kind, StreamState(i, x, y), block, ln_params, i, config)
        parts = [out.X.data.reshape(-1)]
        if two_stream:
            parts.append(out.Y.data.reshape(-1))
        return np.concatenate(parts)
    return fn


def jacobian_bruteforce(kind, state, block, ln_params, i, config, h=DEFAULT_STEP):
    """
    Central-difference Jacobian of the whole layer map [X, Y] -> [X', Y'].

    Returns:
        A (2d x 2d) matrix for two-stream topologies, (d x d) otherwise.

    Raises:
        ContractError: For inputs with more than one token.
        DivergenceError: If a perturbed forward pass is not finite.
    """
    kind = TopologyKind(kind)
    x = _token_vector(state.X)
    two_stream = state.Y is not None
    point = np.concatenate([x, _token_vector(state.Y)]) if two_stream else x
    return central_jacobian(_layer_map(kind, block, ln_params, i, config, two_stream, x.size), point, h)


def _detached(block, ln_params):
    """Untracked copies of the weights, so Jacobian passes leave parameter grads alone."""
    weights = {name: Tensor(param.data) for name, param in block.weights.items()}
    norms = {name: Tensor(param.data) for name, param in ln_params.items()}
    return BlockParams(kind=block.kind, weights=weights), norms


def jacobian_reverse_mode(kind, state, block, ln_params, i, config):
    """
    Exact layer Jacobian, one reverse-mode pass per output coordinate.

    Used where structural zeros and identities must hold to roundoff.
    """
    kind = TopologyKind(kind)
    x0 = _token_vector(state.X)
    d = x0.size
    two_stream = state.Y is not None
    y0 = _token_vector(state.Y) if two_stream else None
    n_out = 2 * d if two_stream else d
    block, ln_params = _detached(block, ln_params)
    jac = np.zeros((n_out, n_out))
    for row in range(n_out):
        x = Tensor(x0.reshape(1, 1, d), requires_grad=True)
        y = Tensor(y0.reshape(1, 1, d), requires_grad=True) if two_stream else None
        selector = np.zeros(n_out)
        selector[row] = 1.0
        with Tape() as tape:
            out = layer_forward(kind, StreamState(i, x, y), block, ln_params, i, config)
            picked = ops.total(ops.mul(out.X, selector[:d].reshape(1, 1, d)))
            if two_stream:
                picked = ops.add(picked, ops.total(ops.mul(out.Y, selector[d:].reshape(1, 1, d))))
        tape.backward(picked)
        grad_x = x.grad if x.grad is not None else np.zeros_like(x.data)
        jac[row, :d] = grad_x.reshape(-1)
        if two_stream:
            grad_y = y.grad if y.grad is not None else np.zeros_like(y.data)
            jac[row, d:] = grad_y.reshape(-1)
    return jac


def update_sensitivity(kind, state, block, ln_params, i, config, delta):
    """
    First-order response of (X', Y') to perturbing O_i by ``delta``:
    the pair (J_LNX s delta, delta) for SiameseNorm. Returned as the
    measured central difference of the post-update map in O.
    """
    kind = TopologyKind(kind)
    if not kind.siamese:
        raise ContractError("update sensitivity is defined for SiameseNorm topologies")
    x = _token_vector(state.X)
    y = _token_vector(state.Y)
    attention = config.is_attention(i)
    practical = kind == TopologyKind.SIAMESE_PRACTICAL
    s = depth_scale(kind, i, config)
    scale_x = ln_params['ln_x'].data if attention or not practical else None

    def post_update(o):
        x_next = x + s * o
        if scale_x is not None:
            x_next = _ln_map(scale_x, config.norm_eps)(x_next)
        return np.concatenate([x_next, y + o])

    o = _token_vector(state.O) if state.O is not None else np.zeros_like(x)
    jac = central_jacobian(post_update, o)
    return jac @ np.asarray(delta, dtype=np.float64)
