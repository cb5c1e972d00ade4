"""
Largest singular values by power iteration, and the LN Jacobian spectrum
along depth.
"""
from dataclasses import dataclass

import numpy as np

from blocks.initialization import deepnorm_constants
from tensor_core.exceptions import ContractError, DivergenceError
from topologies.kinds import TopologyKind

from .jacobian import rms_norm_jacobian


@dataclass(frozen=True)
class SpectralNorm:
    value: float
    converged: bool
    iterations: int

    def __float__(self):
        return self.value


def spectral_norm(m, max_iters=1000, tol=1e-8, seed=0):
    """
    Largest singular value of a square matrix via power iteration on m^T m.

    Stops when successive estimates agree to ``tol`` relative to
    max(1, sigma). A zero matrix returns 0 as converged.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractError(f"spectral_norm expects a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DivergenceError("spectral_norm: matrix has non-finite entries")
    if not np.any(m):
        return SpectralNorm(0.0, True, 0)

    gram = m.T @ m
    v = np.random.default_rng(seed).standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for iteration in range(1, max_iters + 1):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # Start vector fell into the null space; restart along a fixed axis.
            v = np.zeros_like(v)
            v[iteration % v.size] = 1.0
            continue
        v = w / norm
        estimate = float(np.sqrt(max(v @ gram @ v, 0.0)))
        if abs(estimate - sigma) <= tol * max(1.0, estimate):
            return SpectralNorm(estimate, True, iteration)
        sigma = estimate
    return SpectralNorm(sigma, False, max_iters)


def ln_jacobian_spectrum(trace, params, config, position=(0, 0)):
    """
    Spectral norm of the main-path LN Jacobian at every sub-layer that has
    one, evaluated at the LN's actual input for one token.

    Returns:
        A list of ``(layer_index, spectral_norm)`` pairs.
    """
    kind = config.topology
    b, t = position
    rows = []
    for state in trace:
        i = state.layer_index
        if state.O is None:
            continue
        x = state.X.data[b, t]
        o = state.O.data[b, t]
        if kind in (TopologyKind.POST_NORM, TopologyKind.RESIDUAL):
            name, ln_input = f'layer.{i}.ln.scale', x + o
        elif kind == TopologyKind.DEEP_NORM:
            alpha, _ = deepnorm_constants(config.n_layers)
            name, ln_input = f'layer.{i}.ln.scale', alpha * x + o
        elif kind.hybrid_wiring and not config.is_attention(i):
            continue
        elif kind in (TopologyKind.HYBRID_NORM, TopologyKind.HYBRID_RESIDUAL):
            name, ln_input = f'layer.{i}.ln.scale', x + state.depth_scale * o
        elif kind.siamese:
            name, ln_input = f'layer.{i}.ln_x.scale', x + state.depth_scale * o
        else:
            continue
        jac = rms_norm_jacobian(ln_input, params[name].data, config.norm_eps)
        rows.append((i, spectral_norm(jac).value))
    return rows
