"""
AdamW with decoupled weight decay and global-norm gradient clipping.

Both work in place on the ``.data`` / ``.grad`` arrays of a ParamSet.
"""
import fnmatch
from dataclasses import dataclass, field

import numpy as np

from tensor_core.exceptions import ContractError, DivergenceError


@dataclass
class AdamWState:
    """First and second moments, keyed by parameter name."""
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _decays(name, exempt):
    return not any(fnmatch.fnmatchcase(name, pattern) for pattern in exempt)


def adamw_step(params, state, hyper, step):
    """
    Apply one AdamW update.

    The decay ``theta <- theta - lr * wd * theta`` is applied first and
    independently of the moment update, which then uses bias-corrected
    moments ``m_hat / (sqrt(v_hat) + eps)``.

    Args:
        params: ParamSet with populated grads
        state: AdamWState, updated in place
        hyper: AdamWHyper
        step: 1-based step count used for bias correction

    Raises:
        DivergenceError: If any gradient is non-finite; nothing is modified.
    """
    if step < 1:
        raise ContractError(f"adamw_step needs step >= 1, got {step}")
    for param in params:
        if not np.all(np.isfinite(param.grad)):
            raise DivergenceError(f"non-finite gradient in {param.name}", step=step)

    beta1, beta2 = hyper.betas
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    for param in params:
        name = param.name
        grad = param.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        v = state.v[name]
        if hyper.weight_decay and _decays(name, hyper.decay_exempt):
            param.data *= 1.0 - hyper.lr * hyper.weight_decay
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)


def global_grad_norm(params):
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))


def clip_global_norm(params, max_norm):
    """
    Scale every gradient by ``max_norm / g`` when the global norm g exceeds
    ``max_norm``.

    Returns:
        The factor applied (1.0 when untouched).
    """
    norm = global_grad_norm(params)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for param in params:
        param.grad *= factor
    return factor
