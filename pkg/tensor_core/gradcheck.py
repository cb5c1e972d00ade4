"""
Central finite-difference oracle for analytic gradients.
"""
import numpy as np

from .exceptions import ContractError, DivergenceError
from .tensor import Tape


def relative_error(numeric, analytic):
    """|a - b| / max(1, |a|, |b|), elementwise."""
    numeric = np.asarray(numeric, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(numeric), np.abs(analytic)))
    return np.abs(numeric - analytic) / denom


def finite_diff_check(f, p, h=1e-5, coords=None):
    """
    Compare the analytic gradient of ``f`` at ``p`` with central differences.

    Args:
        f: Callable mapping a flat vector to ``(value, gradient)``; only the
            value is used at the perturbed points
        p: Flat parameter vector
        h: Step size, in [1e-7, 1e-3]
        coords: Optional subset of coordinates to check; all by default

    Returns:
        The maximum relative error over the checked coordinates.

    Raises:
        ContractError: If h is outside its allowed range.
        DivergenceError: If any evaluation of f is not finite.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"finite_diff_check: step {h} outside [1e-7, 1e-3]")
    p = np.array(p, dtype=np.float64).reshape(-1)
    value, analytic = f(p.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if not np.isfinite(value):
        raise DivergenceError("finite_diff_check: objective is not finite at the base point")
    if analytic.shape != p.shape:
        raise ContractError(f"gradient of shape {analytic.shape} for {p.shape[0]} coordinates")

    if coords is None:
        coords = range(p.shape[0])
    worst = 0.0
    for k in coords:
        plus = p.copy()
        plus[k] += h
        minus = p.copy()
        minus[k] -= h
        f_plus = f(plus)[0]
        f_minus = f(minus)[0]
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise DivergenceError(f"finite_diff_check: objective is not finite around coordinate {k}")
        numeric = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, float(relative_error(numeric, analytic[k])))
    return worst


def param_objective(params, loss_fn):
    """
    Turn ``loss_fn(params) -> scalar Tensor`` into a flat-vector objective
    suitable for ``finite_diff_check``.

    The returned callable overwrites the values of ``params``; pass a copy
    if the originals matter.
    """

    def objective(vector):
        params.set_flat_values(vector)
        params.zero_grad()
        with Tape() as tape:
            loss = loss_fn(params)
        tape.backward(loss)
        return loss.item(), params.flat_grads()

    return objective
