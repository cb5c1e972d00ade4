"""
Differentiable operations on Tensors.

Each operation computes its value with numpy and, when a tape is active and
at least one input is tracked, records a closure that maps the output
adjoint to the input adjoints. Only the operations the transformer blocks
need are provided.
"""
import contextlib
import contextvars

import numpy as np

from .exceptions import ContractError, DimensionError, MaskError, TokenIndexError
from .tensor import Tensor, active_tape, as_tensor

DEFAULT_EPS = 1e-5

_gradient_fault = contextvars.ContextVar('normlab_gradient_fault', default=None)


@contextlib.contextmanager
def inject_gradient_fault(op, factor=1.5):
    """
    Scale the backward rule of ``op`` by ``factor`` inside the block.

    Only used as a negative control for the gradient-check harness.
    """
    token = _gradient_fault.set((op, factor))
    try:
        yield
    finally:
        _gradient_fault.reset(token)


def _record(op, inputs, data, backward):
    out = Tensor(data)
    tape = active_tape()
    if tape is None or not any(t.tracked for t in inputs):
        return out
    fault = _gradient_fault.get()
    if fault is not None and fault[0] == op:
        factor = fault[1]
        inner = backward

        def backward(g):
            return [None if gi is None else gi * factor for gi in inner(g)]

    return tape.record(op, inputs, out, backward)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'add')
    return _record(
        'add', (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'mul')
    return _record(
        'mul', (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def identity(a):
    """Same values on a fresh tape node, so the copy gets its own adjoint."""
    a = as_tensor(a)
    return _record('identity', (a,), a.data, lambda g: (g,))


def scale(a, factor):
    a = as_tensor(a)
    factor = float(factor)
    return _record('scale', (a,), a.data * factor, lambda g: (g * factor,))


def matmul(a, b):
    """
    Matrix product over the last two axes; leading axes broadcast.

    Raises:
        DimensionError: If the inner dimensions differ.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _record('matmul', (a, b), np.matmul(a.data, b.data), backward)


def reshape(a, shape):
    a = as_tensor(a)
    original = a.shape
    return _record('reshape', (a,), a.data.reshape(shape), lambda g: (g.reshape(original),))


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _record('transpose', (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def total(a):
    """Sum of all entries as a scalar tensor."""
    a = as_tensor(a)
    return _record('sum', (a,), np.array(a.data.sum()), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def take_rows(table, indices):
    """
    Gather rows of a 2-d table; ``indices`` is an integer array of any shape.

    Raises:
        TokenIndexError: If an index is outside ``[0, rows)``.
    """
    table = as_tensor(table)
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise TokenIndexError(
            f"index out of range for table with {table.shape[0]} rows: "
            f"min {indices.min()}, max {indices.max()}"
        )

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _record('take_rows', (table,), table.data[indices], backward)


def rms_norm(x, scale=None, eps=DEFAULT_EPS):
    """
    RMS normalization over the last axis: x / sqrt(mean(x^2) + eps) * scale.

    ``scale=None`` gives the parameter-free variant. A zero row stays zero
    when eps > 0.
    """
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"rms_norm: input of shape {x.shape} has no feature axis")
    if eps < 0:
        raise ContractError(f"rms_norm: eps must be non-negative, got {eps}")
    d = x.shape[-1]
    rms = np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data / rms

    if scale is None:
        def backward(g):
            dot = np.mean(g * normed, axis=-1, keepdims=True)
            return ((g - normed * dot) / rms,)

        return _record('rms_norm', (x,), normed, backward)

    scale = as_tensor(scale)
    if scale.shape != (d,):
        raise DimensionError(f"rms_norm: scale of shape {scale.shape} does not match feature size {d}")

    def backward_scaled(g):
        g_normed = g * scale.data
        dot = np.mean(g_normed * normed, axis=-1, keepdims=True)
        grad_x = (g_normed - normed * dot) / rms
        grad_scale = (g * normed).reshape(-1, d).sum(axis=0)
        return grad_x, grad_scale

    return _record('rms_norm', (x, scale), normed * scale.data, backward_scaled)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(x):
    x = as_tensor(x)
    sig = _sigmoid(x.data)
    return _record(
        'silu', (x,), x.data * sig,
        lambda g: (g * sig * (1.0 + x.data * (1.0 - sig)),),
    )


def swiglu_mlp(x, w_gate, w_up, w_down):
    """(silu(x . w_gate) * (x . w_up)) . w_down"""
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down)


def softmax_rows(x):
    """
    Softmax over the last axis with max subtraction.

    Entries equal to -inf act as a mask and receive zero weight.

    Raises:
        MaskError: If a row has no finite entry.
    """
    x = as_tensor(x)
    row_max = np.max(x.data, axis=-1, keepdims=True)
    if np.any(np.isneginf(row_max)):
        raise MaskError("softmax_rows: a row is masked out entirely")
    exp = np.exp(x.data - row_max)
    probs = exp / exp.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = np.sum(g * probs, axis=-1, keepdims=True)
        return (probs * (g - inner),)

    return _record('softmax', (x,), probs, backward)


def cross_entropy_logits(logits, targets, weights=None):
    """
    Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    Args:
        logits: Tensor of shape (B, V)
        targets: Integer sequence of length B
        weights: Optional per-row weights; the loss is sum(w * nll) / sum(w),
            which masks rows with weight 0 out of both value and gradient

    Returns:
        A scalar Tensor

    Raises:
        TokenIndexError: If a target is outside [0, V).
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_logits expects (B, V) logits, got {logits.shape}")
    batch, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != batch:
        raise DimensionError(f"cross_entropy_logits: {targets.shape[0]} targets for {batch} rows")
    if batch and (targets.min() < 0 or targets.max() >= vocab):
        raise TokenIndexError(f"target out of range [0, {vocab})")
    if weights is None:
        weights = np.ones(batch)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    norm = weights.sum()
    if norm <= 0:
        raise ContractError("cross_entropy_logits: weights sum to zero")

    row_max = logits.data.max(axis=-1, keepdims=True)
    shifted = logits.data - row_max
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(batch)
    nll = -log_probs[rows, targets]
    value = np.array(np.dot(weights, nll) / norm)

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (grad * (weights / norm)[:, None] * g,)

    return _record('cross_entropy', (logits,), value, backward)
