"""
Dense float64 tensors and the define-by-run tape that differentiates them.

A Tape is activated with a ``with`` block. Every operation from
``tensor_core.ops`` executed inside the block whose inputs are tracked
(parameters or outputs of earlier recorded operations) is appended to the
tape together with its local gradient rule. ``Tape.backward`` then walks the
recorded operations in exact reverse order.

The active tape lives in a context variable, so threads never see each
other's tapes.
"""
import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError

_active_tape = contextvars.ContextVar('normlab_active_tape', default=None)


def active_tape():
    """Return the tape operations are currently recorded on, or None."""
    return _active_tape.get()


class Tensor:
    """
    A dense n-dimensional array of 64-bit floats.

    ``grad`` holds the adjoint after a backward pass as a numpy array of the
    same shape. Intermediate tensors keep their adjoint until the next
    backward pass on the same tape, which is what lets the analysis code read
    the adjoint of every stream state.
    """

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tracked(self):
        return self.requires_grad or self.node_id is not None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, grad):
        if grad.shape != self.data.shape:
            raise DimensionError(
                f"gradient of shape {grad.shape} does not match tensor of shape {self.shape}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"


class Parameter(Tensor):
    """
    A learnable leaf tensor with a hierarchical name such as
    ``layer.3.ln_x.scale``. Its gradient starts at zero and accumulates
    across backward passes until ``zero_grad`` is called.
    """

    def __init__(self, name, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(value):
    """Wrap arrays and scalars as untracked tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class Node:
    """One recorded operation."""
    op: str
    inputs: Sequence[Tensor]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
    Ordered record of operations for one forward pass.

    Usage::

        with Tape() as tape:
            logits, trace = model_forward(config, params, tokens)
            loss = ops.cross_entropy_logits(...)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward):
        """Append an operation; inputs must already be on this tape or be leaves."""
        output.node_id = len(self.nodes)
        self.nodes.append(Node(op=op, inputs=tuple(inputs), output=output, backward=backward))
        return output

    def backward(self, loss, adjoint=1.0):
        """
        Propagate ``adjoint`` from a scalar loss back to every tracked input.

        Parameter gradients accumulate across calls; adjoints of intermediate
        tensors are recomputed from scratch on every call.

        Raises:
            ContractError: If the loss is not a scalar output of this tape.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None or loss.node_id >= len(self.nodes) or self.nodes[loss.node_id].output is not loss:
            raise ContractError("loss was not produced by this tape")

        for node in self.nodes:
            node.output.grad = None
        loss.grad = np.full(loss.data.shape, float(adjoint))

        for node in reversed(self.nodes[:loss.node_id + 1]):
            upstream = node.output.grad
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not tensor.tracked:
                    continue
                tensor.accumulate_grad(grad)
