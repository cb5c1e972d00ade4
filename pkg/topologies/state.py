from dataclasses import dataclass
from typing import Optional

from tensor_core.tensor import Tensor


@dataclass
class StreamState:
    """
    Hidden state entering sub-layer ``layer_index``.

    ``X`` is the bounded stream (the only stream for single-stream
    topologies) and ``Y`` the unbounded one. ``O`` and ``depth_scale`` are
    filled in once the sub-layer has run: ``O`` is the residual update it
    produced and ``depth_scale`` the factor applied to ``O`` on the X path.
    The last state of a trace has no update.
    """
    layer_index: int
    X: Tensor
    Y: Optional[Tensor] = None
    O: Optional[Tensor] = None
    depth_scale: float = 1.0

    @property
    def two_stream(self):
        return self.Y is not None
