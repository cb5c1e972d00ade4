"""
Logit lens on the two final streams.

Both X_N and Y_N go through the same RMSNorm (scale-free unless a shared
scale is passed) and the unembedding; the greedy prediction of each stream
is then compared with the prediction of the fused output.
"""
from dataclasses import asdict, dataclass

import numpy as np

from tensor_core import ops
from tensor_core.exceptions import ContractError, DimensionError


@dataclass(frozen=True)
class LensResult:
    match_X: float
    match_Y: float
    divergent_align_X: float
    divergent_align_Y: float
    positions: int
    divergent_positions: int

    def to_dict(self):
        return asdict(self)


def _as_array(value):
    return value.data if hasattr(value, 'data') else np.asarray(value, dtype=np.float64)


def lens_predictions(hidden, unembed, ln_final=None, eps=ops.DEFAULT_EPS):
    """Greedy token per position after the shared normalization."""
    scale = _as_array(ln_final) if ln_final is not None else None
    normed = ops.rms_norm(_as_array(hidden), scale, eps).data
    return np.argmax(normed @ _as_array(unembed), axis=-1)


def logit_lens_match(trace_final, fused_logits, ln_final, unembed, tokens, mask=None, eps=ops.DEFAULT_EPS):
    """
    Compare per-stream greedy predictions with the fused prediction.

    Args:
        trace_final: ``(X_N, Y_N)`` of shape (B, T, d) each
        fused_logits: Logits of the full model, shape (B, T, V)
        ln_final: Shared normalization scale, or None for the scale-free norm
        unembed: Unembedding matrix (d, V)
        tokens: Input tokens (B, T); fixes the evaluated positions
        mask: Optional (B, T) boolean selection of positions to score

    Returns:
        LensResult with match fractions over all scored positions and
        alignment fractions over the positions where the streams disagree.

    Raises:
        ContractError: If there is no position to score.
    """
    x_final, y_final = (_as_array(t) for t in trace_final)
    logits = _as_array(fused_logits)
    tokens = np.asarray(tokens)
    if tokens.size == 0 or x_final.size == 0:
        raise ContractError("logit_lens_match needs at least one position")
    if x_final.shape != y_final.shape or x_final.shape[:2] != tokens.shape or logits.shape[:2] != tokens.shape:
        raise DimensionError(
            f"stream shapes {x_final.shape}, {y_final.shape}, logits {logits.shape} "
            f"and tokens {tokens.shape} disagree"
        )
    selected = np.ones(tokens.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not selected.any():
        raise ContractError("logit_lens_match: the position mask selects nothing")

    fused = np.argmax(logits, axis=-1)[selected]
    pred_x = lens_predictions(x_final, unembed, ln_final, eps)[selected]
    pred_y = lens_predictions(y_final, unembed, ln_final, eps)[selected]

    divergent = pred_x != pred_y
    n_div = int(divergent.sum())
    if n_div:
        align_x = float(np.mean(pred_x[divergent] == fused[divergent]))
        align_y = float(np.mean(pred_y[divergent] == fused[divergent]))
    else:
        align_x = align_y = 0.0
    return LensResult(
        match_X=float(np.mean(pred_x == fused)),
        match_Y=float(np.mean(pred_y == fused)),
        divergent_align_X=align_x,
        divergent_align_Y=align_y,
        positions=int(fused.size),
        divergent_positions=n_div,
    )
