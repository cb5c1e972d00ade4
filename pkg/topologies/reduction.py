"""
Special-case reductions of canonical SiameseNorm.

Zeroing every LN^X scale (and the bounded-stream gate) removes the bounded
stream and leaves a Pre-Norm network running on the Y-stream; zeroing every
LN^Y scale and the final LN leaves a Post-Norm network on the X-stream.
"""
import dataclasses
import re

from tensor_core.exceptions import ContractError

from .kinds import Reduction, TopologyKind

_LN_X = re.compile(r'^layer\.\d+\.ln_x\.scale$')
_LN_Y = re.compile(r'^layer\.\d+\.ln_y\.scale$')


def _check_canonical(params):
    config = params.config
    if config is None or config.topology != TopologyKind.SIAMESE_CANONICAL:
        raise ContractError("reductions apply to canonical SiameseNorm parameters only")
    if config.fused_input_norm or config.depth_scaling:
        raise ContractError("reductions need fused_input_norm and depth_scaling switched off")
    return config


def apply_reduction(params, target):
    """
    Return a copy of ``params`` with the scales of one stream zeroed.

    Raises:
        ContractError: If ``params`` do not belong to a canonical SiameseNorm
            model without fused-input normalization and depth scaling.
    """
    _check_canonical(params)
    target = Reduction(target)
    reduced = params.copy()
    for param in reduced:
        if target == Reduction.TO_PRE_NORM:
            zero = bool(_LN_X.match(param.name)) or param.name == 'embed.x_gate'
        else:
            zero = bool(_LN_Y.match(param.name)) or param.name == 'final.ln.scale'
        if zero:
            param.data = param.data * 0.0
    return reduced


def reference_params(params, target):
    """
    Build the single-stream model a reduction is equivalent to, sharing
    every branch weight with ``params``.

    ToPreNorm maps LN^Y_i to the Pre-Norm LN_i and keeps LN_final; ToPostNorm
    maps LN^X_i to the Post-Norm LN_i and drops the Y-side scales.
    """
    config = _check_canonical(params)
    target = Reduction(target)
    if target == Reduction.TO_PRE_NORM:
        ref_config = dataclasses.replace(config, topology=TopologyKind.PRE_NORM)
        keep_stream, drop_stream = '.ln_y.', '.ln_x.'
        drop = {'embed.x_gate'}
    else:
        ref_config = dataclasses.replace(config, topology=TopologyKind.POST_NORM)
        keep_stream, drop_stream = '.ln_x.', '.ln_y.'
        drop = {'embed.x_gate', 'final.ln.scale'}

    def rename(name):
        if name in drop or drop_stream in name:
            return None
        return name.replace(keep_stream, '.ln.')

    return ref_config, params.renamed(rename, config=ref_config)
