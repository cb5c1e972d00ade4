"""
The training loop and its stability bookkeeping.

forward -> masked loss -> backward -> clip -> AdamW -> schedule, with a
MetricsRecord and a profile captured every ``eval_every`` steps and on the
last step.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from analysis.profiles import build_profile
from blocks.initialization import init_params
from tensor_core import ops
from tensor_core.exceptions import DivergenceError
from tensor_core.tensor import Tape
from topologies.wiring import model_forward

from .datasets import build_dataset, iter_batches, sample_batch
from .optim import AdamWState, adamw_step, clip_global_norm, global_grad_norm
from .schedule import cosine_lr

logger = logging.getLogger(__name__)

# Previous step losses needed before the spike rule is applied.
MIN_SPIKE_HISTORY = 10


class RunStatus(str, Enum):
    CONVERGED = 'converged'
    DIVERGED = 'diverged'
    SPIKE_DETECTED = 'spike_detected'


@dataclass
class MetricsRecord:
    step: int
    loss: float
    lr: float
    grad_norm: float
    clip_factor: float
    eval_acc: Optional[float] = None
    eval_loss: Optional[float] = None


@dataclass
class RunOutcome:
    status: RunStatus
    final_loss: float
    metrics: list = field(default_factory=list)
    profiles: list = field(default_factory=list)
    diverged_step: Optional[int] = None
    spike_steps: list = field(default_factory=list)
    eval_acc: Optional[float] = None
    eval_loss: Optional[float] = None
    initial_loss: Optional[float] = None
    params: object = None
    message: str = ''


def batch_loss(model_cfg, params, batch):
    """
    Masked next-token loss of one batch.

    Returns:
        ``(loss, logits, trace)``
    """
    logits, trace = model_forward(model_cfg, params, batch.inputs)
    b, t, vocab = logits.shape
    flat = ops.reshape(logits, (b * t, vocab))
    loss = ops.cross_entropy_logits(flat, batch.targets.reshape(-1), batch.weights.reshape(-1))
    return loss, logits, trace


def evaluate(model_cfg, params, split, batch_size):
    """
    Masked accuracy and loss over a whole split; ``(None, None)`` when empty.
    """
    if len(split) == 0:
        return None, None
    correct = 0.0
    nll = 0.0
    total = 0.0
    for batch in iter_batches(split, batch_size):
        logits, _ = model_forward(model_cfg, params, batch.inputs)
        weights = batch.weights
        count = weights.sum()
        if count == 0:
            continue
        loss = ops.cross_entropy_logits(
            ops.reshape(logits, (-1, logits.shape[-1])), batch.targets.reshape(-1), weights.reshape(-1)
        )
        nll += loss.item() * count
        correct += float(np.sum((np.argmax(logits.data, axis=-1) == batch.targets) * weights))
        total += count
    if total == 0:
        return None, None
    return correct / total, nll / total


def _median(values):
    return float(np.median(np.fromiter(values, dtype=np.float64)))


def train(model_cfg, train_cfg, lr_fn=None, params=None):
    """
    Run one training job to completion or divergence.

    Args:
        model_cfg: ModelConfig
        train_cfg: TrainConfig
        lr_fn: Optional ``step -> lr`` replacing the cosine schedule
        params: Optional initial ParamSet; freshly initialized otherwise

    Returns:
        RunOutcome. Divergence is reported through the status, never raised.
    """
    if lr_fn is None:
        def lr_fn(step):
            return cosine_lr(step, train_cfg)

    params = params if params is not None else init_params(model_cfg)
    dataset = build_dataset(train_cfg.dataset, model_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    opt_state = AdamWState()

    outcome = RunOutcome(status=RunStatus.CONVERGED, final_loss=float('nan'), params=params)
    history = deque(maxlen=train_cfg.spike_window)
    above_threshold = 0
    open_spike = None  # (onset step, threshold, onset loss)
    name = f'{model_cfg.topology.value}@{train_cfg.peak_lr:g}'

    def diverge(step, message):
        outcome.status = RunStatus.DIVERGED
        outcome.diverged_step = step
        outcome.message = message
        logger.error("[%s] Diverged at step %s: %s", name, step, message)
        return outcome

    for step in range(1, train_cfg.total_steps + 1):
        batch = sample_batch(dataset.train, train_cfg.batch_size, rng)
        params.zero_grad()
        try:
            with Tape() as tape:
                loss, _, trace = batch_loss(model_cfg, params, batch)
            value = loss.item()
            outcome.final_loss = value
            if not np.isfinite(value):
                return diverge(step, f"loss is {value}")
            if outcome.initial_loss is None:
                outcome.initial_loss = value
            tape.backward(loss)
            grad_norm = global_grad_norm(params)
            if not np.isfinite(grad_norm):
                return diverge(step, f"gradient norm is {grad_norm}")

            recording = step % train_cfg.eval_every == 0 or step == train_cfg.total_steps
            if recording:
                rows = build_profile(trace, params)
            factor = clip_global_norm(params, train_cfg.clip_norm) if train_cfg.clip_norm > 0 else 1.0
            lr = lr_fn(step)
            adamw_step(params, opt_state, train_cfg.hyper(lr), step)
        except DivergenceError as exc:
            return diverge(step, str(exc))

        # A spike counts once a later step loss is back under its onset threshold.
        if open_spike is not None:
            if value <= open_spike[1]:
                outcome.spike_steps.append(open_spike[0])
                logger.warning("[%s] Loss spike at step %s recovered at step %s", name, open_spike[0], step)
                open_spike = None
        elif len(history) >= MIN_SPIKE_HISTORY and value > train_cfg.spike_factor * _median(history):
            open_spike = (step, train_cfg.spike_factor * _median(history), value)
            logger.warning("[%s] Loss spike at step %s: %.4g", name, step, value)
        history.append(value)

        if not recording:
            continue
        try:
            eval_acc, eval_loss = evaluate(model_cfg, params, dataset.eval, train_cfg.batch_size)
        except DivergenceError as exc:
            return diverge(step, str(exc))
        record = MetricsRecord(step, value, lr, grad_norm, factor, eval_acc, eval_loss)
        outcome.metrics.append(record)
        outcome.profiles.append((step, rows))
        outcome.eval_acc, outcome.eval_loss = eval_acc, eval_loss
        logger.info(
            "[%s] step %s loss %.4f lr %.3g grad_norm %.3g eval_acc %s",
            name, step, value, lr, grad_norm, 'n/a' if eval_acc is None else f'{eval_acc:.3f}',
        )

        if value > train_cfg.divergence_factor * outcome.initial_loss:
            above_threshold += 1
            if above_threshold >= train_cfg.divergence_patience:
                return diverge(
                    step,
                    f"loss above {train_cfg.divergence_factor}x the initial loss "
                    f"for {above_threshold} consecutive records",
                )
        else:
            above_threshold = 0

    if open_spike is not None:
        onset, threshold, onset_loss = open_spike
        if onset_loss > train_cfg.divergence_factor * outcome.initial_loss:
            return diverge(
                onset, f"loss spike to {onset_loss:.4g} never fell back under {threshold:.4g}"
            )
        logger.info("[%s] Loss rise at step %s did not recover; not counted as a spike", name, onset)
    if outcome.spike_steps:
        outcome.status = RunStatus.SPIKE_DETECTED
    logger.info("[%s] Finished: %s, final loss %.4f", name, outcome.status.value, outcome.final_loss)
    return outcome
