import math

from tensor_core.exceptions import ContractError


def cosine_lr(step, cfg):
    """
    Learning rate at ``step``: linear warmup from 0 to ``peak_lr``, then a
    cosine decay that ends at ``final_lr_factor * peak_lr`` on the last step.

    Args:
        step: 0 <= step <= cfg.total_steps
        cfg: TrainConfig

    Returns:
        The learning rate as a float
    """
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    floor = cfg.final_lr_factor
    return cfg.peak_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))
