import math


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at the last
    step (``total_steps - 1``)."""
    if total_steps <= 1:
        return lr_max
    t = min(max(step, 0), total_steps - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / (total_steps - 1)))
