"""Adam with decoupled weight decay and the one-cycle learning-rate schedule."""

import math

import numpy as np

from ssk.nn.params import AdamState, ParamStore

WARMUP_FRACTION = 0.4
DIV_FACTOR = 10.0
FINAL_DIV_FACTOR = 1e4


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.99),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> None:
    """
    Apply one AdamW update in place.

    Args:
        store: Parameters and their optimizer state
        grads: Gradient per trainable parameter name
        lr: Learning rate for this step
        betas: First and second moment decay
        weight_decay: Decoupled decay multiplied by lr

    Raises:
        ValueError: If any gradient is non-finite or names an unknown parameter
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise ValueError(f"Non-finite gradient for {name}")
        if not store.is_trainable(name):
            raise ValueError(f"Gradient for non-trainable entry {name}")

    beta1, beta2 = betas
    for name in sorted(grads):
        grad = grads[name]
        value = store.values[name]
        state = store.optimizer.get(name)
        if state is None:
            state = AdamState(m=np.zeros_like(value), v=np.zeros_like(value))
            store.optimizer[name] = state
        state.step += 1
        state.m = beta1 * state.m + (1.0 - beta1) * grad
        state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
        m_hat = state.m / (1.0 - beta1 ** state.step)
        v_hat = state.v / (1.0 - beta2 ** state.step)
        update = m_hat / (np.sqrt(v_hat) + eps)
        store.values[name] = value - lr * weight_decay * value - lr * update


def one_cycle_lr(step: int, total: int, lr_max: float) -> float:
    """Linear warm-up from lr_max/10 to lr_max over the first 40% of steps, then cosine decay."""
    if total <= 0:
        raise ValueError(f"total steps must be positive, got {total}")
    lr_start = lr_max / DIV_FACTOR
    lr_end = lr_start / FINAL_DIV_FACTOR
    warmup = max(int(round(WARMUP_FRACTION * total)), 1)
    step = min(max(step, 0), total)
    if step < warmup:
        return lr_start + (lr_max - lr_start) * step / warmup
    progress = (step - warmup) / max(total - warmup, 1)
    return lr_end + 0.5 * (lr_max - lr_end) * (1.0 + math.cos(math.pi * progress))
