"""AdamW with decoupled weight decay, and cosine annealing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DROP_POLICIES = ("decay", "zero", "skip")


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: dict,
    grads: dict,
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    skipped=(),
    drop_policy: str = "decay",
) -> None:
    """In-place update of every parameter named in ``grads``.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``.
    Names in ``skipped`` had no gradient this step (their layer was dropped):

    * ``"decay"``: moments decay as for a zero gradient and weight decay
      applies, but the moment step is not taken, so with ``wd = 0`` the
      parameter does not move;
    * ``"zero"``: treated exactly like a zero gradient (moments keep pushing);
    * ``"skip"``: parameter and moments are left untouched.

    Parameters absent from ``grads`` (frozen) are never touched.
    """
    if drop_policy not in DROP_POLICIES:
        raise ValueError(f"drop_policy must be one of {DROP_POLICIES}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    skipped = set(skipped)
    for name, g in grads.items():
        theta = params[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {theta.shape}")
        dropped = name in skipped
        if dropped and drop_policy == "skip":
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        v *= b2
        if not dropped:
            m += (1.0 - b1) * g
            v += (1.0 - b2) * g * g
        if weight_decay:
            theta -= lr * weight_decay * theta
        if dropped and drop_policy == "decay":
            continue
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def cosine_lr(iteration: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * iteration / total))
