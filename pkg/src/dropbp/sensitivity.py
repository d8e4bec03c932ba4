"""Layer sensitivity from gradient-norm perturbation, and the greedy drop-rate allocator.

Sensitivity of layer ``l``::

    S_l = sum_i (||grad W_i|| - ||grad W_i^(l)||)^2

where ``i`` runs over every trainable parameter tensor and ``grad W_i^(l)`` is
the gradient obtained with only layer ``l`` dropped. The allocator then raises
rates in 0.1 steps, always on the layer that adds the least expected
sensitivity, until ``sum_i (1 - p_i) F_i <= (1 - p_avg) sum_i F_i``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .cost import backward_flops, layer_costs
from .mechanism import GRID_STEP, DropRates, WarmupSchedule
from .model import ActivationCache, Model, backward, forward, loss_and_grad
from .tensor import FlopsMeter, NumericError

GRID_TENTHS = 10


@dataclass(frozen=True)
class SensitivityVector:
    values: tuple[float, ...]
    batch_id: str | int | None = None
    iteration: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if any(v < 0 or not np.isfinite(v) for v in self.values):
            raise ValueError("sensitivities must be finite and non-negative")

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class FlopsProfile:
    """Per-layer backward FLOPs and the budget they imply at ``p_avg``."""

    flops: tuple[float, ...]
    p_avg: float

    def __post_init__(self):
        object.__setattr__(self, "flops", tuple(float(f) for f in self.flops))
        if any(f < 0 for f in self.flops):
            raise ValueError("layer FLOPs must be non-negative")

    @classmethod
    def from_config(cls, config, p_avg: float, batch_size: int = 1, terms: str = "all") -> "FlopsProfile":
        return cls(tuple(backward_flops(layer_costs(config, batch_size), terms)), p_avg)

    def __len__(self) -> int:
        return len(self.flops)

    @property
    def total(self) -> float:
        return float(sum(self.flops))

    @property
    def target(self) -> float:
        return (1.0 - self.p_avg) * self.total


def compute_sensitivities(
    model: Model,
    tokens,
    targets,
    mask=None,
    meter: FlopsMeter | None = None,
    batch_id=None,
    iteration: int | None = None,
) -> SensitivityVector:
    """One forward with every layer cached, then ``n_layers + 1`` backward
    passes over that cache (no drops, then each layer dropped alone).
    Parameters are not modified."""
    n = model.config.n_layers
    cache = ActivationCache(n)
    logits = forward(model, tokens, None, cache, meter)
    _, dlogits, _ = loss_and_grad(logits, targets, mask, meter)

    base = backward(model, cache, None, dlogits, meter).norms()
    values = []
    for layer in range(n):
        dropped = np.zeros(n, dtype=bool)
        dropped[layer] = True
        try:
            norms = backward(model, cache, dropped, dlogits, meter).norms()
        except NumericError as exc:
            raise NumericError(f"sensitivity of layer {layer}: {exc}") from exc
        s = sum((base[k] - norms[k]) ** 2 for k in base)
        if not np.isfinite(s):
            raise NumericError(f"non-finite sensitivity for layer {layer}")
        values.append(s)
    return SensitivityVector(tuple(values), batch_id, iteration)


def exact(x) -> Fraction:
    """Rational value of ``x``; floats are read at their shortest decimal form,
    so ``0.4`` means 2/5 rather than the binary value just above it."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    return Fraction(repr(float(x)))


def budget_satisfied(rates, F, p_avg) -> bool:
    """Exact check of ``sum_i (1 - p_i) F_i <= (1 - p_avg) sum_i F_i``."""
    rs = rates.rates if isinstance(rates, DropRates) else rates
    flops = [exact(f) for f in (F.flops if isinstance(F, FlopsProfile) else F)]
    keep = sum((1 - exact(p)) * f for p, f in zip(rs, flops))
    return keep <= (1 - exact(p_avg)) * sum(flops)


def _budget_met(tenths: list[int], flops: list[Fraction], limit: Fraction) -> bool:
    return sum((GRID_TENTHS - k) * f for k, f in zip(tenths, flops)) <= limit


def allocate(S, F, p_avg: float) -> DropRates:
    """Greedy 0.1-step allocation of per-layer drop rates.

    Each step raises the rate of the layer whose increment adds the least
    expected sensitivity ``0.1 * S_i``; ties go to the lowest current rate,
    then the lowest index, and layers at 1.0 are skipped. The budget test
    uses exact rational arithmetic (see :func:`exact`).
    """
    s = list(S.values if isinstance(S, SensitivityVector) else S)
    f = list(F.flops if isinstance(F, FlopsProfile) else F)
    if len(s) != len(f):
        raise ValueError(f"{len(s)} sensitivities but {len(f)} FLOPs entries")
    if any(v < 0 for v in s) or any(v < 0 for v in f):
        raise ValueError("sensitivities and FLOPs must be non-negative")
    p = exact(p_avg)
    if not 0 <= p <= 1:
        raise ValueError(f"p_avg must lie in [0, 1], got {p_avg}")
    flops = [exact(v) for v in f]
    target = (1 - p) * sum(flops)
    if target < 0:
        raise ValueError("infeasible budget: target FLOPs is negative")
    limit = GRID_TENTHS * target

    tenths = [0] * len(s)
    while not _budget_met(tenths, flops, limit):
        open_layers = [i for i in range(len(s)) if tenths[i] < GRID_TENTHS]
        if not open_layers:  # only reachable if the budget is unattainable
            raise ValueError("budget cannot be met even with every layer dropped")
        i = min(open_layers, key=lambda j: (s[j], tenths[j], j))
        tenths[i] += 1
    return DropRates(tuple(k / GRID_TENTHS for k in tenths), float(p_avg), GRID_STEP)


def added_sensitivity(rates, S) -> float:
    """Expected sensitivity removed by dropping: ``sum_i p_i S_i``."""
    p = rates.as_array() if isinstance(rates, DropRates) else np.asarray(rates, dtype=np.float64)
    s = S.as_array() if isinstance(S, SensitivityVector) else np.asarray(S, dtype=np.float64)
    return float(np.dot(p, s))


def maybe_reallocate(
    schedule: WarmupSchedule,
    iteration: int,
    model: Model,
    batch,
    p_avg: float,
    flops: FlopsProfile | None = None,
    meter: FlopsMeter | None = None,
    log=None,
    batch_id=None,
) -> DropRates | None:
    """At the warmup boundary (and only once) compute sensitivities on
    ``batch = (tokens, targets, mask)`` and return freshly allocated rates."""
    if not schedule.due(iteration):
        return None
    tokens, targets, mask = batch
    if flops is None:
        flops = FlopsProfile.from_config(model.config, p_avg, np.asarray(tokens).shape[0])
    sens = compute_sensitivities(model, tokens, targets, mask, meter, batch_id, iteration)
    rates = allocate(sens, flops, p_avg)
    schedule.reallocated = True
    if log is not None:
        log.event(
            "allocator",
            iteration=iteration,
            batch_id=batch_id,
            S=list(sens.values),
            F=list(flops.flops),
            p_avg=p_avg,
            rates=list(rates.rates),
            added_sensitivity=added_sensitivity(rates, sens),
        )
    return rates
