"""Comparison methods (freezing, LayerDrop, progressive layer dropping) and
the two structural analyses: path-length gradient decomposition and
submodule counting."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .mechanism import DropDecisions, DropRates
from .model import ActivationCache, Model, backward, forward, loss_and_grad
from .tensor import Rng

KINDS = ("baseline", "dropbp", "freeze", "layerdrop", "pld")


@dataclass(frozen=True)
class PLDParams:
    """Keep probability ``1 - depth * (1 - theta_bar(t))`` with
    ``theta_bar(t) = floor + (1 - floor) * exp(-gamma * t)``."""

    floor: float = 0.5
    gamma: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.floor <= 1.0:
            raise ValueError(f"PLD floor must lie in [0, 1], got {self.floor}")
        if self.gamma < 0:
            raise ValueError("PLD gamma must be non-negative")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str = "baseline"
    p: float = 0.0
    pld: PLDParams = field(default_factory=PLDParams)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("skip rate must lie in [0, 1]")


# ------------------------------------------------------------------ freezing


def n_frozen(n_layers: int, p: float) -> int:
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return math.floor(n_layers * Fraction(p).limit_denominator(10**9))


def freeze_mask(n_layers: int, p: float) -> np.ndarray:
    """True for trainable layers; the lowest ``floor(n_layers * p)`` are frozen."""
    mask = np.ones(n_layers, dtype=bool)
    mask[: n_frozen(n_layers, p)] = False
    return mask


# ----------------------------------------------------------------- layerdrop


def layerdrop_decisions(rates: DropRates, iteration: int, rng: Rng, stream: str = "layerdrop") -> DropDecisions:
    """Bernoulli per layer; the caller skips these branches in forward AND backward."""
    u = rng.stream(stream, iteration).random(len(rates))
    return DropDecisions(u < rates.as_array(), iteration, stream)


def pld_keep_prob(depth_frac: float, iter_frac: float, params: PLDParams = PLDParams()) -> float:
    if not (0.0 <= depth_frac <= 1.0 and 0.0 <= iter_frac <= 1.0):
        raise ValueError("fractions must lie in [0, 1]")
    theta_bar = params.floor + (1.0 - params.floor) * math.exp(-params.gamma * iter_frac)
    return 1.0 - depth_frac * (1.0 - theta_bar)


def depth_fractions(n_layers: int) -> np.ndarray:
    return np.arange(1, n_layers + 1, dtype=np.float64) / n_layers


def _decay_mean(gamma: float, total_iters: int | None) -> float:
    """Average of exp(-gamma t) over the run (continuous if ``total_iters`` is None)."""
    if total_iters is None:
        return 1.0 if gamma == 0 else (1.0 - math.exp(-gamma)) / gamma
    t = np.arange(total_iters, dtype=np.float64) / total_iters
    return float(np.exp(-gamma * t).mean())


def pld_average_keep(n_layers: int, params: PLDParams, total_iters: int | None = None) -> float:
    """Run-averaged keep probability over layers and iterations."""
    e = _decay_mean(params.gamma, total_iters)
    mean_depth = float(depth_fractions(n_layers).mean())
    return 1.0 - mean_depth * (1.0 - params.floor) * (1.0 - e)


def pld_params_for_budget(
    n_layers: int, relative_flops: float, gamma: float = 5.0, total_iters: int | None = None
) -> PLDParams:
    """Choose the floor so the run-average keep probability equals ``relative_flops``."""
    e = _decay_mean(gamma, total_iters)
    mean_depth = float(depth_fractions(n_layers).mean())
    denom = mean_depth * (1.0 - e)
    if denom <= 0:
        raise ValueError("schedule cannot reach the budget with this gamma")
    floor = 1.0 - (1.0 - relative_flops) / denom
    if not 0.0 <= floor <= 1.0:
        raise ValueError(f"budget {relative_flops} unreachable with gamma={gamma} (floor {floor:.3f})")
    return PLDParams(floor, gamma)


def pld_rates(n_layers: int, iteration: int, total_iters: int, params: PLDParams) -> DropRates:
    t = iteration / total_iters
    keep = [pld_keep_prob(d, t, params) for d in depth_fractions(n_layers)]
    return DropRates(tuple(min(1.0, max(0.0, 1.0 - k)) for k in keep), 1.0 - float(np.mean(keep)), grid=None)


# ------------------------------------------------------------ path analysis


@dataclass(frozen=True)
class PathSample:
    k: int
    norm: float
    rep: int


@dataclass(frozen=True)
class PathReport:
    n_blocks: int
    samples: tuple[PathSample, ...]

    def mean_norm(self, k: int) -> float:
        vals = [s.norm for s in self.samples if s.k == k]
        return float(np.mean(vals)) if vals else float("nan")

    def ks(self) -> list[int]:
        return sorted({s.k for s in self.samples})

    def rows(self) -> list[dict]:
        out = []
        for k in self.ks():
            w = binomial_weight(self.n_blocks, k)
            m = self.mean_norm(k)
            out.append({"k": k, "mean_norm": m, "weight": float(w), "weighted_total": m * float(w)})
        return out


def binomial_weight(n: int, k: int) -> Fraction:
    return Fraction(math.comb(n, k), 2**n)


def _check_k(n: int, k_values) -> list[int]:
    ks = list(k_values)
    for k in ks:
        if not 0 <= k <= n:
            raise ValueError(f"path length {k} outside [0, {n}]")
    return ks


def path_gradient_analysis(model: Model, tokens, targets, k_values=None, reps: int = 100, rng: Rng | None = None, mask=None) -> PathReport:
    """Backward through the branches of ``k`` random blocks only (skip
    connections elsewhere) and record the input-gradient norm."""
    if reps < 1:
        raise ValueError("reps must be at least 1")
    n = model.config.n_layers
    ks = _check_k(n, range(n + 1) if k_values is None else k_values)
    rng = rng or Rng(0)
    cache = ActivationCache(n)
    logits = forward(model, tokens, None, cache)
    _, dlogits, _ = loss_and_grad(logits, targets, mask)
    samples = []
    for k in ks:
        gen = rng.stream("paths", k).generator
        for r in range(reps):
            chosen = set(gen.choice(n, size=k, replace=False).tolist())
            routes = ["branch" if i in chosen else "skip" for i in range(n)]
            g = backward(model, cache, None, dlogits, routes=routes)
            samples.append(PathSample(k, float(np.linalg.norm(g.input)), r))
    return PathReport(n, tuple(samples))


class LinearResidualNet:
    """``X_{l+1} = X_l + X_l W_l`` with loss ``<C, X_n>``: every residual path
    is a product of branch matrices, so the input gradient decomposes exactly
    into one term per subset of blocks."""

    def __init__(self, weights, readout):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.readout = np.asarray(readout, dtype=np.float64)

    @classmethod
    def random(cls, n_blocks: int, dim: int, rng: Rng, rows: int = 1, scale: float = 0.5):
        ws = [rng.stream("w", i).normal((dim, dim), scale) for i in range(n_blocks)]
        return cls(ws, rng.stream("c").normal((rows, dim)))

    @property
    def n_blocks(self) -> int:
        return len(self.weights)

    def forward(self, x):
        for w in self.weights:
            x = x + x @ w
        return x

    def loss(self, x) -> float:
        return float(np.sum(self.readout * self.forward(x)))

    def input_grad(self, routes=None) -> np.ndarray:
        """Gradient at the input; ``routes[l]`` in {"both", "skip", "branch"}."""
        routes = routes or ["both"] * self.n_blocks
        g = self.readout.copy()
        for w, route in zip(reversed(self.weights), reversed(routes)):
            gb = g @ w.T
            g = {"both": g + gb, "skip": g, "branch": gb}[route]
        return g

    def path_grads(self) -> dict[tuple[int, ...], np.ndarray]:
        """Input gradient of every path, keyed by the blocks it passes through."""
        out = {}
        for k in range(self.n_blocks + 1):
            for subset in itertools.combinations(range(self.n_blocks), k):
                routes = ["branch" if i in subset else "skip" for i in range(self.n_blocks)]
                out[subset] = self.input_grad(routes)
        return out


# ------------------------------------------------------------ submodule count


def submodule_depth(n_layers: int, p: float) -> int:
    """``floor(n_layers * (1 - p))``: layers trained under freezing, and the
    longest path DropBP trains in expectation."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return math.floor(n_layers * (1 - Fraction(p).limit_denominator(10**9)))


def submodule_count(n_layers: int, p: float, method: str) -> int:
    """Trainable submodules: ``2^d`` for freezing and ``sum_{i<=d} C(n, i)``
    for DropBP, with ``d = floor(n_layers * (1 - p))``."""
    d = submodule_depth(n_layers, p)
    if method == "freeze":
        return 2**d
    if method == "dropbp":
        return sum(math.comb(n_layers, i) for i in range(d + 1))
    raise ValueError(f"method must be 'freeze' or 'dropbp', got {method!r}")
