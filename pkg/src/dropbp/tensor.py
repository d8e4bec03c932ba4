"""Dense float64 kernels with hand-written backward passes and FLOPs metering.

Tensors are plain ``numpy.ndarray`` values (row-major, float64). Every kernel
comes as a ``*_forward`` / ``*_backward`` pair; nothing here records a graph.
Each kernel reports its cost to a :class:`FlopsMeter` under a category so the
cost model can reconcile against it term by term.

FLOPs convention: a multiply-accumulate is 2 flops (``2*m*k*n`` per matmul),
every other elementwise operation is 1 flop per element.
"""
from __future__ import annotations

import zlib
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

Tensor = np.ndarray

DTYPE = np.float64
LN_EPS = 1e-5
GELU_C = float(np.sqrt(2.0 / np.pi))

# Per-element flop counts of the non-matmul kernels. The cost model imports
# these so that analytic totals match the meter exactly.
LN_FW_PER_ELEM = 7
LN_FW_PER_ROW = 2
LN_BW_PER_ELEM = 10
AFFINE_FW_PER_ELEM = 2
AFFINE_BW_PER_ELEM = 4
SOFTMAX_FW_PER_ELEM = 5
SOFTMAX_BW_PER_ELEM = 4
GELU_FW_PER_ELEM = 9
GELU_BW_PER_ELEM = 12
CE_FW_PER_ELEM = 5
CE_FW_PER_ROW = 2
CE_BW_PER_ELEM = 2

FORWARD_CATEGORIES = frozenset({"out", "adapter_out", "score_fw", "elem_fw"})
BACKWARD_CATEGORIES = frozenset(
    {"grad", "param", "adapter_grad", "adapter_param", "score_bw", "elem_bw"}
)


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class NumericError(FloatingPointError):
    """A NaN or infinity appeared where a finite value is required."""


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


@dataclass
class FlopsMeter:
    """Accumulates forward and backward flops, broken down by scope and category.

    ``scope`` is set by the caller (the network uses ``"L{i}"`` for droppable
    layers and ``"offblock"`` for everything else).
    """

    forward: int = 0
    backward: int = 0
    detail: Counter = field(default_factory=Counter)
    scope: str = "offblock"

    def add(self, category: str, flops: int) -> None:
        flops = int(flops)
        if category in FORWARD_CATEGORIES:
            self.forward += flops
        elif category in BACKWARD_CATEGORIES:
            self.backward += flops
        else:
            raise KeyError(f"unknown flops category {category!r}")
        self.detail[(self.scope, category)] += flops

    @contextmanager
    def scoped(self, scope: str) -> Iterator["FlopsMeter"]:
        prev, self.scope = self.scope, scope
        try:
            yield self
        finally:
            self.scope = prev

    @property
    def total(self) -> int:
        return self.forward + self.backward

    def scope_total(self, scope: str, categories=None) -> int:
        return sum(
            v
            for (s, c), v in self.detail.items()
            if s == scope and (categories is None or c in categories)
        )

    def block_total(self, categories=None) -> int:
        return sum(
            v
            for (s, c), v in self.detail.items()
            if s.startswith("L") and (categories is None or c in categories)
        )

    def snapshot(self) -> tuple[int, int]:
        return self.forward, self.backward


def _meter(meter: FlopsMeter | None, category: str, flops: int) -> None:
    if meter is not None:
        meter.add(category, flops)


def _key_to_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("stream keys must be non-negative")
        return int(k)
    return zlib.crc32(str(k).encode("utf-8"))


class Rng:
    """Seeded generator with keyed, independent child streams.

    ``Rng(7).stream("drop", 12)`` always yields the same PCG64 stream no
    matter what else was drawn before, which is what makes per-iteration
    drop decisions a pure function of ``(seed, iteration)``.
    """

    def __init__(self, seed: int, key: tuple = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.key = tuple(key)
        entropy = [self.seed, *(_key_to_int(k) for k in self.key)]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def stream(self, *key) -> "Rng":
        return Rng(self.seed, self.key + key)

    def normal(self, shape, std: float = 1.0) -> Tensor:
        return self.generator.normal(0.0, std, size=shape).astype(DTYPE)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> Tensor:
        return self.generator.uniform(low, high, size=shape).astype(DTYPE)

    def random(self, n: int) -> Tensor:
        return self.generator.random(n)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"


# --------------------------------------------------------------------- matmul


def _matmul_dims(a: Tensor, b: Tensor) -> tuple[int, int, int, int]:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    m, k = a.shape[-2:]
    k2, n = b.shape[-2:]
    if k != k2:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"batch dimensions differ: {a.shape} @ {b.shape}") from exc
    return int(np.prod(batch, dtype=np.int64)), m, k, n


def matmul_flops(batch: int, m: int, k: int, n: int) -> int:
    return 2 * batch * m * k * n


def matmul_forward(a: Tensor, b: Tensor, meter: FlopsMeter | None = None, category: str = "out") -> Tensor:
    """``a @ b`` with optional leading batch dimensions; meters ``2*m*k*n``."""
    batch, m, k, n = _matmul_dims(a, b)
    _meter(meter, category, matmul_flops(batch, m, k, n))
    return np.matmul(a, b)


def _reduce_to(grad: Tensor, shape: tuple) -> Tensor:
    # sum a broadcast gradient back onto the operand's shape
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    g = grad.sum(axis=tuple(range(lead))) if lead > 0 else grad
    return g.reshape(shape)


def matmul_backward(
    grad_out: Tensor,
    a: Tensor,
    b: Tensor,
    meter: FlopsMeter | None = None,
    need_a: bool = True,
    need_b: bool = True,
    categories: tuple[str, str] = ("grad", "param"),
) -> tuple[Tensor | None, Tensor | None]:
    """Gradients of ``a @ b``: ``grad_out @ b.T`` and ``a.T @ grad_out``.

    Each requested product costs the same ``2*m*k*n`` as the forward pass.
    A weight that is frozen passes ``need_b=False`` and costs nothing.
    """
    batch, m, k, n = _matmul_dims(a, b)
    if grad_out.shape[-2:] != (m, n):
        raise ShapeError(f"grad_out {grad_out.shape} does not match forward ({m}, {n})")
    ga = gb = None
    if need_a:
        _meter(meter, categories[0], matmul_flops(batch, m, k, n))
        ga = _reduce_to(np.matmul(grad_out, np.swapaxes(b, -1, -2)), a.shape)
    if need_b:
        _meter(meter, categories[1], matmul_flops(batch, m, k, n))
        gb = _reduce_to(np.matmul(np.swapaxes(a, -1, -2), grad_out), b.shape)
    return ga, gb


# ----------------------------------------------------------------- layer norm


@dataclass
class LayerNormCache:
    xhat: Tensor
    rstd: Tensor

    @property
    def nbytes(self) -> int:
        return self.xhat.nbytes + self.rstd.nbytes


def layer_norm_forward(
    x: Tensor, gamma: Tensor, beta: Tensor, meter: FlopsMeter | None = None, eps: float = LN_EPS
) -> tuple[Tensor, LayerNormCache]:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params must have shape ({d},)")
    rows = x.size // d
    _meter(meter, "elem_fw", LN_FW_PER_ELEM * x.size + LN_FW_PER_ROW * rows)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, LayerNormCache(xhat, rstd)


def layer_norm_backward(
    grad_out: Tensor, cache: LayerNormCache, gamma: Tensor, meter: FlopsMeter | None = None
) -> tuple[Tensor, Tensor, Tensor]:
    xhat, rstd = cache.xhat, cache.rstd
    _meter(meter, "elem_bw", LN_BW_PER_ELEM * xhat.size)
    lead = tuple(range(grad_out.ndim - 1))
    dgamma = (grad_out * xhat).sum(axis=lead)
    dbeta = grad_out.sum(axis=lead)
    dxhat = grad_out * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def affine_forward(x: Tensor, gamma: Tensor, beta: Tensor, meter: FlopsMeter | None = None) -> Tensor:
    """The normalisation-free stand-in for layer norm used by linear toy nets."""
    _meter(meter, "elem_fw", AFFINE_FW_PER_ELEM * x.size)
    return x * gamma + beta


def affine_backward(
    grad_out: Tensor, x: Tensor, gamma: Tensor, meter: FlopsMeter | None = None
) -> tuple[Tensor, Tensor, Tensor]:
    _meter(meter, "elem_bw", AFFINE_BW_PER_ELEM * x.size)
    lead = tuple(range(grad_out.ndim - 1))
    return grad_out * gamma, (grad_out * x).sum(axis=lead), grad_out.sum(axis=lead)


# -------------------------------------------------------------------- softmax


def softmax_forward(x: Tensor, meter: FlopsMeter | None = None, category: str = "elem_fw") -> Tensor:
    _meter(meter, category, SOFTMAX_FW_PER_ELEM * x.size)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(
    grad_out: Tensor, y: Tensor, meter: FlopsMeter | None = None, category: str = "elem_bw"
) -> Tensor:
    _meter(meter, category, SOFTMAX_BW_PER_ELEM * y.size)
    return y * (grad_out - (grad_out * y).sum(axis=-1, keepdims=True))


# ----------------------------------------------------------------------- gelu


def gelu_forward(x: Tensor, meter: FlopsMeter | None = None) -> Tensor:
    """tanh-approximated GELU."""
    _meter(meter, "elem_fw", GELU_FW_PER_ELEM * x.size)
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x * x * x)))


def gelu_backward(grad_out: Tensor, x: Tensor, meter: FlopsMeter | None = None) -> Tensor:
    _meter(meter, "elem_bw", GELU_BW_PER_ELEM * x.size)
    t = np.tanh(GELU_C * (x + 0.044715 * x * x * x))
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return grad_out * (0.5 * (1.0 + t) + 0.5 * x * dt)


# ------------------------------------------------------------------ embedding


def embedding_forward(ids: np.ndarray, table: Tensor, meter: FlopsMeter | None = None) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    return table[ids]


def embedding_backward(
    grad_out: Tensor, ids: np.ndarray, vocab_size: int, meter: FlopsMeter | None = None
) -> Tensor:
    _meter(meter, "elem_bw", grad_out.size)
    d = grad_out.shape[-1]
    g = np.zeros((vocab_size, d), dtype=grad_out.dtype)
    np.add.at(g, np.asarray(ids).reshape(-1), grad_out.reshape(-1, d))
    return g


# -------------------------------------------------------------- cross entropy


def cross_entropy_forward(
    logits: Tensor,
    targets: np.ndarray,
    mask: np.ndarray | None = None,
    meter: FlopsMeter | None = None,
) -> tuple[float, Tensor]:
    """Mean negative log-likelihood over unmasked positions.

    Returns the loss and the softmax probabilities, which the backward reads.
    """
    check_finite(logits, "logits")
    V = logits.shape[-1]
    flat = logits.reshape(-1, V)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"targets {np.shape(targets)} do not match logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise IndexError("target id out of range")
    w = np.ones(t.shape[0]) if mask is None else np.asarray(mask, dtype=DTYPE).reshape(-1)
    count = w.sum()
    if count <= 0:
        raise ValueError("cross entropy over an empty target set")
    _meter(meter, "elem_fw", CE_FW_PER_ELEM * flat.size + CE_FW_PER_ROW * flat.shape[0])
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(t.shape[0]), t]
    probs = np.exp(z - lse[:, None])
    return float((nll * w).sum() / count), probs.reshape(logits.shape)


def cross_entropy_backward(
    probs: Tensor,
    targets: np.ndarray,
    mask: np.ndarray | None = None,
    meter: FlopsMeter | None = None,
) -> Tensor:
    V = probs.shape[-1]
    flat = probs.reshape(-1, V)
    t = np.asarray(targets).reshape(-1)
    w = np.ones(t.shape[0]) if mask is None else np.asarray(mask, dtype=DTYPE).reshape(-1)
    _meter(meter, "elem_bw", CE_BW_PER_ELEM * flat.size)
    g = flat.copy()
    g[np.arange(t.shape[0]), t] -= 1.0
    g *= (w / w.sum())[:, None]
    return g.reshape(probs.shape)
