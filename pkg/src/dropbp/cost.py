"""Closed-form FLOPs and activation-memory accounting.

Per droppable layer the backward pass splits into input-gradient work
(``f_grad``), parameter-gradient work (``f_param``) and the terms that are
neither (attention score products, elementwise kernels, adapters). A dropped
layer still pays its forward cost and nothing else, so with rates ``p_i``::

    F_T = sum_i [ fw_i + (1 - p_i) * bw_i ] + off-block fw + off-block bw

For the linear maps alone ``f_out == f_grad`` always, and ``f_param`` equals
them in full fine-tuning and is zero for frozen base weights, which gives the
block-level reduction ratios ``(2/3) p`` (full) and ``(1/2) p`` (peft).

The byte model lists exactly the tensors the backward pass reads, so it can be
checked for equality against a live :class:`~dropbp.model.ActivationCache`.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import ClassVar

import numpy as np

from .mechanism import DropRates
from .model import ModelConfig
from .tensor import (
    CE_BW_PER_ELEM,
    CE_FW_PER_ELEM,
    CE_FW_PER_ROW,
    GELU_BW_PER_ELEM,
    GELU_FW_PER_ELEM,
    LN_BW_PER_ELEM,
    LN_FW_PER_ELEM,
    LN_FW_PER_ROW,
    SOFTMAX_BW_PER_ELEM,
    SOFTMAX_FW_PER_ELEM,
)

FLOAT_BYTES = 8
INDEX_BYTES = 8

# which meter categories make up forward / backward for each accounting level
TERMS = {
    "linear": (("out",), ("grad", "param")),
    "matmul": (
        ("out", "adapter_out", "score_fw"),
        ("grad", "param", "adapter_grad", "adapter_param", "score_bw"),
    ),
    "all": (
        ("out", "adapter_out", "score_fw", "elem_fw"),
        ("grad", "param", "adapter_grad", "adapter_param", "score_bw", "elem_bw"),
    ),
}


@dataclass(frozen=True)
class LayerCost:
    f_out: int = 0
    f_grad: int = 0
    f_param: int = 0
    adapter_out: int = 0
    adapter_grad: int = 0
    adapter_param: int = 0
    score_fw: int = 0
    score_bw: int = 0
    elem_fw: int = 0
    elem_bw: int = 0
    activation_bytes: int = 0

    _CATEGORY: ClassVar[dict[str, str]] = {
        "out": "f_out", "grad": "f_grad", "param": "f_param",
        "adapter_out": "adapter_out", "adapter_grad": "adapter_grad",
        "adapter_param": "adapter_param", "score_fw": "score_fw",
        "score_bw": "score_bw", "elem_fw": "elem_fw", "elem_bw": "elem_bw",
    }

    def by_category(self) -> dict[str, int]:
        return {cat: getattr(self, attr) for cat, attr in self._CATEGORY.items()}

    def forward(self, terms: str = "all") -> int:
        cats = self.by_category()
        return sum(cats[c] for c in TERMS[terms][0])

    def backward(self, terms: str = "all") -> int:
        cats = self.by_category()
        return sum(cats[c] for c in TERMS[terms][1])

    def total(self, terms: str = "all") -> int:
        return self.forward(terms) + self.backward(terms)

    def __add__(self, other: "LayerCost") -> "LayerCost":
        return LayerCost(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})


def _linear(m: int, din: int, dout: int, cfg: ModelConfig, base_trainable: bool) -> dict[str, int]:
    c = dict(f_out=2 * m * din * dout, f_grad=2 * m * din * dout,
             f_param=2 * m * din * dout if base_trainable else 0)
    if cfg.peft:
        r = cfg.adapter_rank
        c.update(
            adapter_out=2 * m * din * r + 2 * m * r * dout,
            adapter_grad=2 * m * dout * r + 2 * m * r * din,
            adapter_param=2 * m * r * dout + 2 * m * din * r,
            elem_fw=2 * m * dout,
            elem_bw=m * dout + m * din,
        )
    return c


def _accumulate(parts) -> LayerCost:
    total = {}
    for part in parts:
        for k, v in part.items():
            total[k] = total.get(k, 0) + v
    return LayerCost(**total)


def _check(config: ModelConfig) -> None:
    if config.linear:
        raise ValueError("the cost model covers the standard (nonlinear) network only")


def attn_cost(config: ModelConfig, batch_size: int = 1, seq_len: int | None = None) -> LayerCost:
    _check(config)
    T = seq_len or config.seq_len
    B, d, H, dh = batch_size, config.d_model, config.n_heads, config.d_head
    m = B * T
    base = not config.peft
    r = config.adapter_rank if config.peft else 0
    sq = B * H * T * T
    parts = [_linear(m, d, d, config, base) for _ in range(4)]
    parts.append(dict(
        score_fw=2 * (2 * B * H * T * dh * T),
        score_bw=4 * (2 * B * H * T * dh * T),
        elem_fw=LN_FW_PER_ELEM * m * d + LN_FW_PER_ROW * m  # layer norm
        + 2 * sq + SOFTMAX_FW_PER_ELEM * sq  # scale+mask, softmax
        + m * d,  # residual add
        elem_bw=LN_BW_PER_ELEM * m * d
        + SOFTMAX_BW_PER_ELEM * sq + sq  # softmax, scale
        + 2 * m * d  # summing the q/k/v input gradients
        + m * d,  # residual add
        activation_bytes=FLOAT_BYTES * (6 * m * d + m + sq + 4 * m * r),
    ))
    return _accumulate(parts)


def ffn_cost(config: ModelConfig, batch_size: int = 1, seq_len: int | None = None) -> LayerCost:
    _check(config)
    T = seq_len or config.seq_len
    d, f = config.d_model, config.d_ff
    m = batch_size * T
    base = not config.peft
    r = config.adapter_rank if config.peft else 0
    parts = [_linear(m, d, f, config, base), _linear(m, f, d, config, base)]
    parts.append(dict(
        elem_fw=LN_FW_PER_ELEM * m * d + LN_FW_PER_ROW * m + GELU_FW_PER_ELEM * m * f + m * d,
        elem_bw=LN_BW_PER_ELEM * m * d + GELU_BW_PER_ELEM * m * f + m * d,
        activation_bytes=FLOAT_BYTES * (2 * m * d + m + 2 * m * f + 2 * m * r),
    ))
    return _accumulate(parts)


def layer_costs(config: ModelConfig, batch_size: int = 1, seq_len: int | None = None) -> list[LayerCost]:
    """Per droppable layer, in flat layer order (attn, ffn, attn, ffn, ...)."""
    a = attn_cost(config, batch_size, seq_len)
    f = ffn_cost(config, batch_size, seq_len)
    return [a if i % 2 == 0 else f for i in range(config.n_layers)]


def offblock_cost(config: ModelConfig, batch_size: int = 1, seq_len: int | None = None) -> LayerCost:
    """Embeddings, final norm, head and loss: counted, never droppable."""
    _check(config)
    T = seq_len or config.seq_len
    d, V = config.d_model, config.vocab_size
    m = batch_size * T
    full = not config.peft
    return LayerCost(
        f_out=2 * m * d * V,
        f_grad=2 * m * d * V,
        f_param=2 * m * d * V if full else 0,
        elem_fw=m * d + LN_FW_PER_ELEM * m * d + LN_FW_PER_ROW * m + CE_FW_PER_ELEM * m * V + CE_FW_PER_ROW * m,
        elem_bw=CE_BW_PER_ELEM * m * V + LN_BW_PER_ELEM * m * d + (2 * m * d if full else 0),
        # tokens, final-norm cache, head input (only read for a trainable head), softmax probs
        activation_bytes=INDEX_BYTES * m + FLOAT_BYTES * (m * d + m + (m * d if full else 0) + m * V),
    )


def _rates(rates, n: int) -> np.ndarray:
    arr = rates.as_array() if isinstance(rates, DropRates) else np.asarray(rates, dtype=np.float64)
    if arr.shape != (n,):
        raise ValueError(f"expected {n} rates, got {arr.shape}")
    return arr


def backward_flops(costs, terms: str = "all") -> list[int]:
    """The F_i the allocator budgets: what a layer's backward pass costs."""
    return [c.backward(terms) for c in costs]


def expected_flops(costs, rates, offblock: LayerCost | None = None, terms: str = "all") -> float:
    """Expected FLOPs of one training step under per-layer drop rates."""
    p = _rates(rates, len(costs))
    fw = np.array([c.forward(terms) for c in costs], dtype=np.float64)
    bw = np.array([c.backward(terms) for c in costs], dtype=np.float64)
    total = float(fw.sum() + np.dot(1.0 - p, bw))
    if offblock is not None:
        total += offblock.total(terms)
    return total


def reduction_ratio(p_avg: float, mode: str) -> float:
    """Closed-form FLOPs reduction: (2/3) p in full fine-tuning, (1/2) p in peft."""
    if mode == "full":
        return 2.0 * p_avg / 3.0
    if mode == "peft":
        return p_avg / 2.0
    raise ValueError(f"mode must be 'full' or 'peft', got {mode!r}")


def block_reduction_ratio(costs, rates, terms: str = "linear") -> float:
    """``sum_i p_i bw_i / sum_i (fw_i + bw_i)`` over the droppable layers."""
    p = _rates(rates, len(costs))
    bw = np.array([c.backward(terms) for c in costs], dtype=np.float64)
    tot = np.array([c.total(terms) for c in costs], dtype=np.float64)
    return float(np.dot(p, bw) / tot.sum())


def measured_block_ratio(meter, baseline_meter, iterations: int, terms: str = "linear") -> float:
    """Reduction ratio realised by a metered run, relative to ``iterations``
    copies of one no-drop step recorded in ``baseline_meter``."""
    fw_c, bw_c = TERMS[terms]
    cats = set(fw_c) | set(bw_c)
    base = baseline_meter.block_total(cats) * iterations
    return 1.0 - meter.block_total(cats) / base


# ---------------------------------------------------------------- memory


@dataclass(frozen=True)
class MemoryEstimate:
    expected_bytes: float
    block_bytes: float
    nonblock_bytes: int
    budget: int | None = None
    max_seq_len: int | None = None
    feasible: bool = True


def expected_block_bytes(costs, rates) -> float:
    p = _rates(rates, len(costs))
    return float(np.dot(1.0 - p, [c.activation_bytes for c in costs]))


def _bytes_at(config: ModelConfig, p: np.ndarray, batch_size: int, seq_len: int) -> float:
    costs = layer_costs(config, batch_size, seq_len)
    return expected_block_bytes(costs, p) + offblock_cost(config, batch_size, seq_len).activation_bytes


def activation_budget(
    config: ModelConfig,
    rates,
    budget_bytes: int | None = None,
    batch_size: int = 1,
    max_search: int = 1 << 24,
) -> MemoryEstimate:
    """Expected cached bytes at ``config.seq_len`` and, given a byte budget,
    the longest sequence whose expected footprint fits."""
    p = _rates(rates, config.n_layers)
    costs = layer_costs(config, batch_size)
    block = expected_block_bytes(costs, p)
    nonblock = offblock_cost(config, batch_size).activation_bytes
    est = dict(expected_bytes=block + nonblock, block_bytes=block, nonblock_bytes=nonblock)
    if budget_bytes is None:
        return MemoryEstimate(**est)
    if _bytes_at(config, p, batch_size, 1) > budget_bytes:
        return MemoryEstimate(**est, budget=budget_bytes, max_seq_len=None, feasible=False)
    lo, hi = 1, 2
    while hi <= max_search and _bytes_at(config, p, batch_size, hi) <= budget_bytes:
        lo, hi = hi, hi * 2
    hi = min(hi, max_search + 1)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _bytes_at(config, p, batch_size, mid) <= budget_bytes:
            lo = mid
        else:
            hi = mid
    return MemoryEstimate(**est, budget=budget_bytes, max_seq_len=lo, feasible=True)


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class CostReport:
    mode: str
    p_avg: float
    flops_baseline: float
    flops_dropbp: float
    theoretical_ratio: float
    block_ratio_linear: float
    block_ratio_all: float
    whole_model_ratio: float
    measured_ratio: float | None
    activation_bytes_baseline: float
    activation_bytes_dropbp: float

    def rows(self) -> list[tuple[str, str]]:
        fmt = lambda x: "-" if x is None else f"{x:.4f}"
        return [
            ("mode", self.mode),
            ("p_avg", f"{self.p_avg:g}"),
            ("flops/step baseline", f"{self.flops_baseline:.0f}"),
            ("flops/step dropbp", f"{self.flops_dropbp:.0f}"),
            ("reduction theoretical", fmt(self.theoretical_ratio)),
            ("reduction block linear", fmt(self.block_ratio_linear)),
            ("reduction block all-terms", fmt(self.block_ratio_all)),
            ("reduction whole model", fmt(self.whole_model_ratio)),
            ("reduction measured", fmt(self.measured_ratio)),
            ("activation bytes baseline", f"{self.activation_bytes_baseline:.0f}"),
            ("activation bytes dropbp", f"{self.activation_bytes_dropbp:.0f}"),
        ]

    def table(self) -> str:
        rows = self.rows()
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{w}}  {v}" for k, v in rows)


def cost_report(config: ModelConfig, rates, batch_size: int = 1, measured_ratio: float | None = None) -> CostReport:
    costs = layer_costs(config, batch_size)
    off = offblock_cost(config, batch_size)
    p = _rates(rates, config.n_layers)
    zeros = np.zeros_like(p)
    base = expected_flops(costs, zeros, off)
    drop = expected_flops(costs, p, off)
    p_avg = rates.target_avg if isinstance(rates, DropRates) else float(p.mean())
    return CostReport(
        mode=config.mode,
        p_avg=p_avg,
        flops_baseline=base,
        flops_dropbp=drop,
        theoretical_ratio=reduction_ratio(p_avg, config.mode),
        block_ratio_linear=block_reduction_ratio(costs, p, "linear"),
        block_ratio_all=block_reduction_ratio(costs, p, "all"),
        whole_model_ratio=1.0 - drop / base,
        measured_ratio=measured_ratio,
        activation_bytes_baseline=expected_block_bytes(costs, zeros) + off.activation_bytes,
        activation_bytes_dropbp=expected_block_bytes(costs, p) + off.activation_bytes,
    )
