"""Pre-LN decoder-only transformer with explicit activation caching.

Every unit holds two residual branches, attention then FFN, and each branch
is one droppable *layer*: layer ``2*u`` is unit ``u``'s attention branch and
layer ``2*u + 1`` its FFN branch::

    X_imm = X_in  + branch_attn(LN1(X_in))
    X_out = X_imm + branch_ffn(LN2(X_imm))

Dropping a layer never changes the forward pass. It only means that the
branch (including its layer norm) stores no activations and is skipped on the
way back, so the gradient reaching ``X_in`` is the residual identity alone and
the branch parameters receive nothing. Kept layers are not rescaled.
"""
from __future__ import annotations

import json
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .tensor import (
    DTYPE,
    FlopsMeter,
    LayerNormCache,
    NumericError,
    Rng,
    ShapeError,
    Tensor,
    affine_backward,
    affine_forward,
    cross_entropy_backward,
    cross_entropy_forward,
    embedding_backward,
    embedding_forward,
    gelu_backward,
    gelu_forward,
    layer_norm_backward,
    layer_norm_forward,
    matmul_backward,
    matmul_forward,
    softmax_backward,
    softmax_forward,
)

MASK_VALUE = -1e30
BRANCHES = ("attn", "ffn")
ATTN_LINEARS = ("wq", "wk", "wv", "wo")
FFN_LINEARS = ("w1", "w2")


class StateError(RuntimeError):
    """Cache contents do not support the requested backward pass."""


@dataclass(frozen=True)
class ModelConfig:
    n_units: int = 2
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    vocab_size: int = 16
    seq_len: int = 64
    mode: str = "full"
    adapter_rank: int = 0
    adapter_alpha: float = 16.0
    init_std: float = 0.02
    # Replace every nonlinearity by identity: LN becomes a plain affine map,
    # GELU the identity, and attention a fixed causal average.
    linear: bool = False

    def __post_init__(self):
        for name in ("n_units", "d_model", "d_ff", "n_heads", "vocab_size", "seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.mode not in ("full", "peft"):
            raise ValueError(f"mode must be 'full' or 'peft', got {self.mode!r}")
        if self.mode == "peft" and self.adapter_rank < 1:
            raise ValueError("peft mode needs adapter_rank >= 1")
        if self.adapter_rank < 0:
            raise ValueError("adapter_rank must be non-negative")

    @property
    def n_layers(self) -> int:
        return 2 * self.n_units

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def peft(self) -> bool:
        return self.mode == "peft"

    @property
    def adapter_scale(self) -> float:
        return self.adapter_alpha / self.adapter_rank if self.peft else 0.0

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


class LayerIndex(NamedTuple):
    unit: int
    branch: str

    @property
    def flat(self) -> int:
        return 2 * self.unit + BRANCHES.index(self.branch)

    @classmethod
    def from_flat(cls, i: int) -> "LayerIndex":
        return cls(i // 2, BRANCHES[i % 2])

    @property
    def prefix(self) -> str:
        return f"u{self.unit}.{self.branch}"


def _linear_shapes(config: ModelConfig, branch: str) -> dict[str, tuple[int, int]]:
    d, f = config.d_model, config.d_ff
    if branch == "attn":
        return {name: (d, d) for name in ATTN_LINEARS}
    return {"w1": (d, f), "w2": (f, d)}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every parameter tensor."""
    d = config.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "emb.tok": (config.vocab_size, d),
        "emb.pos": (config.seq_len, d),
    }
    r = config.adapter_rank
    for i in range(config.n_layers):
        prefix = LayerIndex.from_flat(i).prefix
        shapes[f"{prefix}.ln.g"] = (d,)
        shapes[f"{prefix}.ln.b"] = (d,)
        for name, (din, dout) in _linear_shapes(config, LayerIndex.from_flat(i).branch).items():
            shapes[f"{prefix}.{name}"] = (din, dout)
            if config.peft:
                shapes[f"{prefix}.{name}.A"] = (din, r)
                shapes[f"{prefix}.{name}.B"] = (r, dout)
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    shapes["head.w"] = (d, config.vocab_size)
    return shapes


def is_trainable(config: ModelConfig, name: str) -> bool:
    if not config.peft:
        return True
    return name.endswith((".A", ".B", ".g", ".b"))


def layer_of(name: str) -> int | None:
    """Flat layer index owning parameter ``name``; None for off-block params."""
    if not name.startswith("u"):
        return None
    unit, branch = name.split(".")[:2]
    return LayerIndex(int(unit[1:]), branch).flat


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]

    @classmethod
    def init(cls, config: ModelConfig, rng: Rng) -> "Model":
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".g"):
                params[name] = np.ones(shape, dtype=DTYPE)
            elif name.endswith((".b", ".B")):
                # LN bias and adapter B start at zero, so adapters add nothing at init
                params[name] = np.zeros(shape, dtype=DTYPE)
            else:
                params[name] = rng.stream("init", name).normal(shape, config.init_std)
        return cls(config, params)

    @property
    def trainable(self) -> list[str]:
        return [n for n in self.params if is_trainable(self.config, n)]

    def layer_params(self, i: int, trainable_only: bool = True) -> list[str]:
        prefix = LayerIndex.from_flat(i).prefix + "."
        return [
            n
            for n in self.params
            if n.startswith(prefix) and (not trainable_only or is_trainable(self.config, n))
        ]

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})


# ------------------------------------------------------------ activation cache


def _nbytes(obj) -> int:
    if isinstance(obj, np.ndarray):
        return obj.nbytes
    if isinstance(obj, LayerNormCache):
        return obj.nbytes
    if isinstance(obj, dict):
        return sum(_nbytes(v) for v in obj.values())
    return 0


@dataclass
class ActivationCache:
    """Per-layer stored activations; a dropped layer holds ``None``."""

    n_layers: int
    layers: list = field(default_factory=list)
    dropped: np.ndarray | None = None
    forward_skipped: np.ndarray | None = None
    offblock: dict = field(default_factory=dict)

    def reset(self, dropped: np.ndarray, forward_skipped: np.ndarray) -> None:
        self.layers = [None] * self.n_layers
        self.dropped = dropped.copy()
        self.forward_skipped = forward_skipped.copy()
        self.offblock = {}

    def present(self, i: int) -> bool:
        return self.layers[i] is not None

    def layer_bytes(self, i: int) -> int:
        return _nbytes(self.layers[i]) if self.layers[i] is not None else 0

    @property
    def block_bytes(self) -> int:
        return sum(self.layer_bytes(i) for i in range(self.n_layers))

    @property
    def offblock_bytes(self) -> int:
        return _nbytes(self.offblock)

    @property
    def nbytes(self) -> int:
        return self.block_bytes + self.offblock_bytes


@dataclass
class Gradients:
    params: dict[str, Tensor]
    skipped: set = field(default_factory=set)
    input: Tensor | None = None

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(v)) for k, v in self.params.items()}


# -------------------------------------------------------------------- helpers


def _as_mask(mask, n: int, name: str) -> np.ndarray:
    if mask is None:
        return np.zeros(n, dtype=bool)
    arr = np.asarray(mask, dtype=bool).reshape(-1)
    if arr.shape[0] != n:
        raise ShapeError(f"{name} must have one entry per layer ({n}), got {arr.shape[0]}")
    return arr


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def causal_average(T: int) -> Tensor:
    """Row t averages positions 0..t; the attention pattern of linear mode."""
    c = np.tril(np.ones((T, T), dtype=DTYPE))
    return c / c.sum(axis=1, keepdims=True)


class _Branches:
    """Forward/backward of one residual branch; shared by all entry points."""

    def __init__(self, model: Model, meter: FlopsMeter | None):
        self.p = model.params
        self.cfg = model.config
        self.meter = meter

    def _add(self, category: str, n: int) -> None:
        if self.meter is not None:
            self.meter.add(category, n)

    # -- linear map with optional low-rank adapter

    def linear_fw(self, x: Tensor, name: str, store: dict | None) -> Tensor:
        y = matmul_forward(x, self.p[name], self.meter, "out")
        if self.cfg.peft:
            xa = matmul_forward(x, self.p[name + ".A"], self.meter, "adapter_out")
            ya = matmul_forward(xa, self.p[name + ".B"], self.meter, "adapter_out")
            self._add("elem_fw", 2 * y.size)
            y = y + self.cfg.adapter_scale * ya
            if store is not None:
                store[name + ".xa"] = xa
        return y

    def linear_bw(self, g: Tensor, x: Tensor, name: str, store: dict, grads: dict) -> Tensor:
        trainable = is_trainable(self.cfg, name)
        gx, gw = matmul_backward(g, x, self.p[name], self.meter, need_b=trainable)
        if gw is not None:
            grads[name] = gw
        if self.cfg.peft:
            self._add("elem_bw", g.size)
            gs = self.cfg.adapter_scale * g
            gxa, gB = matmul_backward(
                gs, store[name + ".xa"], self.p[name + ".B"], self.meter,
                categories=("adapter_grad", "adapter_param"),
            )
            gx_ad, gA = matmul_backward(
                gxa, x, self.p[name + ".A"], self.meter,
                categories=("adapter_grad", "adapter_param"),
            )
            grads[name + ".A"], grads[name + ".B"] = gA, gB
            self._add("elem_bw", gx.size)
            gx = gx + gx_ad
        return gx

    # -- layer norm (affine only in linear mode)

    def norm_fw(self, x: Tensor, prefix: str, store: dict | None) -> Tensor:
        g, b = self.p[prefix + ".g"], self.p[prefix + ".b"]
        if self.cfg.linear:
            if store is not None:
                store["ln_x"] = x
            return affine_forward(x, g, b, self.meter)
        y, ln = layer_norm_forward(x, g, b, self.meter)
        if store is not None:
            store["ln"] = ln
        return y

    def norm_bw(self, g: Tensor, prefix: str, store: dict, grads: dict) -> Tensor:
        gamma = self.p[prefix + ".g"]
        if self.cfg.linear:
            dx, dg, db = affine_backward(g, store["ln_x"], gamma, self.meter)
        else:
            dx, dg, db = layer_norm_backward(g, store["ln"], gamma, self.meter)
        grads[prefix + ".g"], grads[prefix + ".b"] = dg, db
        return dx

    # -- branches

    def attn_fw(self, x: Tensor, prefix: str, store: dict | None) -> Tensor:
        cfg = self.cfg
        H = cfg.n_heads
        h = self.norm_fw(x, prefix + ".ln", store)
        if store is not None:
            store["h"] = h
        vh = _split_heads(self.linear_fw(h, prefix + ".wv", store), H)
        if cfg.linear:
            P = causal_average(x.shape[1])
            ctx = matmul_forward(P, vh, self.meter, "score_fw")
        else:
            qh = _split_heads(self.linear_fw(h, prefix + ".wq", store), H)
            kh = _split_heads(self.linear_fw(h, prefix + ".wk", store), H)
            s = matmul_forward(qh, np.swapaxes(kh, -1, -2), self.meter, "score_fw")
            T = x.shape[1]
            self._add("elem_fw", 2 * s.size)
            s = np.where(np.tril(np.ones((T, T), dtype=bool)), s / np.sqrt(cfg.d_head), MASK_VALUE)
            P = softmax_forward(s, self.meter)
            ctx = matmul_forward(P, vh, self.meter, "score_fw")
            if store is not None:
                store.update(qh=qh, kh=kh, P=P)
        ctx = _merge_heads(ctx)
        if store is not None:
            store.update(vh=vh, ctx=ctx)
        return self.linear_fw(ctx, prefix + ".wo", store)

    def attn_bw(self, g: Tensor, prefix: str, store: dict, grads: dict) -> Tensor:
        cfg = self.cfg
        H = cfg.n_heads
        gctx = _split_heads(self.linear_bw(g, store["ctx"], prefix + ".wo", store, grads), H)
        h = store["h"]
        if cfg.linear:
            P = causal_average(h.shape[1])
            _, gvh = matmul_backward(gctx, P, store["vh"], self.meter, need_a=False,
                                     categories=("score_bw", "score_bw"))
            gh = self.linear_bw(_merge_heads(gvh), h, prefix + ".wv", store, grads)
            for name in ("wq", "wk"):
                if is_trainable(cfg, f"{prefix}.{name}"):
                    grads[f"{prefix}.{name}"] = np.zeros_like(self.p[f"{prefix}.{name}"])
        else:
            P = store["P"]
            gP, gvh = matmul_backward(gctx, P, store["vh"], self.meter,
                                      categories=("score_bw", "score_bw"))
            gs = softmax_backward(gP, P, self.meter)
            self._add("elem_bw", gs.size)
            gs = gs / np.sqrt(cfg.d_head)
            gqh, gkT = matmul_backward(gs, store["qh"], np.swapaxes(store["kh"], -1, -2),
                                       self.meter, categories=("score_bw", "score_bw"))
            gkh = np.swapaxes(gkT, -1, -2)
            gh = self.linear_bw(_merge_heads(gqh), h, prefix + ".wq", store, grads)
            gh = gh + self.linear_bw(_merge_heads(gkh), h, prefix + ".wk", store, grads)
            gh = gh + self.linear_bw(_merge_heads(gvh), h, prefix + ".wv", store, grads)
            self._add("elem_bw", 2 * gh.size)
        return self.norm_bw(gh, prefix + ".ln", store, grads)

    def ffn_fw(self, x: Tensor, prefix: str, store: dict | None) -> Tensor:
        h = self.norm_fw(x, prefix + ".ln", store)
        a = self.linear_fw(h, prefix + ".w1", store)
        act = a if self.cfg.linear else gelu_forward(a, self.meter)
        if store is not None:
            store.update(h=h, act=act)
            if not self.cfg.linear:
                store["a"] = a
        return self.linear_fw(act, prefix + ".w2", store)

    def ffn_bw(self, g: Tensor, prefix: str, store: dict, grads: dict) -> Tensor:
        gact = self.linear_bw(g, store["act"], prefix + ".w2", store, grads)
        ga = gact if self.cfg.linear else gelu_backward(gact, store["a"], self.meter)
        gh = self.linear_bw(ga, store["h"], prefix + ".w1", store, grads)
        return self.norm_bw(gh, prefix + ".ln", store, grads)

    def branch_fw(self, i: int, x: Tensor, store: dict | None) -> Tensor:
        li = LayerIndex.from_flat(i)
        fn = self.attn_fw if li.branch == "attn" else self.ffn_fw
        return fn(x, li.prefix, store)

    def branch_bw(self, i: int, g: Tensor, store: dict, grads: dict) -> Tensor:
        li = LayerIndex.from_flat(i)
        fn = self.attn_bw if li.branch == "attn" else self.ffn_bw
        return fn(g, li.prefix, store, grads)


# -------------------------------------------------------------------- forward


def forward(
    model: Model,
    tokens,
    decisions=None,
    cache: ActivationCache | None = None,
    meter: FlopsMeter | None = None,
    skip_forward=None,
) -> Tensor:
    """Logits for ``tokens`` of shape (batch, seq).

    ``decisions[i]`` True marks layer ``i`` as dropped for this iteration:
    its branch still runs but nothing is cached for it. ``skip_forward``
    removes branches from the forward computation as well (LayerDrop).
    Pass ``cache=None`` for inference-only calls.
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, T = tokens.shape
    if T > cfg.seq_len:
        raise ShapeError(f"sequence length {T} exceeds configured {cfg.seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
    n = cfg.n_layers
    dropped = _as_mask(decisions, n, "decisions")
    skipped = _as_mask(skip_forward, n, "skip_forward")
    dropped = dropped | skipped
    if cache is not None:
        cache.reset(dropped, skipped)
    br = _Branches(model, meter)
    p = model.params

    x = embedding_forward(tokens, p["emb.tok"], meter) + p["emb.pos"][:T]
    if meter is not None:
        meter.add("elem_fw", x.size)
    for i in range(n):
        if skipped[i]:
            continue
        store = None if (cache is None or dropped[i]) else {}
        ctx = meter.scoped(f"L{i}") if meter is not None else nullcontext()
        with ctx:
            out = br.branch_fw(i, x, store)
            if meter is not None:
                meter.add("elem_fw", x.size)
            x = x + out
        if store is not None:
            cache.layers[i] = store

    off = {} if cache is not None else None
    xf = br.norm_fw(x, "lnf", off)
    logits = matmul_forward(xf, p["head.w"], meter, "out")
    if off is not None:
        off["tokens"] = tokens.astype(np.int64)
        if is_trainable(cfg, "head.w"):
            off["xf"] = xf
        cache.offblock = off
    return logits


# ------------------------------------------------------------------- backward

ROUTES = ("both", "skip", "branch")


def backward(
    model: Model,
    cache: ActivationCache,
    decisions,
    loss_grad: Tensor,
    meter: FlopsMeter | None = None,
    routes=None,
    stop_below: int = 0,
) -> Gradients:
    """Gradients of the loss given ``loss_grad = dloss/dlogits``.

    ``decisions`` may drop more layers than the forward did (the extra cached
    activations are simply unused) but never fewer. ``routes`` overrides the
    per-layer gradient route: ``"both"`` (residual + branch), ``"skip"``
    (residual only, i.e. dropped) or ``"branch"`` (branch only, used by the
    path-length analysis). Layers below ``stop_below`` are not visited at all
    and no gradient reaches the embeddings when ``stop_below > 0``.
    """
    cfg = model.config
    n = cfg.n_layers
    p = model.params
    if cache.dropped is None:
        raise StateError("cache was never filled by a forward pass")
    dropped = _as_mask(decisions, n, "decisions") | cache.forward_skipped
    if routes is None:
        routes = ["skip" if d else "both" for d in dropped]
    elif len(routes) != n or any(r not in ROUTES for r in routes):
        raise ValueError(f"routes must be {n} entries from {ROUTES}")
    for i in range(stop_below, n):
        if routes[i] != "skip" and not cache.present(i):
            raise StateError(f"layer {i} needs a backward pass but its activations were not cached")
    if not 0 <= stop_below <= n:
        raise ValueError("stop_below out of range")

    br = _Branches(model, meter)
    grads: dict[str, Tensor] = {}
    off = cache.offblock

    head = p["head.w"]
    if is_trainable(cfg, "head.w"):
        gxf, grads["head.w"] = matmul_backward(loss_grad, off["xf"], head, meter)
    else:
        gxf = matmul_forward(loss_grad, head.T, meter, "grad")
    g = br.norm_bw(gxf, "lnf", off, grads)

    for i in reversed(range(stop_below, n)):
        route = routes[i]
        if route == "skip":
            continue
        with (meter.scoped(f"L{i}") if meter is not None else nullcontext()):
            gb = br.branch_bw(i, g, cache.layers[i], grads)
            if route == "both":
                if meter is not None:
                    meter.add("elem_bw", g.size)
                g = g + gb
            else:
                g = gb

    grad_input = None
    if stop_below == 0:
        grad_input = g
        tokens = off["tokens"]
        if is_trainable(cfg, "emb.tok"):
            grads["emb.tok"] = embedding_backward(g, tokens, cfg.vocab_size, meter)
        if is_trainable(cfg, "emb.pos"):
            if meter is not None:
                meter.add("elem_bw", g.size)
            gp = np.zeros_like(p["emb.pos"])
            gp[: g.shape[1]] = g.sum(axis=0)
            grads["emb.pos"] = gp

    skipped = set()
    for name in model.trainable:
        if name not in grads:
            grads[name] = np.zeros_like(p[name])
            skipped.add(name)
        elif not np.all(np.isfinite(grads[name])):
            li = layer_of(name)
            where = f"layer {li}" if li is not None else "off-block"
            raise NumericError(f"non-finite gradient for {name} ({where})")
    ordered = {name: grads[name] for name in model.trainable}
    return Gradients(ordered, skipped, grad_input)


# ----------------------------------------------------------------------- loss


def loss(logits: Tensor, targets, mask=None, meter: FlopsMeter | None = None) -> float:
    """Mean next-token cross-entropy over unmasked positions."""
    value, _ = cross_entropy_forward(logits, targets, mask, meter)
    return value


def loss_and_grad(logits: Tensor, targets, mask=None, meter: FlopsMeter | None = None):
    """``(loss, dloss/dlogits, probs)``; probs are what the backward keeps alive."""
    value, probs = cross_entropy_forward(logits, targets, mask, meter)
    return value, cross_entropy_backward(probs, targets, mask, meter), probs


def forward_backward(
    model: Model,
    tokens,
    targets,
    mask=None,
    decisions=None,
    meter: FlopsMeter | None = None,
    skip_forward=None,
    stop_below: int = 0,
):
    """One training step's worth of compute; returns (loss, grads, cache, probs)."""
    cache = ActivationCache(model.config.n_layers)
    logits = forward(model, tokens, decisions, cache, meter, skip_forward)
    value, dlogits, probs = loss_and_grad(logits, targets, mask, meter)
    grads = backward(model, cache, decisions, dlogits, meter, stop_below=stop_below)
    return value, grads, cache, probs


# ----------------------------------------------------------------- checkpoint


def save_checkpoint(model: Model, path) -> None:
    """Write an ``.npz`` archive: one float64 array per parameter name plus a
    ``__config__`` entry holding the ModelConfig as JSON."""
    arrays = dict(model.params)
    arrays["__config__"] = np.array(json.dumps(asdict(model.config), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Model:
    with np.load(Path(path), allow_pickle=False) as data:
        config = ModelConfig(**json.loads(str(data["__config__"])))
        params = {name: data[name].copy() for name in param_shapes(config)}
    for name, shape in param_shapes(config).items():
        if params[name].shape != shape:
            raise ShapeError(f"checkpoint tensor {name} has shape {params[name].shape}, expected {shape}")
    return Model(config, params)
