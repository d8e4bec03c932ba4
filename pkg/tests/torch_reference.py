"""Independent float64 reference network built on torch autograd.

Shares nothing with the package except parameter names. A dropped branch is
``x + branch(x).detach()``: same forward value, no gradient through it.
"""
from __future__ import annotations

import math

import numpy as np
import torch

EPS = 1e-5


def _ln(x, g, b):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + EPS) * g + b


def _gelu(x):
    return 0.5 * x * (1 + torch.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


class Reference:
    def __init__(self, config, params: dict):
        self.cfg = config
        self.t = {k: torch.tensor(v, dtype=torch.float64, requires_grad=True) for k, v in params.items()}

    def _lin(self, x, name):
        y = x @ self.t[name]
        if self.cfg.mode == "peft":
            y = y + self.cfg.adapter_scale * (x @ self.t[name + ".A"]) @ self.t[name + ".B"]
        return y

    def _attn(self, x, pre):
        cfg, t = self.cfg, self.t
        B, T, d = x.shape
        H, dh = cfg.n_heads, d // cfg.n_heads
        h = _ln(x, t[pre + ".ln.g"], t[pre + ".ln.b"])

        def heads(z):
            return z.reshape(B, T, H, dh).transpose(1, 2)

        q, k, v = (heads(self._lin(h, f"{pre}.{w}")) for w in ("wq", "wk", "wv"))
        s = q @ k.transpose(-1, -2) / math.sqrt(dh)
        causal = torch.tril(torch.ones(T, T, dtype=torch.bool))
        s = s.masked_fill(~causal, float("-inf"))
        ctx = (torch.softmax(s, -1) @ v).transpose(1, 2).reshape(B, T, d)
        return self._lin(ctx, pre + ".wo")

    def _ffn(self, x, pre):
        h = _ln(x, self.t[pre + ".ln.g"], self.t[pre + ".ln.b"])
        return self._lin(_gelu(self._lin(h, pre + ".w1")), pre + ".w2")

    def loss(self, tokens, targets, mask=None, dropped=()):
        t = self.t
        tokens = torch.as_tensor(np.asarray(tokens))
        T = tokens.shape[1]
        x = t["emb.tok"][tokens] + t["emb.pos"][:T]
        for i in range(self.cfg.n_layers):
            pre = f"u{i // 2}." + ("attn" if i % 2 == 0 else "ffn")
            out = self._attn(x, pre) if i % 2 == 0 else self._ffn(x, pre)
            x = x + (out.detach() if i in dropped else out)
        logits = _ln(x, t["lnf.g"], t["lnf.b"]) @ t["head.w"]
        nll = torch.nn.functional.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), torch.as_tensor(np.asarray(targets)).reshape(-1), reduction="none"
        )
        w = torch.ones_like(nll) if mask is None else torch.as_tensor(np.asarray(mask, dtype=np.float64)).reshape(-1)
        return (nll * w).sum() / w.sum()

    def grads(self, tokens, targets, mask=None, dropped=(), trainable=None) -> dict[str, np.ndarray]:
        names = list(trainable if trainable is not None else self.t)
        value = self.loss(tokens, targets, mask, set(dropped))
        gs = torch.autograd.grad(value, [self.t[n] for n in names], allow_unused=True)
        return {n: (np.zeros(self.t[n].shape) if g is None else g.detach().numpy()) for n, g in zip(names, gs)}


def sensitivities(config, params, tokens, targets, mask=None, trainable=None) -> list[float]:
    """Brute force: materialize every gradient for every single-layer drop."""
    ref = Reference(config, params)
    base = ref.grads(tokens, targets, mask, (), trainable)
    out = []
    for layer in range(config.n_layers):
        g = ref.grads(tokens, targets, mask, (layer,), trainable)
        out.append(sum((np.linalg.norm(base[k]) - np.linalg.norm(g[k])) ** 2 for k in base))
    return out
