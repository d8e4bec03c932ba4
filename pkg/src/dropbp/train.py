"""Run configuration, structured run log and the training loop."""
from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import baselines
from .cost import backward_flops, layer_costs
from .data import DatasetSpec, make_dataset, val_batches
from .mechanism import DropRates, WarmupSchedule, sample_decisions, uniform_rates, warmup_rates
from .model import Model, ModelConfig, forward, forward_backward, layer_of, loss, save_checkpoint
from .optim import AdamWState, adamw_step, cosine_lr
from .sensitivity import FlopsProfile, maybe_reallocate
from .tensor import FlopsMeter, NumericError, Rng

SCHEMA_VERSION = 1
ENV_PREFIX = "DROPBP_"
METHODS = ("baseline", "dropbp", "freeze", "layerdrop", "pld")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    method: str = "baseline"
    p_avg: float = 0.0  # dropbp target rate; skip rate for freeze and layerdrop
    allocation: str = "sensitivity"  # dropbp only: "sensitivity" or "uniform"
    warmup_fraction: float = 0.1
    warmup_rate: float | None = None  # overrides the grid-rounded warmup rate
    relative_flops: float = 0.75  # pld budget
    pld_gamma: float = 5.0
    total_iters: int = 1000
    batch_size: int = 32
    micro_batches: int = 1
    lr: float = 3e-4
    lr_min: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    drop_policy: str = "decay"
    eval_every: int = 50
    seed: int = 0
    log_path: str | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig(**self.model))
        if isinstance(self.dataset, dict):
            object.__setattr__(self, "dataset", DatasetSpec(**self.dataset))
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.allocation not in ("sensitivity", "uniform"):
            raise ValueError("allocation must be 'sensitivity' or 'uniform'")
        if not 0.0 <= self.p_avg <= 1.0:
            raise ValueError("p_avg must lie in [0, 1]")
        if self.total_iters < 1 or self.batch_size < 1 or self.micro_batches < 1:
            raise ValueError("total_iters, batch_size and micro_batches must be positive")
        if self.micro_batches > self.batch_size:
            raise ValueError("micro_batches cannot exceed batch_size")
        if self.model.seq_len < self.dataset.seq_len:
            raise ValueError("model seq_len is shorter than the dataset's")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def apply_overrides(config: dict, overrides=(), environ=None) -> dict:
    """Layer ``DROPBP_*`` environment variables (``__`` nests) and then
    ``key=value`` overrides (dotted keys nest) onto a config dict."""
    out = json.loads(json.dumps(config))
    environ = os.environ if environ is None else environ
    for var in sorted(environ):
        if var.startswith(ENV_PREFIX):
            key = var[len(ENV_PREFIX):].lower().replace("__", ".")
            _set_dotted(out, key, _parse_value(environ[var]))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        _set_dotted(out, key.strip(), _parse_value(value))
    return out


def load_config(path=None, overrides=(), environ=None) -> RunConfig:
    base = RunConfig().to_dict()
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(base.get(key), dict):
                base[key].update(value)
            else:
                base[key] = value
    return RunConfig.from_dict(apply_overrides(base, overrides, environ))


# ------------------------------------------------------------------- logging


class RunLog:
    """JSON-lines run log; every line carries the schema version, a record
    kind and a wall-clock ``ts`` (the only non-reproducible field)."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "w") if path else None

    def event(self, kind: str, **fields) -> dict:
        rec = {"v": SCHEMA_VERSION, "kind": kind, **fields, "ts": time.time()}
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()
        return rec

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind]


def strip_timestamps(line: str) -> str:
    rec = json.loads(line)
    rec.pop("ts", None)
    return json.dumps(rec, sort_keys=True)


def compare_logs(path_a, path_b) -> list[int]:
    """Line numbers (1-based) at which two logs differ, ignoring timestamps."""
    a = Path(path_a).read_text().splitlines()
    b = Path(path_b).read_text().splitlines()
    diffs = [i + 1 for i, (x, y) in enumerate(zip(a, b)) if strip_timestamps(x) != strip_timestamps(y)]
    if len(a) != len(b):
        diffs.append(min(len(a), len(b)) + 1)
    return diffs


# -------------------------------------------------------------------- train


class Diverged(RuntimeError):
    def __init__(self, iteration: int, reason: str):
        super().__init__(f"diverged at iteration {iteration}: {reason}")
        self.iteration = iteration
        self.reason = reason


@dataclass
class RunMetrics:
    config: RunConfig
    log: RunLog
    model: Model
    meter: FlopsMeter
    sensitivity_meter: FlopsMeter

    @property
    def iterations(self) -> list[dict]:
        return self.log.of_kind("iter")

    @property
    def allocator_events(self) -> list[dict]:
        return self.log.of_kind("allocator")

    def val_curve(self) -> list[tuple[int, float]]:
        return [(r["iter"], r["val_loss"]) for r in self.iterations if "val_loss" in r]

    @property
    def final_val_loss(self) -> float:
        return self.val_curve()[-1][1]


def evaluate(model: Model, batches) -> float:
    total, count = 0.0, 0
    for b in batches:
        n = int(b.mask.sum())
        if n:
            total += loss(forward(model, b.tokens), b.targets, b.mask) * n
            count += n
    return total / count


def _initial_rates(cfg: RunConfig, n: int, log: RunLog) -> DropRates:
    if cfg.method in ("baseline", "pld"):
        return uniform_rates(n, 0.0)
    if cfg.method == "freeze":
        keep = baselines.freeze_mask(n, cfg.p_avg)
        return DropRates(tuple(0.0 if k else 1.0 for k in keep), cfg.p_avg)
    if cfg.method == "layerdrop":
        return uniform_rates(n, cfg.p_avg, grid=None)
    if cfg.allocation == "uniform":
        return uniform_rates(n, cfg.p_avg, grid=None)
    rates, note = warmup_rates(n, cfg.p_avg, cfg.warmup_rate)
    log.event("warmup", **note)
    return rates


def _step(model, batch, cfg, decisions, skip, stop_below, meter):
    """Forward/backward over ``micro_batches`` chunks. Chunk means are
    weighted by their share of masked tokens, so the result equals the
    full-batch mean."""
    chunks = batch.split(cfg.micro_batches) if cfg.micro_batches > 1 else [batch]
    total_tokens = int(batch.mask.sum())
    total_loss, grads, cached = 0.0, None, 0
    for chunk in chunks:
        value, g, cache, probs = forward_backward(
            model, chunk.tokens, chunk.targets, chunk.mask, decisions, meter, skip, stop_below
        )
        cached = max(cached, cache.nbytes + probs.nbytes)
        w = 1.0 if len(chunks) == 1 else int(chunk.mask.sum()) / total_tokens
        total_loss += value * w
        if grads is None:
            grads = g
            if len(chunks) > 1:
                grads.params = {k: v * w for k, v in g.params.items()}
        else:
            for k, v in g.params.items():
                grads.params[k] += v * w
    return total_loss, grads, cached


def train(cfg: RunConfig, log: RunLog | None = None) -> RunMetrics:
    """Run one training job; raises :class:`Diverged` after logging a
    diagnostic record if the loss or a gradient stops being finite."""
    own_log = log is None
    log = log or RunLog(cfg.log_path)
    try:
        return _train(cfg, log)
    finally:
        if own_log:
            log.close()


def _train(cfg: RunConfig, log: RunLog) -> RunMetrics:
    data = make_dataset(cfg.dataset, cfg.seed)
    mcfg = cfg.model
    if mcfg.vocab_size != data.vocab_size:
        mcfg = mcfg.replace(vocab_size=data.vocab_size)
    rng = Rng(cfg.seed)
    model = Model.init(mcfg, rng.stream("model"))
    n = mcfg.n_layers
    # output locations are left out so identical runs log identical configs
    logged = cfg.replace(model=mcfg, log_path=None, checkpoint_path=None)
    log.event("config", config=logged.to_dict())

    meter, sens_meter = FlopsMeter(), FlopsMeter()
    state = AdamWState()
    vals = val_batches(data, cfg.batch_size)
    schedule = WarmupSchedule(cfg.total_iters, cfg.warmup_fraction)
    rates = _initial_rates(cfg, n, log)
    log.event("rates", iter=0, rates=list(rates.rates), reason="initial")

    stop_below = baselines.n_frozen(n, cfg.p_avg) if cfg.method == "freeze" else 0
    frozen = set()
    if cfg.method == "freeze":
        frozen = {k for k in model.trainable if (li := layer_of(k)) is not None and li < stop_below}
    pld = None
    if cfg.method == "pld":
        pld = baselines.pld_params_for_budget(n, cfg.relative_flops, cfg.pld_gamma, cfg.total_iters)
        log.event("pld", floor=pld.floor, gamma=pld.gamma,
                  average_keep=baselines.pld_average_keep(n, pld, cfg.total_iters))
    flops_profile = FlopsProfile(tuple(backward_flops(layer_costs(mcfg, cfg.batch_size))), cfg.p_avg)

    for it in range(cfg.total_iters):
        batch = data.train_batch(it, cfg.batch_size)
        if cfg.method == "dropbp" and cfg.allocation == "sensitivity":
            new = maybe_reallocate(
                schedule, it, model, (batch.tokens, batch.targets, batch.mask), cfg.p_avg,
                flops_profile, sens_meter, log, batch.batch_id,
            )
            if new is not None:
                rates = new
                log.event("rates", iter=it, rates=list(rates.rates), reason="allocator")
        if pld is not None:
            rates = baselines.pld_rates(n, it, cfg.total_iters, pld)

        skip = None
        if cfg.method in ("layerdrop", "pld"):
            skip = baselines.layerdrop_decisions(rates, it, rng).dropped
            dropped = skip
        else:
            dropped = sample_decisions(rates, it, rng).dropped

        fw0, bw0 = meter.snapshot()
        try:
            train_loss, grads, cached = _step(model, batch, cfg, dropped, skip, stop_below, meter)
            if not math.isfinite(train_loss):
                raise NumericError("training loss is not finite")
        except NumericError as exc:
            log.event("diverged", iter=it, reason=str(exc))
            raise Diverged(it, str(exc)) from exc

        lr = cosine_lr(it, cfg.total_iters, cfg.lr, cfg.lr_min)
        updates = {k: v for k, v in grads.params.items() if k not in frozen}
        adamw_step(model.params, updates, state, lr, cfg.betas, cfg.eps, cfg.weight_decay,
                   grads.skipped, cfg.drop_policy)

        fw1, bw1 = meter.snapshot()
        rec = {
            "iter": it,
            "train_loss": train_loss,
            "lr": lr,
            "fw_flops": fw1 - fw0,
            "bw_flops": bw1 - bw0,
            "cached_bytes": cached,
            "dropped": [int(i) for i in np.flatnonzero(dropped)],
            "rates": list(rates.rates),
        }
        if (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.total_iters:
            val = evaluate(model, vals)
            if not math.isfinite(val):
                log.event("diverged", iter=it, reason="validation loss is not finite")
                raise Diverged(it, "validation loss is not finite")
            rec["val_loss"] = val
            rec["val_ppl"] = math.exp(min(val, 700.0))
        log.event("iter", **rec)

    log.event("summary", fw_flops=meter.forward, bw_flops=meter.backward,
              sensitivity_flops=sens_meter.total, iterations=cfg.total_iters)
    if cfg.checkpoint_path:
        save_checkpoint(model, cfg.checkpoint_path)
    return RunMetrics(cfg, log, model, meter, sens_meter)
