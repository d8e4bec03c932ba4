"""Synthetic and byte-level datasets with hash-checked train/validation splits."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .tensor import Rng

DEFAULT_CORPUS = "declaration.txt"


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "copy-task"
    seq_len: int = 64
    alphabet: int = 8  # copy-task symbols (vocab = alphabet + 1 separator)
    val_fraction: float = 0.1  # char-lm: tail of the corpus held out
    n_val: int = 256  # validation sequences
    corpus: str | None = None  # char-lm: path, or None for the bundled text

    def __post_init__(self):
        if self.kind not in ("copy-task", "char-lm"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "copy-task" and (self.seq_len < 2 or self.seq_len % 2):
            raise ValueError("copy-task needs an even seq_len >= 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class Batch:
    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    batch_id: str

    def split(self, parts: int) -> list["Batch"]:
        idx = np.array_split(np.arange(len(self.tokens)), parts)
        return [Batch(self.tokens[i], self.targets[i], self.mask[i], f"{self.batch_id}/{j}")
                for j, i in enumerate(idx) if len(i)]


def _digest(row: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(row, dtype=np.int64).tobytes(), digest_size=16).digest()


class CopyTask:
    """``h`` random symbols, a separator, then the same symbols again.

    ``seq_len = 2h``; the loss mask covers the copied half, which is fully
    determined by the prefix, so the optimal loss is zero.
    """

    def __init__(self, spec: DatasetSpec, seed: int):
        self.spec = spec
        self.half = spec.seq_len // 2
        self.sep = spec.alphabet
        self.vocab_size = spec.alphabet + 1
        self.rng = Rng(seed, ("data", "copy-task"))
        self.val = self._make(self.rng.stream("val").generator, spec.n_val, exclude=None)
        self.val_hashes = {_digest(r) for r in self.val.tokens}
        if len(self.val_hashes) >= spec.alphabet ** self.half:
            raise ValueError("validation set covers every sequence; no training data is left")

    def _make(self, gen, n: int, exclude: set | None) -> Batch:
        rows = []
        while len(rows) < n:
            sym = gen.integers(0, self.spec.alphabet, self.half)
            seq = np.concatenate([sym, [self.sep], sym])
            if exclude is not None and _digest(seq[:-1]) in exclude:
                continue
            rows.append(seq)
        seqs = np.stack(rows)
        mask = np.zeros((n, self.spec.seq_len), dtype=bool)
        mask[:, self.half:] = True
        return Batch(seqs[:, :-1], seqs[:, 1:], mask, "val")

    def train_batch(self, iteration: int, batch_size: int) -> Batch:
        b = self._make(self.rng.stream("train", iteration).generator, batch_size, self.val_hashes)
        b.batch_id = f"train:{iteration}"
        return b


class CharLM:
    """Byte-level language modelling on a text; the last ``val_fraction`` of
    the bytes is held out and any validation window that also occurs in the
    training region is dropped."""

    def __init__(self, spec: DatasetSpec, seed: int):
        self.spec = spec
        if spec.corpus is None:
            raw = resources.files("dropbp").joinpath("data", DEFAULT_CORPUS).read_bytes()
        else:
            raw = Path(spec.corpus).read_bytes()
        if not raw:
            raise ValueError("corpus is empty")
        data = np.frombuffer(raw, dtype=np.uint8)
        self.byte_values = np.unique(data)
        self.vocab_size = len(self.byte_values)
        ids = np.searchsorted(self.byte_values, data).astype(np.int64)
        w = spec.seq_len + 1
        cut = int(len(ids) * (1.0 - spec.val_fraction))
        self.train_ids, val_ids = ids[:cut], ids[cut:]
        if len(self.train_ids) < w or len(val_ids) < w:
            raise ValueError(f"corpus too short for seq_len={spec.seq_len}")
        train_windows = np.lib.stride_tricks.sliding_window_view(self.train_ids, w)
        self.train_hashes = {_digest(r) for r in train_windows}
        val_windows = np.lib.stride_tricks.sliding_window_view(val_ids, w)
        step = max(1, len(val_windows) // spec.n_val)
        keep = [r for r in val_windows[::step] if _digest(r) not in self.train_hashes][: spec.n_val]
        if not keep:
            raise ValueError("no validation window is disjoint from the training text")
        v = np.stack(keep)
        self.val = Batch(v[:, :-1], v[:, 1:], np.ones(v[:, 1:].shape, dtype=bool), "val")
        self.rng = Rng(seed, ("data", "char-lm"))

    def decode(self, ids) -> str:
        return bytes(self.byte_values[np.asarray(ids)]).decode("utf-8", errors="replace")

    def train_batch(self, iteration: int, batch_size: int) -> Batch:
        w = self.spec.seq_len + 1
        starts = self.rng.stream("train", iteration).integers(0, len(self.train_ids) - w + 1, batch_size)
        rows = np.stack([self.train_ids[s:s + w] for s in starts])
        return Batch(rows[:, :-1], rows[:, 1:], np.ones(rows[:, 1:].shape, dtype=bool), f"train:{iteration}")


def make_dataset(spec: DatasetSpec, seed: int):
    return CopyTask(spec, seed) if spec.kind == "copy-task" else CharLM(spec, seed)


def val_batches(dataset, batch_size: int) -> list[Batch]:
    v = dataset.val
    return [Batch(v.tokens[i:i + batch_size], v.targets[i:i + batch_size], v.mask[i:i + batch_size], f"val:{i}")
            for i in range(0, len(v.tokens), batch_size)]
