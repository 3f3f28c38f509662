"""In-memory labeled token datasets, the VBPD file format and the synthetic
generator used for desk-scale experiments."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FormatError, MagicError, TruncatedError, UsageError
from .io import atomic_write_bytes
from .tensor import STORAGE

MAGIC = b"VBPD1\n"


@dataclass
class Dataset:
    x: np.ndarray                  # (samples, tokens, dim) float32
    y: Optional[np.ndarray] = None  # (samples,) int64 labels, None if unlabeled
    classes: Optional[int] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=STORAGE)
        if self.x.ndim != 3:
            raise UsageError(f"dataset features must be (samples, tokens, dim), got {self.x.shape}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (self.x.shape[0],):
                raise UsageError("labels must have one entry per sample")
            if self.classes is None:
                self.classes = int(self.y.max()) + 1 if len(self.y) else 0

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def labeled(self) -> bool:
        return self.y is not None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], None if self.y is None else self.y[idx], self.classes)

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for s in range(0, len(order), batch_size):
            idx = order[s: s + batch_size]
            yield self.x[idx], (None if self.y is None else self.y[idx])

    def split(self, val_fraction: float, seed: int = 0):
        """Deterministic shuffled (train, val) split."""
        order = np.random.default_rng(seed).permutation(len(self))
        n_val = int(round(val_fraction * len(self)))
        return self.subset(np.sort(order[n_val:])), self.subset(np.sort(order[:n_val]))


def generate(samples: int, tokens: int, dim: int, classes: int, seed: int = 0,
             separation: float = 3.0, symmetric: bool = False) -> Dataset:
    """Per-class Gaussian token templates plus unit Gaussian noise.

    Each class owns a random template with Euclidean norm ``separation``
    spread over all ``tokens * dim`` features, so ``separation`` is the
    distance of a class mean from the origin in noise standard deviations.
    Labels cycle through the classes, so they are balanced.

    With ``symmetric`` each sample carries its template with a random sign.
    Class means then coincide at the origin and no linear readout separates
    the classes; a nonlinearity has to.
    """
    if min(samples, tokens, dim, classes) < 1:
        raise UsageError("samples, tokens, dim and classes must all be >= 1")
    tmpl_seq, noise_seq, order_seq, sign_seq = np.random.SeedSequence(seed).spawn(4)
    t = np.random.default_rng(tmpl_seq).standard_normal((classes, tokens, dim))
    t *= separation / np.linalg.norm(t.reshape(classes, -1), axis=1)[:, None, None]
    y = np.random.default_rng(order_seq).permutation(np.arange(samples) % classes)
    noise = np.random.default_rng(noise_seq).standard_normal((samples, tokens, dim))
    signal = t[y]
    if symmetric:
        signal *= np.random.default_rng(sign_seq).choice([-1.0, 1.0], size=samples)[:, None, None]
    return Dataset((signal + noise).astype(STORAGE), y, classes)


def to_bytes(ds: Dataset) -> bytes:
    if not ds.labeled:
        raise UsageError("VBPD files carry labels; dataset is unlabeled")
    n, tokens, dim = ds.x.shape
    manifest = json.dumps({"samples": n, "tokens": tokens, "dim": dim, "classes": int(ds.classes)},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    rec = np.dtype([("x", "<f4", (tokens * dim,)), ("y", "<u4")])
    body = np.empty(n, rec)
    body["x"] = ds.x.reshape(n, -1)
    body["y"] = ds.y
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + body.tobytes()


def from_bytes(buf: bytes) -> Dataset:
    if buf[: len(MAGIC)] != MAGIC:
        raise MagicError("not a VBPD dataset file (bad magic)")
    pos = len(MAGIC)
    if len(buf) < pos + 8:
        raise TruncatedError("truncated before manifest length")
    (mlen,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if len(buf) < pos + mlen:
        raise TruncatedError("truncated manifest")
    try:
        m = json.loads(buf[pos: pos + mlen].decode("utf-8"))
        n, tokens, dim, classes = (int(m[k]) for k in ("samples", "tokens", "dim", "classes"))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"unreadable dataset manifest: {exc!r}") from exc
    pos += mlen
    rec = np.dtype([("x", "<f4", (tokens * dim,)), ("y", "<u4")])
    if len(buf) - pos != n * rec.itemsize:
        raise TruncatedError(f"expected {n * rec.itemsize} payload bytes, found {len(buf) - pos}")
    body = np.frombuffer(buf, rec, count=n, offset=pos)
    return Dataset(body["x"].reshape(n, tokens, dim).astype(STORAGE), body["y"].astype(np.int64), classes)


def save_dataset(ds: Dataset, path) -> None:
    atomic_write_bytes(path, to_bytes(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
