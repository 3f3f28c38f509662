"""Architecture shapes, weight storage, forward passes, the VBPM file format
and MAC/parameter accounting.

A model is a ``ModelSpec`` plus a weight store, which is an ordinary
``dict`` mapping canonical names (``block.3.mlp.w1``) to float32 arrays.
Linear weights follow the ``y = W x + b`` convention, so ``mlp.w1`` has shape
``(d_hid, d_in)`` and ``mlp.w2`` has shape ``(d_out, d_hid)``.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DimensionError,
    FormatError,
    IntegrityError,
    MagicError,
    PlanError,
    ShapeDisagreementError,
    TruncatedError,
)
from .tensor import COMPUTE, STORAGE, gelu, softmax

MAGIC = b"VBPM1\n"
ALIGN = 64
LN_EPS = 1e-6

# sink(pre, post) receives (rows, d_hid) float64 arrays for one MLP
Sink = Callable[[np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class MlpShape:
    d_in: int
    d_hid: int
    d_out: int

    def __post_init__(self):
        if min(self.d_in, self.d_hid, self.d_out) < 1:
            raise DimensionError(f"MLP dimensions must be >= 1: {self}")


@dataclass(frozen=True)
class BlockShape:
    embed_dim: int
    num_heads: int
    mlp: MlpShape

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_heads < 0:
            raise DimensionError(f"bad block shape: {self}")
        if self.num_heads and self.embed_dim % self.num_heads:
            raise DimensionError(
                f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.mlp.d_in != self.embed_dim or self.mlp.d_out != self.embed_dim:
            raise DimensionError("block MLP must map embed_dim -> embed_dim")


@dataclass(frozen=True)
class ModelSpec:
    blocks: tuple
    num_tokens: int
    num_classes: int
    patch_embed: Optional[int] = None  # in_features of the linear patch embedding

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise DimensionError("a model needs at least one block")
        if len({b.embed_dim for b in self.blocks}) != 1:
            raise DimensionError("all blocks must share embed_dim")
        if self.num_tokens < 1 or self.num_classes < 1:
            raise DimensionError("num_tokens and num_classes must be >= 1")
        if self.patch_embed is not None and (self.patch_embed < 1 or self.num_tokens < 2):
            raise DimensionError("patch embedding needs in_features >= 1 and >= 2 tokens")

    @property
    def embed_dim(self) -> int:
        return self.blocks[0].embed_dim

    @property
    def input_shape(self) -> tuple:
        """Per-sample input shape expected by :func:`forward_model`."""
        if self.patch_embed is not None:
            return (self.num_tokens - 1, self.patch_embed)
        return (self.num_tokens, self.embed_dim)

    @property
    def hidden_sizes(self) -> list:
        return [b.mlp.d_hid for b in self.blocks]

    def to_dict(self) -> dict:
        return {
            "blocks": [asdict(b) for b in self.blocks],
            "num_tokens": self.num_tokens,
            "num_classes": self.num_classes,
            "patch_embed": None if self.patch_embed is None else {"in_features": self.patch_embed},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            blocks = [
                BlockShape(int(b["embed_dim"]), int(b["num_heads"]), MlpShape(**{k: int(v) for k, v in b["mlp"].items()}))
                for b in d["blocks"]
            ]
            pe = d.get("patch_embed")
            return cls(tuple(blocks), int(d["num_tokens"]), int(d["num_classes"]),
                       None if pe is None else int(pe["in_features"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed model spec: {exc!r}") from exc


def uniform_spec(depth: int, dim: int, hid: int, heads: int, tokens: int, classes: int,
                 patch_embed: Optional[int] = None) -> ModelSpec:
    block = BlockShape(dim, heads, MlpShape(dim, hid, dim))
    return ModelSpec((block,) * depth, tokens, classes, patch_embed)


# 196 patches of 16x16x3 plus the class token
PRESETS = {
    "deit-tiny": dict(depth=12, dim=192, hid=768, heads=3, tokens=197, classes=1000, patch_embed=768),
    "deit-small": dict(depth=12, dim=384, hid=1536, heads=6, tokens=197, classes=1000, patch_embed=768),
    "deit-base": dict(depth=12, dim=768, hid=3072, heads=12, tokens=197, classes=1000, patch_embed=768),
    "toy": dict(depth=2, dim=32, hid=128, heads=4, tokens=9, classes=4, patch_embed=None),
}


def preset(name: str) -> ModelSpec:
    try:
        return uniform_spec(**PRESETS[name])
    except KeyError:
        raise DimensionError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# weights

def param_shapes(spec: ModelSpec) -> dict:
    """Canonical name -> shape, in serialization order."""
    d = spec.embed_dim
    shapes = {}
    if spec.patch_embed is not None:
        shapes["patch_embed.weight"] = (d, spec.patch_embed)
        shapes["patch_embed.bias"] = (d,)
        shapes["cls_token"] = (d,)
        shapes["pos_embed"] = (spec.num_tokens, d)
    for i, b in enumerate(spec.blocks):
        p = f"block.{i}."
        if b.num_heads:
            shapes[p + "ln1.gain"] = (d,)
            shapes[p + "ln1.bias"] = (d,)
            shapes[p + "attn.wqkv"] = (3 * d, d)
            shapes[p + "attn.bqkv"] = (3 * d,)
            shapes[p + "attn.wproj"] = (d, d)
            shapes[p + "attn.bproj"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "mlp.w1"] = (b.mlp.d_hid, b.mlp.d_in)
        shapes[p + "mlp.b1"] = (b.mlp.d_hid,)
        shapes[p + "mlp.w2"] = (b.mlp.d_out, b.mlp.d_hid)
        shapes[p + "mlp.b2"] = (b.mlp.d_out,)
    shapes["norm.gain"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (spec.num_classes, d)
    shapes["head.bias"] = (spec.num_classes,)
    return shapes


def mlp_names(layer: int) -> tuple:
    p = f"block.{layer}.mlp."
    return p + "w1", p + "b1", p + "w2", p + "b2"


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(STORAGE)


def init_weights(spec: ModelSpec, seed: int = 0, shape_only: bool = False, std: float = 0.02) -> dict:
    """Truncated-normal (+-2 std) linear weights and embeddings, unit LN gains,
    zero biases. ``shape_only`` gives all-zero tensors for accounting runs."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    weights = {}
    for name, shape in param_shapes(spec).items():
        if shape_only:
            weights[name] = np.zeros(shape, STORAGE)
        elif name.endswith(".gain"):
            weights[name] = np.ones(shape, STORAGE)
        elif name.endswith("bias") or name.endswith((".b1", ".b2", ".bqkv", ".bproj")):
            weights[name] = np.zeros(shape, STORAGE)
        else:
            weights[name] = _trunc_normal(rng, shape, std)
    return weights


def validate_weights(spec: ModelSpec, weights: dict) -> None:
    expected = param_shapes(spec)
    missing = [n for n in expected if n not in weights]
    if missing:
        raise IntegrityError(f"missing weights: {', '.join(missing)}")
    orphans = sorted(set(weights) - set(expected))
    if orphans:
        raise IntegrityError(f"orphan weights not implied by spec: {', '.join(orphans)}")
    for name, shape in expected.items():
        if tuple(weights[name].shape) != shape:
            raise DimensionError(f"{name}: expected shape {shape}, got {tuple(weights[name].shape)}")


def permute_hidden(weights: dict, layer: int, perm: Sequence[int]) -> dict:
    """Reorder hidden neurons of one MLP consistently (rows of w1/b1, columns of w2)."""
    w1, b1, w2, _ = mlp_names(layer)
    perm = np.asarray(perm)
    out = dict(weights)
    out[w1] = np.ascontiguousarray(weights[w1][perm])
    out[b1] = np.ascontiguousarray(weights[b1][perm])
    out[w2] = np.ascontiguousarray(weights[w2][:, perm])
    return out


# ---------------------------------------------------------------------------
# forward

def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=COMPUTE)


def forward_mlp(shape: MlpShape, w1, b1, w2, b2, x, tap: Optional[Sink] = None) -> np.ndarray:
    """``y = W2 gelu(W1 x + b1) + b2`` for each row of ``x``."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != shape.d_in:
        raise DimensionError(f"input {x.shape} does not match d_in={shape.d_in}")
    expect = {"w1": (shape.d_hid, shape.d_in), "b1": (shape.d_hid,),
              "w2": (shape.d_out, shape.d_hid), "b2": (shape.d_out,)}
    for name, arr in zip(expect, (w1, b1, w2, b2)):
        if tuple(np.shape(arr)) != expect[name]:
            raise DimensionError(f"{name}: expected {expect[name]}, got {np.shape(arr)}")
    pre = _f64(x) @ _f64(w1).T + _f64(b1)
    post = gelu(pre)
    if tap is not None:
        tap(pre, post)
    return (post @ _f64(w2).T + _f64(b2)).astype(STORAGE)


def _ln(x, g, b, cache=None, key=None):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    if cache is not None:
        cache[key] = (xhat, rstd)
    return xhat * g + b


def _attention(x, p: dict, prefix: str, heads: int, cache=None):
    B, N, d = x.shape
    hd = d // heads
    qkv = x @ p[prefix + "wqkv"].T + p[prefix + "bqkv"]
    qkv = qkv.reshape(B, N, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(hd)
    att = softmax(scores)
    o = (att @ v).transpose(0, 2, 1, 3).reshape(B, N, d)
    if cache is not None:
        cache[prefix] = (x, q, k, v, att, o)
    return o @ p[prefix + "wproj"].T + p[prefix + "bproj"]


def run(spec: ModelSpec, params: dict, x, taps=None, cache: Optional[dict] = None,
        overwrite: Optional[dict] = None) -> np.ndarray:
    """Float64 forward pass shared by inference, statistics and training.

    ``params`` may hold float32 or float64 arrays. ``taps`` maps layer index to
    a sink. ``overwrite`` maps layer index to ``(indices, values)`` replacing
    those post-activation hidden units before the second MLP linear; it is the
    dense mean-replacement path used to check compensation. When ``cache`` is
    a dict it is filled with the intermediates needed by the backward pass.
    """
    p = {k: _f64(v) for k, v in params.items()}
    x = _f64(x)
    if x.ndim != 3 or x.shape[1:] != spec.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match (batch, *{spec.input_shape})")
    B = x.shape[0]
    d = spec.embed_dim
    if spec.patch_embed is not None:
        if cache is not None:
            cache["input"] = x
        t = x @ p["patch_embed.weight"].T + p["patch_embed.bias"]
        cls = np.broadcast_to(p["cls_token"], (B, 1, d))
        h = np.concatenate([cls, t], axis=1) + p["pos_embed"]
    else:
        h = x
    N = h.shape[1]
    for i, blk in enumerate(spec.blocks):
        pre_ = f"block.{i}."
        if blk.num_heads:
            u = _ln(h, p[pre_ + "ln1.gain"], p[pre_ + "ln1.bias"], cache, pre_ + "ln1")
            h = h + _attention(u, p, pre_ + "attn.", blk.num_heads, cache)
        u = _ln(h, p[pre_ + "ln2.gain"], p[pre_ + "ln2.bias"], cache, pre_ + "ln2")
        u2 = u.reshape(B * N, d)
        pre = u2 @ p[pre_ + "mlp.w1"].T + p[pre_ + "mlp.b1"]
        post = gelu(pre)
        if taps is not None and taps.get(i) is not None:
            taps[i](pre, post)
        if overwrite is not None and i in overwrite:
            idx, vals = overwrite[i]
            post = post.copy()
            post[:, idx] = vals
        if cache is not None:
            cache[pre_ + "mlp"] = (u2, pre, post)
        h = h + (post @ p[pre_ + "mlp.w2"].T + p[pre_ + "mlp.b2"]).reshape(B, N, d)
    z = _ln(h, p["norm.gain"], p["norm.bias"], cache, "norm")
    pooled = z[:, 0] if spec.patch_embed is not None else z.mean(axis=1)
    if cache is not None:
        cache["pooled"] = pooled
        cache["shape"] = (B, N, d)
    return pooled @ p["head.weight"].T + p["head.bias"]


def forward_model(spec: ModelSpec, weights: dict, batch, taps=None) -> np.ndarray:
    """Logits ``(batch, num_classes)`` as float32.

    Blocks are pre-norm (LN, attention, residual, LN, MLP, residual). With a
    patch embedding the class token is read out; otherwise tokens are
    mean-pooled after the final LayerNorm. ``taps`` is a mapping or sequence of
    per-layer sinks receiving every token's hidden activations.
    """
    validate_weights(spec, weights)
    if taps is not None and not isinstance(taps, dict):
        taps = dict(enumerate(taps))
    return run(spec, weights, batch, taps=taps).astype(STORAGE)


# ---------------------------------------------------------------------------
# accounting

def linear_params(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def count_params(spec: ModelSpec) -> int:
    return sum(math.prod(s) for s in param_shapes(spec).values())


def macs_breakdown(spec: ModelSpec) -> dict:
    """Multiply-accumulates per single-sample forward pass, by component.

    Only matrix products count; LayerNorm, softmax, GELU and bias additions
    are excluded.
    """
    d, N = spec.embed_dim, spec.num_tokens
    out = {"patch_embed": 0, "attention": 0, "mlp": 0, "head": d * spec.num_classes}
    if spec.patch_embed is not None:
        out["patch_embed"] = (N - 1) * spec.patch_embed * d
    for b in spec.blocks:
        if b.num_heads:
            # qkv + projection, then q.k^T and att.v
            out["attention"] += N * (3 * d * d + d * d) + N * 2 * N * d
        out["mlp"] += N * (b.mlp.d_in * b.mlp.d_hid + b.mlp.d_hid * b.mlp.d_out)
    return out


def count_macs(spec: ModelSpec) -> int:
    return sum(macs_breakdown(spec).values())


def _plan_layers(plan) -> list:
    return list(getattr(plan, "layers", plan))


def check_plan_indices(spec: ModelSpec, plan) -> list:
    layers = _plan_layers(plan)
    if len(layers) != len(spec.blocks):
        raise PlanError(f"plan covers {len(layers)} layers, model has {len(spec.blocks)}")
    out = []
    for i, (idx, blk) in enumerate(zip(layers, spec.blocks)):
        idx = [int(j) for j in idx]
        if len(set(idx)) != len(idx):
            raise PlanError(f"layer {i}: duplicate pruned indices")
        if any(j < 0 or j >= blk.mlp.d_hid for j in idx):
            raise PlanError(f"layer {i}: pruned index out of range [0, {blk.mlp.d_hid})")
        if len(idx) >= blk.mlp.d_hid:
            raise PlanError(f"layer {i}: cannot prune every hidden neuron")
        out.append(idx)
    return out


def prune_shape(spec: ModelSpec, plan) -> ModelSpec:
    """Spec with each MLP hidden width reduced by that layer's pruned count."""
    layers = check_plan_indices(spec, plan)
    blocks = tuple(
        replace(b, mlp=replace(b.mlp, d_hid=b.mlp.d_hid - len(idx)))
        for b, idx in zip(spec.blocks, layers)
    )
    return replace(spec, blocks=blocks)


# ---------------------------------------------------------------------------
# VBPM serialization

def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def to_bytes(spec: ModelSpec, weights: dict) -> bytes:
    validate_weights(spec, weights)
    entries, blobs, offset = [], [], 0
    for name, shape in param_shapes(spec).items():
        raw = np.ascontiguousarray(weights[name], dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": len(raw)})
        pad = _align(len(raw)) - len(raw)
        blobs.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    manifest = json.dumps({"spec": spec.to_dict(), "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = MAGIC + struct.pack("<Q", len(manifest)) + manifest
    head += b"\0" * (_align(len(head)) - len(head))
    return head + b"".join(blobs)


def from_bytes(buf: bytes):
    if buf[: len(MAGIC)] != MAGIC:
        raise MagicError("not a VBPM model file (bad magic)")
    pos = len(MAGIC)
    if len(buf) < pos + 8:
        raise TruncatedError("truncated before manifest length")
    (mlen,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if len(buf) < pos + mlen:
        raise TruncatedError("truncated manifest")
    try:
        manifest = json.loads(buf[pos: pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    data_start = _align(pos + mlen)
    spec = ModelSpec.from_dict(manifest.get("spec", {}))
    expected = param_shapes(spec)
    entries = manifest.get("tensors", [])
    names = [e.get("name") for e in entries]
    if names != list(expected):
        raise ShapeDisagreementError("manifest tensor list disagrees with spec")
    weights = {}
    for e in entries:
        shape = tuple(e["shape"])
        if shape != expected[e["name"]]:
            raise ShapeDisagreementError(
                f"{e['name']}: manifest shape {shape} disagrees with spec {expected[e['name']]}")
        if e["nbytes"] != 4 * math.prod(shape) or e["offset"] % ALIGN:
            raise ShapeDisagreementError(f"{e['name']}: bad nbytes/offset")
        start = data_start + e["offset"]
        end = start + e["nbytes"]
        if end > len(buf):
            raise TruncatedError(f"{e['name']}: tensor blob truncated")
        weights[e["name"]] = np.frombuffer(buf, dtype="<f4", count=math.prod(shape),
                                           offset=start).astype(STORAGE).reshape(shape)
    return spec, weights


def save_model(spec: ModelSpec, weights: dict, path) -> str:
    from .io import atomic_write_bytes

    data = to_bytes(spec, weights)
    atomic_write_bytes(path, data)
    return fingerprint(data)


def load_model(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise MagicError(f"{path}: not a VBPM model file (bad magic)")
        fh.seek(0)
        return from_bytes(fh.read())


def fingerprint(data: bytes) -> str:
    """64-bit content hash as 16 hex digits."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def model_fingerprint(spec: ModelSpec, weights: dict) -> str:
    return fingerprint(to_bytes(spec, weights))
