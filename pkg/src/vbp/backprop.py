"""Reverse-mode gradients for the models in :mod:`vbp.model`.

Consumes the intermediates that ``model.run(..., cache=...)`` stores and
returns float64 gradients for every parameter.
"""
from __future__ import annotations

import math

import numpy as np

from .model import ModelSpec, run
from .tensor import gelu_grad


def _ln_back(dy, g, xhat, rstd):
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def backward(spec: ModelSpec, params: dict, cache: dict, dlogits) -> dict:
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    dlogits = np.asarray(dlogits, dtype=np.float64)
    B, N, d = cache["shape"]
    g = {}
    pooled = cache["pooled"]
    g["head.weight"] = dlogits.T @ pooled
    g["head.bias"] = dlogits.sum(axis=0)
    dpooled = dlogits @ p["head.weight"]
    dz = np.zeros((B, N, d))
    if spec.patch_embed is not None:
        dz[:, 0] = dpooled
    else:
        dz[:] = dpooled[:, None, :] / N
    xhat, rstd = cache["norm"]
    dh, g["norm.gain"], g["norm.bias"] = _ln_back(dz, p["norm.gain"], xhat, rstd)

    for i in reversed(range(len(spec.blocks))):
        pre_ = f"block.{i}."
        u2, pre, post = cache[pre_ + "mlp"]
        dy = dh.reshape(B * N, d)
        g[pre_ + "mlp.w2"] = dy.T @ post
        g[pre_ + "mlp.b2"] = dy.sum(axis=0)
        dpre = (dy @ p[pre_ + "mlp.w2"]) * gelu_grad(pre)
        g[pre_ + "mlp.w1"] = dpre.T @ u2
        g[pre_ + "mlp.b1"] = dpre.sum(axis=0)
        du = (dpre @ p[pre_ + "mlp.w1"]).reshape(B, N, d)
        xhat, rstd = cache[pre_ + "ln2"]
        dx, g[pre_ + "ln2.gain"], g[pre_ + "ln2.bias"] = _ln_back(du, p[pre_ + "ln2.gain"], xhat, rstd)
        dh = dh + dx

        heads = spec.blocks[i].num_heads
        if heads:
            a = pre_ + "attn."
            x, q, k, v, att, o = cache[a]
            hd = d // heads
            g[a + "wproj"] = dh.reshape(-1, d).T @ o.reshape(-1, d)
            g[a + "bproj"] = dh.sum(axis=(0, 1))
            do = (dh @ p[a + "wproj"]).reshape(B, N, heads, hd).transpose(0, 2, 1, 3)
            datt = do @ v.transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ do
            ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) / math.sqrt(hd)
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, N, 3 * d)
            g[a + "wqkv"] = dqkv.reshape(-1, 3 * d).T @ x.reshape(-1, d)
            g[a + "bqkv"] = dqkv.sum(axis=(0, 1))
            du = dqkv @ p[a + "wqkv"]
            xhat, rstd = cache[pre_ + "ln1"]
            dx, g[pre_ + "ln1.gain"], g[pre_ + "ln1.bias"] = _ln_back(du, p[pre_ + "ln1.gain"], xhat, rstd)
            dh = dh + dx

    if spec.patch_embed is not None:
        g["pos_embed"] = dh.sum(axis=0)
        g["cls_token"] = dh[:, 0].sum(axis=0)
        dt = dh[:, 1:].reshape(-1, d)
        g["patch_embed.weight"] = dt.T @ cache["input"].reshape(-1, spec.patch_embed)
        g["patch_embed.bias"] = dt.sum(axis=0)
    return g


def loss_and_grads(spec: ModelSpec, params: dict, x, loss_fn):
    """``loss_fn(logits) -> (loss, dlogits)``; returns ``(loss, logits, grads)``."""
    cache = {}
    logits = run(spec, params, x, cache=cache)
    loss, dlogits = loss_fn(logits)
    return loss, logits, backward(spec, params, cache, dlogits)
