"""A small numpy network engine driven by a :class:`~dsa.graph.NetGraph`.

Normal and depthwise conv nodes are fused Conv-BN-ReLU units (``bn`` and
``relu`` attributes, both default on). A per-group channel mask multiplies
the unit's output after BN and ReLU, so BN statistics always see the
unmasked activations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .graph import (
    ADD,
    BN,
    CONCAT,
    CONV_KINDS,
    DENSE,
    DEPTHWISE_CONV,
    INPUT,
    NORMAL_CONV,
    POOL,
    RELU,
    GroupAssignment,
    NetGraph,
    topological_group,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
MODES = ("sampled", "relaxed", "hard")


class ShapeError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ShapeError("inputs and labels differ in length")

    def __len__(self):
        return len(self.labels)


@dataclass
class ModelState:
    """Weights, BN parameters/statistics and optimizer slots of one network."""

    graph: NetGraph
    groups: GroupAssignment
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    dtype: type = np.float64

    @property
    def num_classes(self) -> int:
        return self.graph.shapes[self.graph.output_id].C

    def is_bn_param(self, name: str) -> bool:
        return name.endswith(".gamma") or name.endswith(".beta")

    def copy(self) -> "ModelState":
        return ModelState(
            self.graph,
            self.groups,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            {k: v.copy() for k, v in self.velocity.items()},
            self.dtype,
        )

    def astype(self, dtype) -> "ModelState":
        m = self.copy()
        m.dtype = dtype
        for d in (m.params, m.buffers, m.velocity):
            for k in d:
                d[k] = d[k].astype(dtype)
        return m

    def bn_scale(self, conv_id: str) -> np.ndarray | None:
        return self.params.get(f"{conv_id}.gamma")

    def group_importance(self, k: int) -> np.ndarray:
        """Mean ``|gamma|`` over the group's convs (filter L1 norm for convs without BN)."""
        rows = []
        for cid in self.groups.members(k):
            g = self.bn_scale(cid)
            if g is None:
                w = self.params[f"{cid}.W"]
                g = np.abs(w).reshape(w.shape[0], -1).sum(axis=1)
            rows.append(np.abs(g.astype(np.float64)))
        return np.mean(rows, axis=0)


def init_model(
    graph: NetGraph,
    rng: np.random.Generator,
    groups: GroupAssignment | None = None,
    dtype=np.float64,
    zero_classifier: bool = False,
) -> ModelState:
    groups = groups or topological_group(graph)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for nid in graph.order:
        n = graph[nid]
        s = graph.shapes[nid]
        if n.kind in CONV_KINDS:
            k = int(n.attr("kernel", 3))
            cin = graph.shapes[n.inputs[0]].C
            fan_in = (1 if n.kind == DEPTHWISE_CONV else cin) * k * k
            shape = (s.C, k, k) if n.kind == DEPTHWISE_CONV else (s.C, cin, k, k)
            params[f"{nid}.W"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
            if n.attr("bn", True):
                _init_bn(nid, s.C, params, buffers)
            else:
                params[f"{nid}.bias"] = np.zeros(s.C)
        elif n.kind == BN:
            _init_bn(nid, s.C, params, buffers)
        elif n.kind == DENSE:
            fin = graph.shapes[n.inputs[0]].C * graph.kss(nid)
            if zero_classifier:
                params[f"{nid}.W"] = np.zeros((s.C, fin))
            else:
                params[f"{nid}.W"] = rng.normal(0.0, math.sqrt(1.0 / fin), (s.C, fin))
            params[f"{nid}.bias"] = np.zeros(s.C)
    model = ModelState(graph, groups, params, buffers, {}, np.float64)
    return model.astype(dtype) if dtype != np.float64 else model


def _init_bn(nid, C, params, buffers):
    params[f"{nid}.gamma"] = np.ones(C)
    params[f"{nid}.beta"] = np.zeros(C)
    buffers[f"{nid}.mean"] = np.zeros(C)
    buffers[f"{nid}.var"] = np.ones(C)


# ---- layer primitives -------------------------------------------------------


def _windows(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    w = sliding_window_view(x, (k, k), axis=(2, 3))
    return w[:, :, ::stride, ::stride]  # N, C, Ho, Wo, k, k


def _fold(dwin, x_shape, k, stride, pad):
    N, C, H, W = x_shape
    Ho, Wo = dwin.shape[2], dwin.shape[3]
    dx = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=dwin.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dwin[..., i, j]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


def conv_forward(x, W, stride, pad):
    O, C, k, _ = W.shape
    win = _windows(x, k, stride, pad)
    N, _, Ho, Wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * k * k)
    out = cols @ W.reshape(O, -1).T
    return out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2), cols


def conv_backward(dout, x_shape, W, cols, stride, pad):
    O, C, k, _ = W.shape
    N, _, Ho, Wo = dout.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, O)
    dW = (dmat.T @ cols).reshape(W.shape)
    dcols = (dmat @ W.reshape(O, -1)).reshape(N, Ho, Wo, C, k, k).transpose(0, 3, 1, 2, 4, 5)
    return _fold(dcols, x_shape, k, stride, pad), dW


def dwconv_forward(x, W, stride, pad):
    k = W.shape[-1]
    win = _windows(x, k, stride, pad)
    return np.einsum("nchwij,cij->nchw", win, W, optimize=True), win


def dwconv_backward(dout, x_shape, W, win, stride, pad):
    k = W.shape[-1]
    dW = np.einsum("nchw,nchwij->cij", dout, win, optimize=True)
    dwin = dout[..., None, None] * W[None, :, None, None, :, :]
    return _fold(dwin, x_shape, k, stride, pad), dW


def bn_forward(x, gamma, beta, mean_buf, var_buf, training, update_stats=True):
    if training:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    if training and update_stats:
        n = x.size // x.shape[1]
        mean_buf *= 1 - BN_MOMENTUM
        mean_buf += BN_MOMENTUM * mu
        var_buf *= 1 - BN_MOMENTUM
        var_buf += BN_MOMENTUM * var * n / max(n - 1, 1)
    if not training:
        mu, var = mean_buf, var_buf
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    return xhat * gamma[None, :, None, None] + beta[None, :, None, None], (xhat, inv, training)


def bn_backward(dout, gamma, cache):
    xhat, inv, training = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if not training:
        return dxhat * inv[None, :, None, None], dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = (
        inv[None, :, None, None]
        / m
        * (m * dxhat - dxhat.sum(axis=(0, 2, 3))[None, :, None, None] - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
    )
    return dx, dgamma, dbeta


def pool_forward(x, mode, k, stride):
    if mode == "global":
        return x.mean(axis=(2, 3), keepdims=True), None
    win = _windows(x, k, stride, 0)
    if mode == "avg":
        return win.mean(axis=(-2, -1)), None
    N, C, Ho, Wo = win.shape[:4]
    flat = win.reshape(N, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], arg


def pool_backward(dout, x_shape, mode, k, stride, arg):
    if mode == "global":
        H, W = x_shape[2], x_shape[3]
        return np.broadcast_to(dout / (H * W), x_shape).copy()
    N, C, Ho, Wo = dout.shape
    if mode == "avg":
        dwin = np.broadcast_to(dout[..., None, None] / (k * k), (N, C, Ho, Wo, k, k))
    else:
        dwin = np.zeros((N, C, Ho, Wo, k * k), dtype=dout.dtype)
        np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
        dwin = dwin.reshape(N, C, Ho, Wo, k, k)
    return _fold(dwin, x_shape, k, stride, 0)


def softmax_xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n, logp


# ---- graph-level forward/backward ------------------------------------------


@dataclass
class ForwardCache:
    model: ModelState
    entries: dict
    shapes: dict
    logits: np.ndarray
    dlogits: np.ndarray
    masks: dict
    consumed: bool = False


def _conv_masks(model: ModelState, masks, mode) -> dict[str, np.ndarray]:
    if masks is None:
        return {}
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    widths = model.groups.channels(model.graph)
    if len(masks) != model.groups.K:
        raise ShapeError(f"expected {model.groups.K} group masks, got {len(masks)}")
    out = {}
    for k, m in enumerate(masks):
        if m is None:
            continue
        m = np.asarray(m, dtype=model.dtype)
        if m.shape != (widths[k],):
            raise ShapeError(f"group {k} mask has shape {m.shape}, expected ({widths[k]},)")
        if mode != "relaxed" and not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{mode} masks must be binary")
        for cid in model.groups.members(k):
            out[cid] = m
    return out


def forward(
    model: ModelState,
    batch: Batch,
    masks: Sequence[np.ndarray | None] | None = None,
    mode: str = "sampled",
    training: bool = True,
    update_stats: bool = True,
):
    """Masked forward pass; returns ``(mean cross-entropy, cache)``.

    ``masks[k]`` multiplies the outputs of every conv in group ``k``:
    sampled binary masks, relaxed keep probabilities or hard masks.
    ``training`` selects batch statistics in BN; ``update_stats=False``
    leaves the running statistics untouched.
    """
    graph = model.graph
    conv_mask = _conv_masks(model, masks, mode)
    P, Bf = model.params, model.buffers
    acts: dict[str, np.ndarray] = {}
    entries: dict[str, tuple] = {}
    x_in = np.asarray(batch.inputs, dtype=model.dtype)
    for nid in graph.order:
        n = graph[nid]
        xs = [acts[p] for p in n.inputs]
        if n.kind == INPUT:
            s = graph.shapes[nid]
            y = x_in.reshape(len(x_in), s.C, s.H, s.W)
        elif n.kind in CONV_KINDS:
            k = int(n.attr("kernel", 3))
            stride = int(n.attr("stride", 1))
            pad = int(n.attr("padding", k // 2))
            W = P[f"{nid}.W"]
            if n.kind == NORMAL_CONV:
                y, cols = conv_forward(xs[0], W, stride, pad)
            else:
                y, cols = dwconv_forward(xs[0], W, stride, pad)
            bn_cache = None
            if n.attr("bn", True):
                y, bn_cache = bn_forward(y, P[f"{nid}.gamma"], P[f"{nid}.beta"], Bf[f"{nid}.mean"], Bf[f"{nid}.var"], training, update_stats)
            else:
                y = y + P[f"{nid}.bias"][None, :, None, None]
            relu_mask = None
            if n.attr("relu", True):
                relu_mask = y > 0
                y = y * relu_mask
            pre_mask = y
            m = conv_mask.get(nid)
            if m is not None:
                y = y * m[None, :, None, None]
            entries[nid] = (xs[0].shape, cols, bn_cache, relu_mask, pre_mask, m, k, stride, pad)
        elif n.kind == BN:
            y, c = bn_forward(xs[0], P[f"{nid}.gamma"], P[f"{nid}.beta"], Bf[f"{nid}.mean"], Bf[f"{nid}.var"], training, update_stats)
            entries[nid] = c
        elif n.kind == RELU:
            mask = xs[0] > 0
            y = xs[0] * mask
            entries[nid] = mask
        elif n.kind == POOL:
            mode_ = n.attr("mode", "max")
            k = int(n.attr("kernel", 2))
            stride = int(n.attr("stride", k))
            y, arg = pool_forward(xs[0], mode_, k, stride)
            entries[nid] = (xs[0].shape, mode_, k, stride, arg)
        elif n.kind == ADD:
            y = xs[0]
            for other in xs[1:]:
                y = y + other
        elif n.kind == CONCAT:
            y = np.concatenate(xs, axis=1)
            entries[nid] = [x.shape[1] for x in xs]
        elif n.kind == DENSE:
            flat = xs[0].reshape(len(xs[0]), -1)
            y = flat @ P[f"{nid}.W"].T + P[f"{nid}.bias"]
            y = y[:, :, None, None]
            entries[nid] = (xs[0].shape, flat)
        else:  # pragma: no cover - NetGraph validates kinds
            raise ValueError(n.kind)
        acts[nid] = y
    logits = acts[graph.output_id].reshape(len(x_in), -1)
    labels = batch.labels
    if labels.size and (labels.max() >= logits.shape[1] or labels.min() < 0):
        raise ValueError("label out of range")
    loss, dlogits, logp = softmax_xent(logits, labels)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")
    shapes = {k: v.shape for k, v in acts.items()}
    return loss, ForwardCache(model, entries, shapes, logits, dlogits, conv_mask)


def backward(cache: ForwardCache):
    """Reverse-mode gradients: ``(grads by parameter name, dL/dmask per group)``."""
    if cache.consumed:
        raise RuntimeError("forward cache already consumed by a backward pass")
    cache.consumed = True
    model = cache.model
    graph = model.graph
    P = model.params
    grads = {k: np.zeros_like(v) for k, v in P.items()}
    dmask = [None] * model.groups.K
    out = graph.output_id
    d: dict[str, np.ndarray] = {out: cache.dlogits.reshape(cache.shapes[out]).astype(model.dtype)}

    def acc(nid, g):
        if nid in d:
            d[nid] = d[nid] + g
        else:
            d[nid] = g

    for nid in reversed(graph.order):
        if nid not in d:
            continue
        n = graph[nid]
        dy = d.pop(nid)
        e = cache.entries.get(nid)
        if n.kind == INPUT:
            continue
        if n.kind in CONV_KINDS:
            x_shape, cols, bn_cache, relu_mask, pre_mask, m, k, stride, pad = e
            if m is not None:
                gm = (dy * pre_mask).sum(axis=(0, 2, 3))
                gk = model.groups.group_of[nid]
                dmask[gk] = gm if dmask[gk] is None else dmask[gk] + gm
                dy = dy * m[None, :, None, None]
            if relu_mask is not None:
                dy = dy * relu_mask
            if bn_cache is not None:
                dy, dg, db = bn_backward(dy, P[f"{nid}.gamma"], bn_cache)
                grads[f"{nid}.gamma"] += dg
                grads[f"{nid}.beta"] += db
            else:
                grads[f"{nid}.bias"] += dy.sum(axis=(0, 2, 3))
            if n.kind == NORMAL_CONV:
                dx, dW = conv_backward(dy, x_shape, P[f"{nid}.W"], cols, stride, pad)
            else:
                dx, dW = dwconv_backward(dy, x_shape, P[f"{nid}.W"], cols, stride, pad)
            grads[f"{nid}.W"] += dW
            acc(n.inputs[0], dx)
        elif n.kind == BN:
            dx, dg, db = bn_backward(dy, P[f"{nid}.gamma"], e)
            grads[f"{nid}.gamma"] += dg
            grads[f"{nid}.beta"] += db
            acc(n.inputs[0], dx)
        elif n.kind == RELU:
            acc(n.inputs[0], dy * e)
        elif n.kind == POOL:
            x_shape, mode_, k, stride, arg = e
            acc(n.inputs[0], pool_backward(dy, x_shape, mode_, k, stride, arg))
        elif n.kind == ADD:
            for p in n.inputs:
                acc(p, dy)
        elif n.kind == CONCAT:
            start = 0
            for p, c in zip(n.inputs, e):
                acc(p, dy[:, start : start + c])
                start += c
        elif n.kind == DENSE:
            x_shape, flat = e
            g = dy.reshape(len(dy), -1)
            grads[f"{nid}.W"] += g.T @ flat
            grads[f"{nid}.bias"] += g.sum(axis=0)
            acc(n.inputs[0], (g @ P[f"{nid}.W"]).reshape(x_shape))
    widths = model.groups.channels(graph)
    dmask = [np.zeros(widths[k]) if g is None else g.astype(np.float64) for k, g in enumerate(dmask)]
    return grads, dmask


def sgd_step(
    model: ModelState,
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 4e-5,
    decay_bn: bool = False,
) -> None:
    """In-place momentum SGD: ``v = momentum * v + g + wd * w``; ``w -= lr * v``."""
    for name, w in model.params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {w.shape}")
        if weight_decay and (decay_bn or not model.is_bn_param(name)):
            g = g + weight_decay * w
        if momentum:
            v = model.velocity.get(name)
            v = g.copy() if v is None else momentum * v + g
            model.velocity[name] = v
            g = v
        w -= (lr * g).astype(w.dtype)


def predict(model: ModelState, inputs: np.ndarray, masks=None, mode: str = "hard", batch_size: int = 500) -> np.ndarray:
    out = []
    for i in range(0, len(inputs), batch_size):
        xb = inputs[i : i + batch_size]
        _, cache = forward(model, Batch(xb, np.zeros(len(xb), dtype=np.int64)), masks, mode, training=False)
        out.append(cache.logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: ModelState, inputs, labels, masks=None, mode: str = "hard") -> float:
    return float(np.mean(predict(model, inputs, masks, mode) == np.asarray(labels)))
