"""Differentiable planar, lifting and p4 group correlations and friends.

Layouts (batch axis first):

* planar image      ``(B, C, H, W)``
* group feature map ``(B, C, 4, H, W)``
* grouped variants carry an extra group axis ``G`` after the batch axis and
  one independent filter bank per group.

All correlations follow ``out(x) = sum_y sum_k f_k(y) psi_k(y - x)`` with
the filter centred on its middle tap. The group correlation evaluates
``sum_h f(h) psi(g^{-1} h)`` by correlating the input planes with the
rotated filter bank ``rotate_filter(psi, r)`` for every output rotation r.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .group import rotate_filter, unrotate_filter
from .tensor import Tensor, make_op

BOUNDARIES = ("zero", "circular")


# -- numpy kernels ----------------------------------------------------------------

def _pad(x: np.ndarray, p: int, boundary: str) -> np.ndarray:
    if p == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, widths, mode="wrap" if boundary == "circular" else "constant")


def _unpad(gp: np.ndarray, p: int, boundary: str, H: int, W: int) -> np.ndarray:
    if p == 0:
        return gp
    if boundary != "circular":
        return np.ascontiguousarray(gp[..., p:p + H, p:p + W])
    Hp, Wp = gp.shape[-2:]
    rows = np.zeros(gp.shape[:-2] + (H, Wp), dtype=gp.dtype)
    for i in range(Hp):
        rows[..., (i - p) % H, :] += gp[..., i, :]
    out = np.zeros(gp.shape[:-2] + (H, W), dtype=gp.dtype)
    for j in range(Wp):
        out[..., (j - p) % W] += rows[..., j]
    return out


def _out_size(n: int, k: int, stride: int, p: int) -> int:
    if n + 2 * p < k:
        raise ValueError(f"kernel {k} larger than padded input {n + 2 * p}")
    return (n + 2 * p - k) // stride + 1


def corr_forward(x, w, stride=1, padding=0, boundary="zero"):
    """Grouped planar correlation on raw arrays.

    ``x`` is ``(B, G, C, H, W)`` and ``w`` is ``(G, O, C, K, K)``. Returns the
    output ``(B, G, O, Ho, Wo)`` and a cache for :func:`corr_backward`.
    """
    B, G, C, H, W = x.shape
    _, O, _, K, K2 = w.shape
    if K != K2:
        raise ValueError("non-square kernel")
    Ho, Wo = _out_size(H, K, stride, padding), _out_size(W, K, stride, padding)
    xp = _pad(np.ascontiguousarray(x.transpose(1, 2, 0, 3, 4)), padding, boundary)  # G C B Hp Wp
    cols = np.empty((G, C, K, K, B, Ho, Wo), dtype=x.dtype)
    for a in range(K):
        for b in range(K):
            cols[:, :, a, b] = xp[:, :, :, a:a + stride * (Ho - 1) + 1:stride, b:b + stride * (Wo - 1) + 1:stride]
    cols = cols.reshape(G, C * K * K, B * Ho * Wo)
    wm = w.reshape(G, O, C * K * K)
    out = np.matmul(wm, cols).reshape(G, O, B, Ho, Wo).transpose(2, 0, 1, 3, 4)
    cache = (cols, wm, x.shape, xp.shape, K, stride, padding, boundary, Ho, Wo)
    return np.ascontiguousarray(out), cache


def corr_backward(gout, cache, need_x=True):
    cols, wm, xshape, xpshape, K, stride, padding, boundary, Ho, Wo = cache
    B, G, C, H, W = xshape
    O = gout.shape[2]
    gm = np.ascontiguousarray(gout.transpose(1, 2, 0, 3, 4)).reshape(G, O, B * Ho * Wo)
    gw = np.matmul(gm, cols.transpose(0, 2, 1)).reshape(G, O, C, K, K)
    gx = None
    if need_x:
        gcols = np.matmul(wm.transpose(0, 2, 1), gm).reshape(G, C, K, K, B, Ho, Wo)
        gxp = np.zeros(xpshape, dtype=gout.dtype)  # G C B Hp Wp
        for a in range(K):
            for b in range(K):
                gxp[:, :, :, a:a + stride * (Ho - 1) + 1:stride,
                    b:b + stride * (Wo - 1) + 1:stride] += gcols[:, :, a, b]
        gx = _unpad(gxp, padding, boundary, H, W).transpose(2, 0, 1, 3, 4)
        gx = np.ascontiguousarray(gx)
    return gx, gw


def expand_filters(w: np.ndarray, kind: str) -> np.ndarray:
    """Stack the 4 rotated copies of a grouped filter bank into planar form.

    ``group``: ``(G, O, C, 4, K, K) -> (G, 4O, 4C, K, K)``;
    ``lift``: ``(G, O, C, K, K) -> (G, 4O, C, K, K)``.
    """
    planar = kind == "lift"
    stacked = np.stack([rotate_filter(w, r, planar=planar) for r in range(4)], axis=2)
    G, O, _, C = stacked.shape[:4]
    K = w.shape[-1]
    return stacked.reshape(G, O * 4, C * (1 if planar else 4), K, K)


def fold_filter_grad(gexp: np.ndarray, wshape, kind: str) -> np.ndarray:
    planar = kind == "lift"
    G, O = wshape[:2]
    g = gexp.reshape((G, O, 4) + tuple(wshape[2:]))
    return sum(unrotate_filter(g[:, :, r], r, planar=planar) for r in range(4))


# -- fused differentiable op --------------------------------------------------------

def _correlate(x: Tensor, w: Tensor, b: Tensor | None, kind: str, grouped: bool,
               stride: int, padding: int, boundary: str) -> Tensor:
    if boundary not in BOUNDARIES:
        raise ValueError(f"unknown boundary mode {boundary!r}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    xd, wd = x.data, w.data
    if not grouped:
        xd, wd = xd[:, None], wd[None]
    B, G = xd.shape[:2]
    if wd.shape[0] != G:
        raise ValueError(f"filter groups {wd.shape[0]} != input groups {G}")
    if wd.shape[-1] != wd.shape[-2]:
        raise ValueError("non-square kernel")
    C = xd.shape[2]
    if wd.shape[2] != C:
        raise ValueError(f"input channels {C} != filter channels {wd.shape[2]}")
    if kind == "group":
        if xd.shape[3] != 4 or wd.shape[3] != 4:
            raise ValueError("group correlation needs rotation extent 4 on input and filter")
        H, W = xd.shape[-2:]
        x5 = xd.reshape(B, G, C * 4, H, W)
        wexp = expand_filters(wd, kind)
    elif kind == "lift":
        x5 = xd
        wexp = expand_filters(wd, kind)
    else:
        x5, wexp = xd, wd
    out, cache = corr_forward(x5, wexp, stride, padding, boundary)
    O = wd.shape[1]
    Ho, Wo = out.shape[-2:]
    rot = 1 if kind == "planar" else 4
    out = out.reshape(B, G, O, rot, Ho, Wo)
    if b is not None:
        bd = b.data if grouped else b.data[None]
        out = out + bd.reshape(1, G, O, 1, 1, 1)
    shape = (B, O, Ho, Wo) if kind == "planar" else (B, O, 4, Ho, Wo)
    if grouped:
        shape = shape[:1] + (G,) + shape[1:]
    out = out.reshape(shape)

    def fn(g):
        g6 = g.reshape(B, G, O, rot, Ho, Wo)
        gb = None
        if b is not None:
            gb = g6.sum(axis=(0, 3, 4, 5))
            gb = gb if grouped else gb[0]
        gx, gwexp = corr_backward(g6.reshape(B, G, O * rot, Ho, Wo), cache, need_x=x.requires_grad)
        gw = gwexp if kind == "planar" else fold_filter_grad(gwexp, wd.shape, kind)
        if not grouped:
            gw = gw[0]
        if gx is not None:
            gx = gx.reshape(x.shape)
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return make_op(f"{kind}_correlate", out, inputs, fn)


# -- parameter containers -------------------------------------------------------------

@dataclass
class Conv2dParams:
    weight: Tensor              # (out, in, k, k)
    bias: Tensor | None = None  # (out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.shape[-1] != self.weight.shape[-2]:
            raise ValueError("non-square kernel")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass
class GConvParams:
    """Lifting weights are ``(out, in, k, k)``; group weights ``(out, in, 4, k, k)``."""
    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.shape[-1] != self.weight.shape[-2]:
            raise ValueError("non-square kernel")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def lifting(self) -> bool:
        return self.weight.ndim == 4

    @classmethod
    def init(cls, rng: np.random.Generator, c_out: int, c_in: int, k: int = 3,
             lifting: bool = False, stride: int = 1, gain: float = 2.0, bias: bool = True):
        fan_in = c_in * k * k * (1 if lifting else 4)
        bound = np.sqrt(3.0 * gain / fan_in)
        shape = (c_out, c_in, k, k) if lifting else (c_out, c_in, 4, k, k)
        w = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        b = T.zeros((c_out,), requires_grad=True) if bias else None
        return cls(w, b, stride=stride, padding=k // 2)


@dataclass
class LayerNormParams:
    """``gain``/``bias`` cover the leading non-batch axes and broadcast over the rest."""
    gain: Tensor
    bias: Tensor
    epsilon: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def init(cls, shape, epsilon: float = 1e-5):
        return cls(T.ones(shape, requires_grad=True), T.zeros(shape, requires_grad=True), epsilon)


# -- public ops ---------------------------------------------------------------------------

def _batched(x: Tensor, n: int):
    if x.ndim == n - 1:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def correlate2d(f: Tensor, p: Conv2dParams, boundary: str = "zero") -> Tensor:
    """Planar correlation of ``(B, C, H, W)`` (or unbatched ``(C, H, W)``) input."""
    f, squeeze = _batched(f, 4)
    out = _correlate(f, p.weight, p.bias, "planar", False, p.stride, p.padding, boundary)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def lift_correlate(f: Tensor, p: GConvParams, boundary: str = "zero") -> Tensor:
    """Planar ``(B, C, H, W)`` input to a group map ``(B, C', 4, H', W')``."""
    if not p.lifting:
        raise ValueError("lift_correlate needs lifting-shaped weights (out, in, k, k)")
    f, squeeze = _batched(f, 4)
    out = _correlate(f, p.weight, p.bias, "lift", False, p.stride, p.padding, boundary)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def group_correlate(f: Tensor, p: GConvParams, boundary: str = "zero") -> Tensor:
    """Group map ``(B, C, 4, H, W)`` to ``(B, C', 4, H', W')``."""
    if p.lifting:
        raise ValueError("group_correlate needs group-shaped weights (out, in, 4, k, k)")
    f, squeeze = _batched(f, 5)
    out = _correlate(f, p.weight, p.bias, "group", False, p.stride, p.padding, boundary)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def grouped_group_correlate(f: Tensor, weight: Tensor, bias: Tensor | None = None,
                            stride: int = 1, padding: int = 0, boundary: str = "zero") -> Tensor:
    """Independent group correlations per group: ``(B, G, C, 4, H, W)`` with
    filters ``(G, O, C, 4, k, k)`` and bias ``(G, O)`` to ``(B, G, O, 4, H', W')``."""
    return _correlate(f, weight, bias, "group", True, stride, padding, boundary)


def layer_norm(x: Tensor, p: LayerNormParams | None = None, axes=None, epsilon: float = 1e-5) -> Tensor:
    """Normalise over ``axes`` (default: every non-batch axis), then apply the affine map.

    ``p.gain`` has shape ``x.shape[1:1 + gain.ndim]`` and broadcasts over the
    remaining trailing axes.
    """
    axes = tuple(range(1, x.ndim)) if axes is None else tuple(a % x.ndim for a in axes)
    if not axes:
        raise ValueError("layer_norm needs at least one axis")
    eps = p.epsilon if p is not None else epsilon
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True, dtype=np.float64)
    var = ((xd - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = ((xd - mu) * inv).astype(xd.dtype)
    if p is None:
        def fn(g):
            m1 = g.mean(axis=axes, keepdims=True)
            m2 = (g * xhat).mean(axis=axes, keepdims=True)
            return (inv * (g - m1 - xhat * m2),)
        return make_op("layer_norm", xhat, (x,), fn)

    gshape = p.gain.shape
    bshape = (1,) + gshape + (1,) * (x.ndim - 1 - len(gshape))
    if x.shape[1:1 + len(gshape)] != gshape:
        raise ValueError(f"gain shape {gshape} does not match {x.shape}")
    gain = p.gain.data.reshape(bshape)
    out = xhat * gain + p.bias.data.reshape(bshape)
    red = (0,) + tuple(range(1 + len(gshape), x.ndim))

    def fn(g):
        gg = (g * xhat).sum(axis=red).reshape(gshape)
        gb = g.sum(axis=red).reshape(gshape)
        gxh = g * gain
        m1 = gxh.mean(axis=axes, keepdims=True)
        m2 = (gxh * xhat).mean(axis=axes, keepdims=True)
        return inv * (gxh - m1 - xhat * m2), gg, gb

    return make_op("layer_norm", out, (x, p.gain, p.bias), fn)


@dataclass
class ResidualParams:
    conv1: GConvParams
    conv2: GConvParams
    shortcut: GConvParams | None = None

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, stride: int = 1, k: int = 3):
        conv1 = GConvParams.init(rng, c_out, c_in, k, stride=stride)
        conv2 = GConvParams.init(rng, c_out, c_out, k, gain=1.0)
        shortcut = None
        if c_in != c_out or stride != 1:
            shortcut = GConvParams.init(rng, c_out, c_in, 1, stride=stride, gain=1.0)
        return cls(conv1, conv2, shortcut)


def residual_block(f: Tensor, p: ResidualParams, boundary: str = "zero") -> Tensor:
    """``relu(conv2(relu(conv1(f))) + shortcut(f))``."""
    h = T.relu(group_correlate(f, p.conv1, boundary))
    h = group_correlate(h, p.conv2, boundary)
    s = f if p.shortcut is None else group_correlate(f, p.shortcut, boundary)
    if s.shape != h.shape:
        raise ValueError(f"shortcut shape {s.shape} != block output {h.shape}; add a projection")
    return T.relu(T.add(h, s))


def capsule_linear(caps: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-type linear map of the capsule dimension to one channel.

    ``caps`` ``(B, C, D, 4, H, W)``, ``weight`` ``(C, D)``, ``bias`` ``(C,)``
    -> ``(B, C, 4, H, W)``. This is a group correlation whose filter is
    supported on the identity element only.
    """
    cd = caps.data
    out = np.einsum("bcdrhw,cd->bcrhw", cd, weight.data) + bias.data[None, :, None, None, None]

    def fn(g):
        gc = np.einsum("bcrhw,cd->bcdrhw", g, weight.data)
        gw = np.einsum("bcrhw,bcdrhw->cd", g, cd)
        gb = g.sum(axis=(0, 2, 3, 4))
        return gc, gw, gb

    return make_op("capsule_linear", np.ascontiguousarray(out), (caps, weight, bias), fn)


def project_logits(class_caps: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Class capsules ``(B, C, D, 4, H, W)`` to logits ``(B, C)``:
    linear ``D -> 1`` per class, mean over positions, max over rotations."""
    scores = capsule_linear(class_caps, weight, bias)
    return T.max(T.mean(scores, axis=(3, 4)), axis=2)


def _log_softmax(xd: np.ndarray, axis: int = -1) -> np.ndarray:
    m = xd.max(axis=axis, keepdims=True)
    return xd - (m + np.log(np.exp(xd - m).sum(axis=axis, keepdims=True)))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax(x.data, axis)
    sm = np.exp(out)
    return make_op("log_softmax", out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` ``(B, C)``."""
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise ValueError("labels must be integers in [0, C) with one per sample")
    ls = _log_softmax(logits.data)
    loss = -ls[np.arange(B), labels].mean(dtype=np.float64)
    sm = np.exp(ls)

    def fn(g):
        gl = sm.copy()
        gl[np.arange(B), labels] -= 1.0
        return (gl * (g / B),)

    return make_op("cross_entropy", np.asarray(loss, dtype=logits.data.dtype), (logits,), fn)
