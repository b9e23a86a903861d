"""Equivariant capsules and iterative collaborative routing (ICR).

Layouts:

* capsule field      ``(B, N, d, 4, H, W)``  (type, pose dim, group position)
* prediction field   ``(B, N_in, N_out, d_out, 4, H, W)``
* routing weights    ``(B, N_in, N_out, 4, H, W)``

For each output type ``j`` and group position ``g`` the predictions
``Pred_{ij}(g)`` of all input types form a graph with cosine affinities.
Degree centralities of that graph are smoothed ``num_iter`` times by
averaging over each node's ``k`` nearest neighbours (neighbour lists are
fixed from the initial affinities), then softmaxed over ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ops import GConvParams, LayerNormParams, group_correlate, grouped_group_correlate, layer_norm
from .tensor import Tensor, make_op


@dataclass(frozen=True)
class ICRConfig:
    k: int = 3
    num_iter: int = 2
    epsilon: float = 1e-8
    use_pred_layernorm: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.num_iter < 0:
            raise ValueError("num_iter must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


class RoutingState:
    """Routing quantities of one capsule layer.

    Arrays are exposed with the graph axes last: ``affinity``
    ``(B, N_out, 4, H, W, N_in, N_in)``, ``dcen0``/``dcen`` (initial and
    smoothed degree centralities) ``(..., N_in)``, ``neighbors``
    ``(..., N_in, k)``. ``c`` is the differentiable weight tensor in routing
    layout ``(B, N_in, N_out, 4, H, W)``.
    """

    def __init__(self, graph: dict, lead: tuple, c: Tensor):
        self._graph = graph
        self._lead = lead
        self.c = c

    def _last(self, name, n_graph_axes):
        a = self._graph[name]
        a = np.moveaxis(a, list(range(n_graph_axes)), list(range(-n_graph_axes, 0)))
        return a.reshape(self._lead + a.shape[-n_graph_axes:])

    @property
    def affinity(self) -> np.ndarray:
        return self._last("affinity", 2)

    @property
    def dcen0(self) -> np.ndarray:
        return self._last("dcen0", 1)

    @property
    def dcen(self) -> np.ndarray:
        return self._last("dcen", 1)

    @property
    def neighbors(self) -> np.ndarray:
        return self._last("neighbors", 2)

    def weights_graph_last(self) -> np.ndarray:
        return np.moveaxis(self.c.data, 1, -1)


# -- the routing procedure on plain arrays ------------------------------------------------
# Internally the graph axes come first: predictions are (N, d, M) where M
# enumerates every (sample, output type, group position).

def _top_k_neighbors(a: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest off-diagonal entries of each row of ``a`` ``(N, N, M)``.

    Scans columns in increasing order with a strict comparison, so ties go
    to the lowest index.
    """
    N, _, M = a.shape
    taken = np.zeros((N, N, M), dtype=bool)
    taken[np.arange(N), np.arange(N)] = True
    kn = np.empty((N, k, M), dtype=np.int64)
    for t in range(k):
        best = np.full((N, M), -np.inf, dtype=a.dtype)
        arg = np.zeros((N, M), dtype=np.int64)
        for j in range(N):
            better = (a[:, j] > best) & ~taken[:, j]
            best = np.where(better, a[:, j], best)
            arg[better] = j
        kn[:, t] = arg
        np.put_along_axis(taken, arg[:, None], True, axis=1)
    return kn


def _icr_forward(qt: np.ndarray, k: int, num_iter: int, eps: float) -> dict:
    N, _, M = qt.shape
    if N < 2:
        raise ValueError("ICR needs at least two input capsule types")
    if not 1 <= k <= N - 1:
        raise ValueError(f"k={k} out of range [1, {N - 1}]")
    norm = np.sqrt((qt * qt).sum(1))
    den = np.maximum(norm, qt.dtype.type(eps))
    qh = qt / den[:, None]
    a = np.empty((N, N, M), dtype=qt.dtype)
    for i in range(N):
        a[i, i] = 1.0
        for j in range(i + 1, N):
            a[i, j] = a[j, i] = (qh[i] * qh[j]).sum(0)
    dcen0 = a.sum(1)
    kn = _top_k_neighbors(a, k)
    d = dcen0
    flat = kn.reshape(N * k, M)
    for _ in range(num_iter):
        d = np.take_along_axis(d, flat, axis=0).reshape(N, k, M).mean(1)
    z = d.astype(np.float64)
    e = np.exp(z - z.max(0))
    c = e / e.sum(0)
    return dict(affinity=a, dcen0=dcen0, dcen=d, neighbors=kn, c=c, qh=qh, norm=norm, den=den)


def _icr_backward(gc: np.ndarray, g: dict, num_iter: int, eps: float) -> np.ndarray:
    c, kn, qh, norm, den = g["c"], g["neighbors"], g["qh"], g["norm"], g["den"]
    N, k, M = kn.shape
    gd = c * (gc - (c * gc).sum(0))
    if num_iter:
        # d_i = mean_t d_{kn[i, t]}: scatter each node's gradient onto its neighbours
        flat = (kn * M + np.arange(M)).reshape(-1)
        for _ in range(num_iter):
            w = np.broadcast_to(gd[:, None, :] / k, (N, k, M)).reshape(-1)
            gd = np.bincount(flat, weights=w, minlength=N * M).reshape(N, M)
    gd = gd.astype(qh.dtype)
    # dcen0_i = 1 + sum_{j != i} qh_i . qh_j
    total = qh.sum(0)
    weighted = (gd[:, None] * qh).sum(0)
    gqh = gd[:, None] * total[None] + weighted[None] - 2.0 * gd[:, None] * qh
    radial = (qh * gqh).sum(1, keepdims=True)
    big = (norm >= eps)[:, None]
    return np.where(big, (gqh - qh * radial) / den[:, None], gqh / qh.dtype.type(eps))


def icr_graph(q: np.ndarray, k: int, num_iter: int, eps: float = 1e-8) -> dict:
    """ICR on a batch of prediction sets ``q`` ``(M, N, d)``.

    Returns ``affinity`` ``(M, N, N)``, ``dcen0``/``dcen``/``c`` ``(M, N)`` and
    ``neighbors`` ``(M, N, k)``.
    """
    q = np.asarray(q)
    g = _icr_forward(np.ascontiguousarray(q.transpose(1, 2, 0)), k, num_iter, eps)
    return dict(affinity=g["affinity"].transpose(2, 0, 1), dcen0=g["dcen0"].T, dcen=g["dcen"].T,
                neighbors=g["neighbors"].transpose(2, 0, 1), c=g["c"].T)


def icr_weights(pred: Tensor, cfg: ICRConfig) -> RoutingState:
    """Routing weights for a prediction field ``(B, N_in, N_out, d, 4, H, W)``."""
    B, Nin, Nout, d, R, H, W = pred.shape
    qt = np.ascontiguousarray(pred.data.transpose(1, 3, 0, 2, 4, 5, 6)).reshape(Nin, d, -1)
    g = _icr_forward(qt, cfg.k, cfg.num_iter, cfg.epsilon)
    c = g["c"].reshape(Nin, B, Nout, R, H, W).transpose(1, 0, 2, 3, 4, 5)
    c = np.ascontiguousarray(c).astype(pred.data.dtype)

    def fn(gc):
        gct = np.ascontiguousarray(gc.transpose(1, 0, 2, 3, 4, 5)).reshape(Nin, -1)
        gq = _icr_backward(gct, g, cfg.num_iter, cfg.epsilon)
        gq = gq.reshape(Nin, d, B, Nout, R, H, W).transpose(2, 0, 3, 1, 4, 5, 6)
        return (np.ascontiguousarray(gq).astype(pred.data.dtype),)

    c_t = make_op("icr_weights", c, (pred,), fn)
    return RoutingState(g, (B, Nout, R, H, W), c_t)


def check_routing_invariants(state: RoutingState, tol: float = 1e-6):
    """Raise ``AssertionError`` if softmax rows or affinities are malformed."""
    rows = state.c.data.sum(axis=1, dtype=np.float64)
    err = np.abs(rows - 1.0).max()
    assert err <= tol, f"routing weights do not sum to 1 (max error {err:.3g})"
    a = state.affinity
    asym = np.abs(a - np.swapaxes(a, -1, -2)).max()
    assert asym <= tol, f"affinity not symmetric (max error {asym:.3g})"
    diag = np.diagonal(a, axis1=-2, axis2=-1)
    assert np.abs(diag - 1.0).max() <= tol, "affinity diagonal is not 1"
    n = a.shape[-1]
    kn = state.neighbors
    assert kn.min() >= 0 and kn.max() < n, "neighbour index out of range"
    assert not np.any(kn == np.arange(n)[:, None]), "node listed as its own neighbour"


# -- differentiable capsule maps ------------------------------------------------------------

def squash(v: Tensor, axis: int = 2) -> Tensor:
    """``v * |v| / (1 + |v|^2)``: keeps direction, maps the norm to ``|v|^2/(1+|v|^2)``."""
    vd = v.data
    n = np.sqrt((vd.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    s = n / (1.0 + n * n)
    out = (vd * s).astype(vd.dtype)

    def fn(g):
        ds = (1.0 - n * n) / (1.0 + n * n) ** 2
        unit = vd / np.maximum(n, 1e-12)
        radial = (g * vd).sum(axis=axis, keepdims=True)
        return ((g * s + unit * ds * radial).astype(vd.dtype),)

    return make_op("squash", out, (v,), fn)


def weighted_sum(pred: Tensor, c: Tensor) -> Tensor:
    """``sum_i c_ij(g) Pred_ij(g)``: ``(B, Nin, Nout, d, 4, H, W)`` -> ``(B, Nout, d, 4, H, W)``."""
    if c.shape != pred.shape[:3] + pred.shape[4:]:
        raise ValueError(f"weights {c.shape} do not match predictions {pred.shape}")
    pd, cd = pred.data, c.data[:, :, :, None]
    out = (pd * cd).sum(axis=1)

    def fn(g):
        g = g[:, None]
        return g * cd, (g * pd).sum(axis=3)

    return make_op("weighted_sum", out, (pred, c), fn)


def route(pred: Tensor, state: RoutingState) -> Tensor:
    """Deeper capsules ``squash(sum_i c_ij Pred_ij)``."""
    return squash(weighted_sum(pred, state.c), axis=2)


@dataclass
class PrimaryCapsParams:
    conv: GConvParams       # out channels = types * dim
    norm: LayerNormParams   # gain/bias shaped (types, dim)
    types: int
    dim: int

    @classmethod
    def init(cls, rng, c_in: int, types: int, dim: int, k: int = 3):
        conv = GConvParams.init(rng, types * dim, c_in, k, gain=1.0)
        return cls(conv, LayerNormParams.init((types, dim)), types, dim)


def primary_capsules(f: Tensor, p: PrimaryCapsParams, boundary: str = "zero") -> Tensor:
    """Group map ``(B, C, 4, H, W)`` -> layer-normed capsule field ``(B, N, d, 4, H, W)``."""
    h = group_correlate(f, p.conv, boundary)
    B, _, R, H, W = h.shape
    h = T.reshape(h, (B, p.types, p.dim, R, H, W))
    return layer_norm(h, p.norm)


@dataclass
class CapsuleLayerParams:
    """One filter bank per (input type, output type) pair.

    ``weight`` ``(N_in, N_out, d_out, d_in, 4, k, k)``, ``bias`` ``(N_in, N_out, d_out)``.
    """
    weight: Tensor
    bias: Tensor
    icr: ICRConfig
    norm: LayerNormParams | None = None
    stride: int = 1

    @property
    def shape(self):
        n_in, n_out, d_out, d_in = self.weight.shape[:4]
        return n_in, n_out, d_out, d_in

    @classmethod
    def init(cls, rng, n_in: int, d_in: int, n_out: int, d_out: int, icr: ICRConfig, k: int = 3):
        if not 1 <= icr.k <= n_in - 1:
            raise ValueError(f"k={icr.k} out of range for {n_in} input types")
        fan_in = d_in * 4 * k * k
        bound = np.sqrt(3.0 / fan_in)
        w = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out, d_out, d_in, 4, k, k)), requires_grad=True)
        b = T.zeros((n_in, n_out, d_out), requires_grad=True)
        norm = LayerNormParams.init((n_in, n_out, d_out)) if icr.use_pred_layernorm else None
        return cls(w, b, icr, norm)


def predict(caps: Tensor, p: CapsuleLayerParams, boundary: str = "zero") -> Tensor:
    """Predictions ``Pred_ijp = f_i * Psi_ij^p`` for every pair of types."""
    n_in, n_out, d_out, d_in = p.shape
    B, N, D = caps.shape[:3]
    if (N, D) != (n_in, d_in):
        raise ValueError(f"capsules {(N, D)} do not match layer input {(n_in, d_in)}")
    K = p.weight.shape[-1]
    w = T.reshape(p.weight, (n_in, n_out * d_out, d_in, 4, K, K))
    b = T.reshape(p.bias, (n_in, n_out * d_out))
    out = grouped_group_correlate(caps, w, b, p.stride, K // 2, boundary)
    _, _, _, R, H, W = out.shape
    out = T.reshape(out, (B, n_in, n_out, d_out, R, H, W))
    if p.norm is not None:
        out = layer_norm(out, p.norm)
    return out


def capsule_layer(caps: Tensor, p: CapsuleLayerParams, boundary: str = "zero",
                  check: bool = False) -> tuple[Tensor, RoutingState]:
    pred = predict(caps, p, boundary)
    state = icr_weights(pred, p.icr)
    if check:
        check_routing_invariants(state)
    out = route(pred, state)
    if check:
        norms = np.sqrt((out.data.astype(np.float64) ** 2).sum(axis=2))
        assert norms.max(initial=0.0) < 1.0, "squashed capsule norm >= 1"
    return out, state
