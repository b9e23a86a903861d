"""Finite-difference gradient cases shared by the unit tests and the acceptance run.

Every case returns the worst relative error of analytic vs central-difference
gradients (step 1e-3, float64) over sampled coordinates.
"""
import numpy as np

from icrcaps import tensor as T
from icrcaps.gradcheck import gradcheck
from icrcaps.network import ModelConfig, build
from icrcaps.ops import (Conv2dParams, GConvParams, LayerNormParams, ResidualParams, capsule_linear, correlate2d,
                         cross_entropy, grouped_group_correlate, group_correlate, layer_norm, lift_correlate,
                         project_logits, residual_block)
from icrcaps.routing import (CapsuleLayerParams, ICRConfig, PrimaryCapsParams, capsule_layer, icr_weights,
                             predict, primary_capsules, squash, weighted_sum)
from icrcaps.tensor import Tensor

STEP = 1e-3


class Leaves:
    """Creates trainable tensors once and remembers them for the check."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.all = []

    def __call__(self, *shape, scale=1.0):
        t = Tensor(self.rng.normal(size=shape) * scale, requires_grad=True)
        self.all.append(t)
        return t


def _probe_loss(op, seed):
    """Scalar loss ``sum(op() * r)`` with a fixed random ``r``."""
    probe = Tensor(np.random.default_rng(seed).normal(size=op().shape))
    return lambda: T.sum(T.mul(op(), probe))


# -- tensor primitives --------------------------------------------------------------------

PRIMITIVES = ["add", "sub", "mul", "div", "neg", "relu", "exp", "log", "square",
              "sum", "mean", "max", "reshape", "transpose", "scale"]


def primitive_error(name: str) -> float:
    rng = np.random.default_rng(sum(map(ord, name)))
    with T.precision(np.float64):
        a = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        if name == "log":
            a.data = np.abs(a.data)
        ops = {
            "add": lambda: T.add(a, b), "sub": lambda: T.sub(a, b), "mul": lambda: T.mul(a, b),
            "div": lambda: T.div(a, b), "neg": lambda: T.neg(a), "relu": lambda: T.relu(a),
            "exp": lambda: T.exp(a), "log": lambda: T.log(a), "square": lambda: T.square(a),
            "scale": lambda: T.scale(a, -1.7),
            "reshape": lambda: T.reshape(T.reshape(a, (4, 3)), (3, 4)),
            "transpose": lambda: T.transpose(T.transpose(a, (1, 0)), (1, 0)),
            "sum": lambda: getattr(T, "sum")(a, 1), "mean": lambda: T.mean(a, 1), "max": lambda: T.max(a, 1),
        }
        params = [a, b] if name in ("add", "sub", "mul", "div") else [a]
        return gradcheck(_probe_loss(ops[name], 1), params, step=STEP, atol=1e-6)


# -- equivariant ops ----------------------------------------------------------------------

OPS = ["correlate2d", "correlate2d_circular", "lift", "group", "grouped_group", "layer_norm", "residual",
       "capsule_linear", "project_logits", "cross_entropy"]


def _op(name, P):
    if name == "correlate2d":
        p = Conv2dParams(P(2, 3, 3, 3), P(2), stride=2, padding=1)
        return lambda x: correlate2d(x, p)
    if name == "correlate2d_circular":
        p = Conv2dParams(P(2, 3, 3, 3), None, padding=1)
        return lambda x: correlate2d(x, p, boundary="circular")
    if name == "lift":
        p = GConvParams(P(2, 3, 3, 3), P(2), padding=1)
        return lambda x: lift_correlate(x, p)
    if name == "group":
        p1 = GConvParams(P(2, 3, 3, 3), padding=1)
        p2 = GConvParams(P(2, 2, 4, 3, 3), P(2), stride=2, padding=1)
        return lambda x: group_correlate(lift_correlate(x, p1), p2, boundary="circular")
    if name == "grouped_group":
        p1 = GConvParams(P(4, 3, 1, 1))
        w, b = P(2, 1, 2, 4, 3, 3), P(2, 1)
        return lambda x: grouped_group_correlate(T.reshape(lift_correlate(x, p1), (2, 2, 2, 4, 5, 5)), w, b,
                                                 padding=1)
    if name == "layer_norm":
        p = LayerNormParams(P(3), P(3))
        return lambda x: layer_norm(x, p)
    if name == "residual":
        stem = GConvParams(P(2, 3, 1, 1))
        p = ResidualParams(GConvParams(P(3, 2, 4, 3, 3), P(3), stride=2, padding=1),
                           GConvParams(P(3, 3, 4, 3, 3), P(3), padding=1),
                           GConvParams(P(3, 2, 4, 1, 1), None, stride=2))
        return lambda x: residual_block(lift_correlate(x, stem), p)
    if name == "capsule_linear":
        stem = GConvParams(P(4, 3, 1, 1))
        w, b = P(2, 2), P(2)
        return lambda x: capsule_linear(T.reshape(lift_correlate(x, stem), (2, 2, 2, 4, 5, 5)), w, b)
    if name == "project_logits":
        stem = GConvParams(P(6, 3, 3, 3), padding=1)
        w, b = P(2, 3), P(2)
        return lambda x: project_logits(T.reshape(lift_correlate(x, stem), (2, 2, 3, 4, 5, 5)), w, b)
    if name == "cross_entropy":
        return lambda x: cross_entropy(T.mean(x, axis=(2, 3)), [2, 0])
    raise KeyError(name)


def op_error(name: str, coords: int = 40) -> float:
    with T.precision(np.float64):
        P = Leaves(7)
        x = P(2, 3, 5, 5)
        op = _op(name, P)
        out = op(x)
        fn = (lambda: op(x)) if out.ndim == 0 else _probe_loss(lambda: op(x), 8)
        return gradcheck(fn, P.all, step=STEP, atol=1e-6, coords=coords)


# -- capsules and routing ------------------------------------------------------------------

ROUTING = ["squash", "weighted_sum", "icr_iter0", "icr_iter1", "icr_iter3", "primary_capsules", "predict",
           "capsule_layer", "capsule_layer_layernorm"]


def routing_error(name: str, coords: int = 40) -> float:
    with T.precision(np.float64):
        rng = np.random.default_rng(sum(map(ord, name)))
        signature = None
        if name == "squash":
            v = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
            params, fn = [v], _probe_loss(lambda: squash(v, axis=1), 1)
        elif name == "weighted_sum":
            pred = Tensor(rng.normal(size=(2, 3, 2, 4, 4, 2, 2)), requires_grad=True)
            c = Tensor(rng.uniform(size=(2, 3, 2, 4, 2, 2)), requires_grad=True)
            params, fn = [pred, c], _probe_loss(lambda: weighted_sum(pred, c), 1)
        elif name.startswith("icr_iter"):
            pred = Tensor(rng.normal(size=(2, 5, 2, 3, 4, 2, 2)), requires_grad=True)
            cfg = ICRConfig(k=2, num_iter=int(name[-1]))
            params, fn = [pred], _probe_loss(lambda: icr_weights(pred, cfg).c, 1)
            signature = lambda: [icr_weights(pred, cfg).neighbors]
        elif name == "primary_capsules":
            p = PrimaryCapsParams.init(rng, 2, 2, 3)
            p.norm.gain.data = rng.normal(size=p.norm.gain.shape)
            p.norm.bias.data = rng.normal(size=p.norm.bias.shape)
            f = Tensor(rng.normal(size=(2, 2, 4, 5, 5)), requires_grad=True)
            params = [f, p.conv.weight, p.conv.bias, p.norm.gain, p.norm.bias]
            fn = _probe_loss(lambda: primary_capsules(f, p), 1)
        elif name == "predict":
            p = CapsuleLayerParams.init(rng, 3, 2, 2, 3, ICRConfig(2, 1))
            caps = Tensor(rng.normal(size=(2, 3, 2, 4, 4, 4)), requires_grad=True)
            params, fn = [caps, p.weight, p.bias], _probe_loss(lambda: predict(caps, p), 1)
        elif name.startswith("capsule_layer"):
            ln = name.endswith("layernorm")
            p = CapsuleLayerParams.init(rng, 4, 2, 2, 3, ICRConfig(k=2, num_iter=2, use_pred_layernorm=ln))
            caps = Tensor(rng.normal(size=(2, 4, 2, 4, 3, 3)), requires_grad=True)
            params = [caps, p.weight, p.bias] + ([p.norm.gain, p.norm.bias] if ln else [])
            fn = _probe_loss(lambda: capsule_layer(caps, p)[0], 1)
            signature = lambda: [capsule_layer(caps, p)[1].neighbors]
        else:
            raise KeyError(name)
        # k-NN lists are piecewise constant; coordinates whose step crosses a switch are skipped
        return gradcheck(fn, params, step=STEP, atol=1e-6, coords=coords, signature=signature)


# -- whole model -------------------------------------------------------------------------------

def end_to_end_error(coords: int = 3) -> float:
    """Desk model, cross-entropy on two images; a few coordinates of every parameter tensor."""
    with T.precision(np.float64):
        m = build(ModelConfig())
        x = np.random.default_rng(6).normal(size=(2, 1, 16, 16))
        y = [1, 3]

        def loss():
            return cross_entropy(m.forward(x), y)

        def knn():
            _, h = m.forward(x, return_hidden=True)
            return [h[f"caps{i}.neighbors"] for i in range(len(m.caps))]

        return max(gradcheck(loss, [p], step=STEP, atol=1e-6, coords=coords, seed=i, signature=knn)
                   for i, p in enumerate(m.parameters()))
