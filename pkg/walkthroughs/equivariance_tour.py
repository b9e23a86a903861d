"""Tour of the p4 action and an end-to-end equivariance audit.

Run: python walkthroughs/equivariance_tour.py
"""
import numpy as np

from icrcaps import tensor as T
from icrcaps.audit import audit_model
from icrcaps.group import P4Element, act, compose, inverse
from icrcaps.network import Model, ModelConfig
from icrcaps.ops import GConvParams, lift_correlate

rng = np.random.default_rng(0)

# group algebra: r then a shift, and back again
g = P4Element(1, (2, -1))
h = P4Element(3, (0, 4))
print("g*h =", compose(g, h), "  g*g^-1 =", compose(g, inverse(g)))

# the action on a planar image is rot90 followed by a (circular) shift
img = rng.uniform(size=(1, 8, 8))
moved = act(P4Element(1, (0, 0)), img, planar=True)
print("r acts as rot90:", np.array_equal(moved, np.rot90(img, 1, axes=(-2, -1))))

# lifting correlation commutes with the action
with T.precision(np.float64):
    p = GConvParams.init(rng, 3, 1, 3, lifting=True)
    out = lift_correlate(T.tensor(img[None]), p, boundary="circular").data
    out_g = lift_correlate(T.tensor(act(g, img, planar=True)[None]), p, boundary="circular").data
print("lift(g.x) == g.lift(x):", np.allclose(out_g, act(g, out), atol=1e-12))

# a whole desk-scale model in audit mode: every layer moves with the input
with T.precision(np.float64):
    model = Model(ModelConfig().audit_mode())
    x = rng.uniform(size=(1, 1, 16, 16))
    report = audit_model(model, x, n_translations=2)
for name, err in report.rows():
    print(f"  {name:10s} {err:.1e}")
print("passed:", report.passed(1e-4))
