"""Equivariance audit: does every layer commute with the p4 action?

For each group element ``g`` the model is run on ``act(g, x)`` and every
hidden representation is compared with ``act(g, .)`` of the representation
of ``x``. Logits are compared directly (they should be invariant).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .group import P4Element, act
from .network import Model


@dataclass
class AuditReport:
    layers: dict = field(default_factory=dict)    # name -> max relative error over all g
    routing: dict = field(default_factory=dict)   # caps{i}.c -> max abs error over all g
    logits: float = 0.0                           # max relative change of the logits
    argmax_stable: bool = True
    elements: list = field(default_factory=list)

    def worst(self) -> float:
        vals = list(self.layers.values()) + list(self.routing.values()) + [self.logits]
        return max(vals) if vals else 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst() <= tol and self.argmax_stable

    def rows(self):
        for k, v in self.layers.items():
            yield k, v
        for k, v in self.routing.items():
            yield k, v
        yield "logits", self.logits


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b| / max|b|`` (absolute error when ``b`` is all zeros)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.abs(b).max(initial=0.0)
    err = np.abs(a - b).max(initial=0.0)
    return float(err / scale) if scale > 0 else float(err)


def sample_elements(n_translations: int, size: int, seed: int = 0, rotations=range(4)) -> list[P4Element]:
    """Every rotation paired with ``n_translations`` random integer shifts."""
    rng = np.random.default_rng(seed)
    out = []
    for r in rotations:
        for _ in range(n_translations):
            t = tuple(int(v) for v in rng.integers(-(size // 2), size // 2 + 1, size=2))
            out.append(P4Element(int(r), t))
    return out


def audit_model(model: Model, x: np.ndarray, elements=None, n_translations: int = 8, seed: int = 0) -> AuditReport:
    """Run the audit on images ``x`` ``(B, C, H, W)``.

    Only meaningful for circular boundaries and stride 1 everywhere; other
    configurations simply report their (non-zero) errors.
    """
    x = np.asarray(x)
    if elements is None:
        elements = sample_elements(n_translations, x.shape[-1], seed)
    base_logits, base = model.forward(x, return_hidden=True)
    report = AuditReport(elements=list(elements))
    base_arg = base_logits.data.argmax(axis=1)
    for g in elements:
        logits, hid = model.forward(act(g, x, planar=True), return_hidden=True)
        for name, ref in base.items():
            if name.endswith(".neighbors"):
                continue
            moved = act(g, ref)
            if name.endswith(".c"):
                err = float(np.abs(hid[name].astype(np.float64) - moved).max())
                report.routing[name] = max(report.routing.get(name, 0.0), err)
            else:
                report.layers[name] = max(report.layers.get(name, 0.0), rel_error(hid[name], moved))
        report.logits = max(report.logits, rel_error(logits.data, base_logits.data))
        report.argmax_stable &= bool(np.array_equal(logits.data.argmax(axis=1), base_arg))
    return report


def rotation_invariance(model: Model, x: np.ndarray) -> tuple[float, bool]:
    """Max abs change of the logits under ``rot90^k`` (k = 1, 2, 3) and whether argmax agrees."""
    base = model.forward(x).data
    worst, same = 0.0, True
    for k in (1, 2, 3):
        out = model.forward(np.ascontiguousarray(np.rot90(x, k, axes=(-2, -1)))).data
        worst = max(worst, float(np.abs(out - base).max()))
        same &= bool(np.array_equal(out.argmax(axis=1), base.argmax(axis=1)))
    return worst, same
