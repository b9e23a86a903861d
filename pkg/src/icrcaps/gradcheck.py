"""Central finite-difference gradient checks against the tape."""
from __future__ import annotations

import numpy as np

from .tensor import GradTape, Tensor


def numeric_grad(fn, params: list[Tensor], step: float = 1e-3, coords: int | None = None,
                 rng: np.random.Generator | None = None, signature=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Finite-difference estimate for (a sample of) the coordinates of each param.

    ``fn()`` must return a scalar :class:`Tensor`. Returns ``(flat_indices,
    estimates)`` per param. Run under ``precision(np.float64)``.

    ``signature()``, if given, summarises the discrete state of the function
    (e.g. k-NN lists). Coordinates whose +/- step changes it straddle a
    discontinuity; their estimate is NaN.
    """
    rng = rng or np.random.default_rng(0)
    out = []
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size) if coords is None or coords >= flat.size else \
            rng.choice(flat.size, size=coords, replace=False)
        est = np.empty(len(idx))
        base = signature() if signature else None
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            hi = fn().item()
            jump = signature is not None and not _same(signature(), base)
            flat[i] = old - step
            lo = fn().item()
            jump = jump or (signature is not None and not _same(signature(), base))
            flat[i] = old
            est[n] = np.nan if jump else (hi - lo) / (2 * step)
        out.append((idx, est))
    return out


def _same(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b, strict=True))


def analytic_grad(fn, params: list[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with GradTape() as tape:
        loss = fn()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def gradcheck(fn, params: list[Tensor], step: float = 1e-3, rtol: float = 1e-3, atol: float = 1e-6,
              coords: int | None = None, seed: int = 0, signature=None) -> float:
    """Largest relative error ``|a - n| / max(|a|, |n|)`` over entries with magnitude above ``atol``.

    Returns the error; callers compare it against ``rtol``. Coordinates
    flagged by ``signature`` (see :func:`numeric_grad`) are skipped.
    """
    analytic = analytic_grad(fn, params)
    numeric = numeric_grad(fn, params, step, coords, np.random.default_rng(seed), signature)
    worst = 0.0
    for a, (idx, n) in zip(analytic, numeric):
        a = a.reshape(-1)[idx]
        scale = np.maximum(np.abs(a), np.abs(n))
        mask = (scale > atol) & ~np.isnan(n)
        if mask.any():
            worst = max(worst, float((np.abs(a - n)[mask] / scale[mask]).max()))
    return worst
