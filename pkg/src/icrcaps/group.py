"""The p4 group: integer translations composed with 90-degree rotations.

Spatial points are ``(row, col)`` offsets measured from the grid centre.
``R(1)`` maps ``(1, 0) -> (0, 1)``, which on an array is ``np.rot90(k=1)``
(counter-clockwise as displayed). Even-sized grids rotate about their
half-integer centre, so a 90-degree rotation is an exact index permutation.

Group feature maps carry their group axes last: ``(..., rotation=4, H, W)``.
Planar maps carry ``(..., H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ROT = np.array(
    [[[1, 0], [0, 1]], [[0, -1], [1, 0]], [[-1, 0], [0, -1]], [[0, 1], [-1, 0]]],
    dtype=np.int64,
)


def rotation_matrix(r: int) -> np.ndarray:
    """2x2 integer matrix of the rotation by ``90 * r`` degrees."""
    return _ROT[r % 4]


@dataclass(frozen=True)
class P4Element:
    r: int = 0
    t: tuple[int, int] = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "r", int(self.r) % 4)
        object.__setattr__(self, "t", (int(self.t[0]), int(self.t[1])))

    def __mul__(self, other: "P4Element") -> "P4Element":
        return compose(self, other)

    def apply(self, x) -> tuple[int, int]:
        """Act on a point: ``R(r) x + t``."""
        v = rotation_matrix(self.r) @ np.asarray(x, dtype=np.int64)
        return (int(v[0] + self.t[0]), int(v[1] + self.t[1]))


IDENTITY = P4Element()


def compose(a: P4Element, b: P4Element) -> P4Element:
    t = rotation_matrix(a.r) @ np.asarray(b.t, dtype=np.int64)
    return P4Element(a.r + b.r, (a.t[0] + t[0], a.t[1] + t[1]))


def inverse(a: P4Element) -> P4Element:
    t = -(rotation_matrix(-a.r) @ np.asarray(a.t, dtype=np.int64))
    return P4Element(-a.r, (t[0], t[1]))


def elements(max_shift: int = 0):
    """All elements with ``|t_i| <= max_shift``."""
    rng = range(-max_shift, max_shift + 1)
    return [P4Element(r, (a, b)) for r in range(4) for a in rng for b in rng]


def _translate(x: np.ndarray, t, circular: bool) -> np.ndarray:
    if t == (0, 0):
        return x
    if circular:
        return np.roll(x, shift=t, axis=(-2, -1))
    out = np.zeros_like(x)
    H, W = x.shape[-2:]
    du, dv = t
    src_r = slice(max(0, -du), min(H, H - du))
    dst_r = slice(max(0, du), min(H, H + du))
    src_c = slice(max(0, -dv), min(W, W - dv))
    dst_c = slice(max(0, dv), min(W, W + dv))
    out[..., dst_r, dst_c] = x[..., src_r, src_c]
    return out


def act(g: P4Element, f: np.ndarray, planar: bool = False, circular: bool = True) -> np.ndarray:
    """The left-regular action ``[L_g f](h) = f(g^{-1} h)``.

    For group maps this rotates the spatial plane, cyclically shifts the
    rotation axis (``axis=-3``) by ``g.r`` and then translates by ``g.t``.
    Planar maps (``planar=True``) only get the spatial part. With
    ``circular=False`` translated-out values are dropped and zeros enter.
    """
    f = np.asarray(f)
    if f.shape[-1] != f.shape[-2] and g.r % 2:
        raise ValueError("odd rotations need square spatial extents")
    out = np.rot90(f, k=g.r, axes=(-2, -1))
    if not planar:
        if f.shape[-3] != 4:
            raise ValueError(f"rotation axis must have extent 4, got {f.shape[-3]}")
        out = np.roll(out, g.r, axis=-3)
    return np.ascontiguousarray(_translate(out, g.t, circular))


def rotate_filter(w: np.ndarray, r: int, planar: bool = False) -> np.ndarray:
    """Filter seen from the rotated frame: ``w_r(s, d) = w(s - r, R(-r) d)``.

    ``w`` is ``(..., 4, k, k)`` (or ``(..., k, k)`` with ``planar=True``).
    """
    w = np.asarray(w)
    if w.shape[-1] != w.shape[-2]:
        raise ValueError(f"non-square kernel {w.shape[-2:]}")
    out = np.rot90(w, k=r % 4, axes=(-2, -1))
    if not planar:
        out = np.roll(out, r % 4, axis=-3)
    return np.ascontiguousarray(out)


def unrotate_filter(w: np.ndarray, r: int, planar: bool = False) -> np.ndarray:
    """Inverse of :func:`rotate_filter` (it is a permutation, so also its adjoint)."""
    out = w
    if not planar:
        out = np.roll(out, -(r % 4), axis=-3)
    return np.ascontiguousarray(np.rot90(out, k=-(r % 4), axes=(-2, -1)))
