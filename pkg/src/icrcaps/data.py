"""Datasets: IDX / CIFAR binary readers, a synthetic shape set, and the
translate-then-rotate test protocol (5 levels of geometric noise)."""
from __future__ import annotations

import dataclasses
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray          # (N,) int64
    name: str = ""
    num_classes: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return dataclasses.replace(self, images=self.images[idx], labels=self.labels[idx], meta={})

    def save(self, path):
        np.savez(path, images=self.images, labels=self.labels,
                 name=np.array(self.name), num_classes=np.array(self.num_classes))

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["images"], z["labels"], str(z["name"]), int(z["num_classes"]))


# -- IDX -----------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    """Parse a big-endian IDX file of unsigned bytes (type code 0x08)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0:
        raise FormatError(f"{path}: bad magic")
    if dtype != 0x08:
        raise FormatError(f"{path}: unsupported element type 0x{dtype:02x} (expected 0x08)")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = math.prod(dims)
    if len(raw) - header < n:
        raise FormatError(f"{path}: truncated data ({len(raw) - header} of {n} bytes)")
    if len(raw) - header > n:
        raise FormatError(f"{path}: {len(raw) - header - n} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx", num_classes: int = 0) -> Dataset:
    """Images ``(N, H, W)`` scaled to [0, 1] plus labels ``(N,)``."""
    imgs = read_idx(images_path)
    labels = read_idx(labels_path)
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    elif imgs.ndim != 4:
        raise FormatError(f"{images_path}: expected 3 or 4 dims, got {imgs.ndim}")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: labels must be 1-D")
    if len(labels) != len(imgs):
        raise FormatError(f"{len(imgs)} images but {len(labels)} labels")
    return Dataset(imgs.astype(np.float32) / 255.0, labels.astype(np.int64), name, num_classes)


# -- CIFAR -------------------------------------------------------------------------------

CIFAR_PIXELS = 3 * 32 * 32


def load_cifar_bin(paths, cifar100: bool = False, label: str = "fine", name: str | None = None) -> Dataset:
    """CIFAR binary records: label byte(s) then 3072 channel-major pixels.

    CIFAR-100 records carry ``coarse, fine`` label bytes; ``label`` picks one.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    nlab = 2 if cifar100 else 1
    if cifar100 and label not in ("fine", "coarse"):
        raise ValueError("label must be 'fine' or 'coarse'")
    rec = nlab + CIFAR_PIXELS
    chunks = []
    for p in paths:
        with open(p, "rb") as fh:
            raw = fh.read()
        if len(raw) == 0 or len(raw) % rec:
            raise FormatError(f"{p}: length {len(raw)} is not a multiple of the record size {rec}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec))
    data = np.concatenate(chunks)
    col = 1 if (cifar100 and label == "fine") else 0
    labels = data[:, col].astype(np.int64)
    images = data[:, nlab:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    n_cls = (100 if label == "fine" else 20) if cifar100 else 10
    return Dataset(images, labels, name or ("cifar100" if cifar100 else "cifar10"), n_cls)


# -- synthetic shapes ----------------------------------------------------------------------

SHAPES = ("disk", "square", "cross", "triangle")


def _shape_mask(kind: str, y: np.ndarray, x: np.ndarray, r: float) -> np.ndarray:
    if kind == "disk":
        return y * y + x * x <= r * r
    if kind == "square":
        s = 0.8 * r
        return (np.abs(y) <= s) & (np.abs(x) <= s)
    if kind == "cross":
        w = 0.35 * r
        return ((np.abs(y) <= r) & (np.abs(x) <= w)) | ((np.abs(x) <= r) & (np.abs(y) <= w))
    if kind == "triangle":
        # apex up, equilateral, centroid at the origin
        top, base = -r, 0.5 * r
        half = (y - top) / (base - top) * r * math.sqrt(3) / 2 * 1.15
        return (y >= top) & (y <= base) & (np.abs(x) <= half)
    raise ValueError(kind)


def render_shape(kind: str, size: int, center, radius: float, supersample: int = 4) -> np.ndarray:
    """Anti-aliased binary shape by supersampled coverage."""
    s = supersample
    coords = (np.arange(size * s) + 0.5) / s - 0.5
    y, x = np.meshgrid(coords - center[0], coords - center[1], indexing="ij")
    mask = _shape_mask(kind, y, x, radius).astype(np.float32)
    return mask.reshape(size, s, size, s).mean(axis=(1, 3))


def gen_synthetic(classes: int = 4, n_per_class: int = 100, size: int = 16, seed: int = 0,
                  jitter: float = 1.5) -> Dataset:
    """Balanced anti-aliased shapes with random sub-pixel position and size jitter."""
    if not 1 <= classes <= len(SHAPES):
        raise ValueError(f"classes must be in [1, {len(SHAPES)}]")
    rng = np.random.default_rng(seed)
    n = classes * n_per_class
    labels = np.repeat(np.arange(classes), n_per_class)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, 1, size, size), dtype=np.float32)
    mid = (size - 1) / 2
    for i, c in enumerate(labels):
        center = mid + rng.uniform(-jitter, jitter, size=2)
        radius = size * 0.25 * rng.uniform(0.9, 1.1)
        images[i, 0] = render_shape(SHAPES[c], size, center, radius)
    return Dataset(images, labels, "synth", classes)


# -- geometric transforms -------------------------------------------------------------------

@dataclass(frozen=True)
class TransformSpec:
    max_translation: int = 0
    rotation: tuple = (0.0, 0.0)
    interpolation: str = "bilinear"
    fill: float = 0.0

    def __post_init__(self):
        lo, hi = self.rotation
        if lo > hi:
            raise ValueError("rotation range must satisfy lo <= hi")
        if self.max_translation < 0:
            raise ValueError("max_translation must be >= 0")
        if self.interpolation not in ("nearest", "bilinear"):
            raise ValueError("interpolation must be 'nearest' or 'bilinear'")

    @property
    def is_identity(self) -> bool:
        return self.max_translation == 0 and self.rotation == (0.0, 0.0)

    @property
    def label(self) -> str:
        return f"({self.max_translation}, {max(abs(self.rotation[0]), abs(self.rotation[1])):g}°)"


def _exact_trig(angle: float) -> tuple[float, float]:
    q, rem = divmod(angle, 90.0)
    if rem == 0.0:
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(q) % 4]
    t = math.radians(angle)
    return math.cos(t), math.sin(t)


def shift_image(img: np.ndarray, dy: int, dx: int, fill: float = 0.0) -> np.ndarray:
    out = np.full_like(img, fill)
    H, W = img.shape[-2:]
    out[..., max(0, dy):min(H, H + dy), max(0, dx):min(W, W + dx)] = \
        img[..., max(0, -dy):min(H, H - dy), max(0, -dx):min(W, W - dx)]
    return out


def rotate_image(img: np.ndarray, angle: float, interpolation: str = "bilinear", fill: float = 0.0) -> np.ndarray:
    """Rotate ``(C, H, W)`` about the image centre by ``angle`` degrees.

    Positive angles turn the picture counter-clockwise, matching ``np.rot90``.
    """
    if angle == 0.0:
        return img.copy()
    C, H, W = img.shape
    cos, sin = _exact_trig(angle)
    cy, cx = (H - 1) / 2, (W - 1) / 2
    yy, xx = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
    # sample the input at R(-angle) applied to the output offset
    src_y = cos * yy + sin * xx + cy
    src_x = -sin * yy + cos * xx + cx
    order = 0 if interpolation == "nearest" else 1
    out = np.empty_like(img)
    for c in range(C):
        out[c] = ndimage.map_coordinates(img[c], [src_y, src_x], order=order, mode="constant", cval=fill)
    return out


def sample_transform(spec: TransformSpec, rng: np.random.Generator) -> tuple[int, int, float]:
    m = spec.max_translation
    dy, dx = (int(v) for v in rng.integers(-m, m + 1, size=2)) if m else (0, 0)
    lo, hi = spec.rotation
    angle = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return dy, dx, angle


def apply_transform(img: np.ndarray, spec: TransformSpec, rng: np.random.Generator,
                    return_params: bool = False):
    """Random integer translation in ``[-m, m]^2`` followed by a random rotation."""
    img = np.asarray(img, dtype=np.float32)
    if spec.is_identity:
        return (img.copy(), (0, 0, 0.0)) if return_params else img.copy()
    dy, dx, angle = sample_transform(spec, rng)
    out = shift_image(img, dy, dx, spec.fill)
    out = rotate_image(out, angle, spec.interpolation, spec.fill)
    return (out, (dy, dx, angle)) if return_params else out


def transform_dataset(ds: Dataset, spec: TransformSpec, seed) -> Dataset:
    rng = np.random.default_rng(seed)
    out = np.empty_like(ds.images)
    params = np.zeros((len(ds), 3))
    for i, img in enumerate(ds.images):
        out[i], params[i] = apply_transform(img, spec, rng, return_params=True)
    return Dataset(out, ds.labels.copy(), ds.name, ds.num_classes,
                   meta={"shift": params[:, :2].astype(int), "angle": params[:, 2], "spec": spec})


DEFAULT_SUITE = (
    TransformSpec(0, (0.0, 0.0)),
    TransformSpec(2, (-30.0, 30.0)),
    TransformSpec(2, (-60.0, 60.0)),
    TransformSpec(2, (-90.0, 90.0)),
    TransformSpec(2, (-180.0, 180.0)),
)


@dataclass(frozen=True)
class TestSuiteSpec:
    __test__ = False  # not a pytest class
    levels: tuple = DEFAULT_SUITE

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ValueError("a test suite has exactly 5 levels")
        if not self.levels[0].is_identity:
            raise ValueError("level 1 must be the identity transform")

    @property
    def labels(self) -> list[str]:
        return [lv.label for lv in self.levels]


def make_test_suites(base: Dataset, spec: TestSuiteSpec = TestSuiteSpec(), seed: int = 0) -> list[Dataset]:
    """Five transformed copies of ``base``; level ``i`` is seeded by ``(seed, i)``."""
    suites = []
    for i, lv in enumerate(spec.levels):
        ds = transform_dataset(base, lv, (seed, i))
        ds.name = f"{base.name}{lv.label}"
        suites.append(ds)
    return suites
