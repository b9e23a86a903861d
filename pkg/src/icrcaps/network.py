"""The p4 capsule network with ICR routing, its optimizer and checkpoints.

Pipeline: lifting stem -> residual group-correlation blocks -> primary
capsules -> ICR capsule layers -> class capsules -> logits.
"""
from __future__ import annotations

import dataclasses
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ops import (GConvParams, LayerNormParams, ResidualParams, cross_entropy, layer_norm, lift_correlate,
                  project_logits, residual_block)
from .routing import CapsuleLayerParams, ICRConfig, PrimaryCapsParams, capsule_layer, primary_capsules
from .tensor import GradTape, Tensor

CHECKPOINT_FORMAT = "icrcaps-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture and routing hyperparameters.

    ``hidden`` lists ``(types, dim)`` of the capsule layers between the
    primary and the class capsules; ``icr`` holds one :class:`ICRConfig`
    per routing layer (hidden layers, then the class layer).
    """
    in_channels: int = 1
    block_widths: tuple = (8, 8, 16, 16, 16, 32, 32)
    block_strides: tuple = (1, 1, 2, 1, 2, 1, 1)
    block_norm: bool = True
    kernel_size: int = 3
    primary_types: int = 8
    primary_dim: int = 8
    hidden: tuple = ((8, 8), (8, 8), (8, 8))
    num_classes: int = 4
    class_dim: int = 8
    icr: tuple = (ICRConfig(3, 2), ICRConfig(3, 2), ICRConfig(3, 2), ICRConfig(3, 2))
    boundary: str = "zero"
    seed: int = 0

    def __post_init__(self):
        self.block_widths = tuple(int(w) for w in self.block_widths)
        self.block_strides = tuple(int(s) for s in self.block_strides)
        self.hidden = tuple((int(n), int(d)) for n, d in self.hidden)
        self.icr = tuple(c if isinstance(c, ICRConfig) else ICRConfig(**c) for c in self.icr)
        if not self.block_widths or min(self.block_widths) <= 0:
            raise ValueError("block widths must be positive")
        if len(self.block_strides) != len(self.block_widths):
            raise ValueError("need one stride per block")
        if min(self.block_strides) < 1:
            raise ValueError("strides must be >= 1")
        if len(self.icr) != len(self.hidden) + 1:
            raise ValueError(f"need {len(self.hidden) + 1} ICR configs, got {len(self.icr)}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        sizes = [self.primary_types] + [n for n, _ in self.hidden]
        for n_in, c in zip(sizes, self.icr):
            if not 1 <= c.k <= n_in - 1:
                raise ValueError(f"k={c.k} invalid for a layer with {n_in} input types")
        if self.boundary not in ("zero", "circular"):
            raise ValueError(f"unknown boundary {self.boundary!r}")

    @classmethod
    def full_scale(cls, num_classes: int = 10, in_channels: int = 3, **kw):
        """32 types of 16-dim capsules everywhere; k=10 (k=5 for 100 classes), 2 iterations."""
        k = 5 if num_classes >= 100 else 10
        icr = tuple(ICRConfig(k, 2) for _ in range(4))
        defaults = dict(in_channels=in_channels, block_widths=(32, 32, 64, 64, 128, 128, 128),
                        primary_types=32, primary_dim=16, hidden=((32, 16),) * 3,
                        num_classes=num_classes, class_dim=16, icr=icr)
        defaults.update(kw)
        return cls(**defaults)

    def audit_mode(self) -> "ModelConfig":
        """Stride 1, no prediction layernorm, circular boundary: exactly equivariant."""
        icr = tuple(dataclasses.replace(c, use_pred_layernorm=False) for c in self.icr)
        return dataclasses.replace(self, block_strides=(1,) * len(self.block_widths),
                                   icr=icr, boundary="circular")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Model:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        k = cfg.kernel_size
        widths = cfg.block_widths
        self.stem = GConvParams.init(rng, widths[0], cfg.in_channels, k, lifting=True)
        self.blocks = []
        self.block_norms = []
        c_in = widths[0]
        for w, s in zip(widths, cfg.block_strides):
            self.blocks.append(ResidualParams.init(rng, c_in, w, stride=s, k=k))
            if cfg.block_norm:
                self.block_norms.append(LayerNormParams.init((w,)))
            c_in = w
        self.primary = PrimaryCapsParams.init(rng, c_in, cfg.primary_types, cfg.primary_dim, k)
        self.caps = []
        n_in, d_in = cfg.primary_types, cfg.primary_dim
        for (n, d), icr in zip(list(cfg.hidden) + [(cfg.num_classes, cfg.class_dim)], cfg.icr):
            self.caps.append(CapsuleLayerParams.init(rng, n_in, d_in, n, d, icr, k))
            n_in, d_in = n, d
        bound = 1.0 / math.sqrt(d_in)
        self.proj_weight = Tensor(rng.uniform(-bound, bound, size=(cfg.num_classes, d_in)), requires_grad=True)
        self.proj_bias = T.zeros((cfg.num_classes,), requires_grad=True)

    # parameters --------------------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("stem.weight", self.stem.weight), ("stem.bias", self.stem.bias)]
        for i, b in enumerate(self.blocks):
            for name in ("conv1", "conv2", "shortcut"):
                p = getattr(b, name)
                if p is not None:
                    out.append((f"block{i}.{name}.weight", p.weight))
                    out.append((f"block{i}.{name}.bias", p.bias))
            if self.block_norms:
                out.append((f"block{i}.norm.gain", self.block_norms[i].gain))
                out.append((f"block{i}.norm.bias", self.block_norms[i].bias))
        out += [("primary.weight", self.primary.conv.weight), ("primary.bias", self.primary.conv.bias),
                ("primary.norm.gain", self.primary.norm.gain), ("primary.norm.bias", self.primary.norm.bias)]
        for i, c in enumerate(self.caps):
            out += [(f"caps{i}.weight", c.weight), (f"caps{i}.bias", c.bias)]
            if c.norm is not None:
                out += [(f"caps{i}.norm.gain", c.norm.gain), (f"caps{i}.norm.bias", c.norm.bias)]
        out += [("proj.weight", self.proj_weight), ("proj.bias", self.proj_bias)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        named = dict(self.named_parameters())
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in named.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], copy=True)

    # forward ------------------------------------------------------------------------
    def forward(self, x, return_hidden: bool = False, check: bool = False):
        """Logits ``(B, classes)`` for images ``(B, C, H, W)``.

        With ``return_hidden`` also returns a dict of every intermediate
        representation (numpy arrays), plus the routing weights and k-NN
        lists of each capsule layer.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        bnd = self.cfg.boundary
        hidden = {}
        h = T.relu(lift_correlate(x, self.stem, bnd))
        hidden["stem"] = h.data
        for i, b in enumerate(self.blocks):
            h = residual_block(h, b, bnd)
            if self.block_norms:
                # per channel over rotations and space; a norm over channels too
                # leaves per-channel offsets that swamp the input early in training
                h = layer_norm(h, self.block_norms[i], axes=(2, 3, 4))
            hidden[f"block{i}"] = h.data
        caps = primary_capsules(h, self.primary, bnd)
        hidden["primary"] = caps.data
        for i, p in enumerate(self.caps):
            caps, state = capsule_layer(caps, p, bnd, check=check)
            hidden[f"caps{i}"] = caps.data
            hidden[f"caps{i}.c"] = state.c.data
            if return_hidden:
                hidden[f"caps{i}.neighbors"] = state.neighbors
        logits = project_logits(caps, self.proj_weight, self.proj_bias)
        if return_hidden:
            return logits, hidden
        return logits

    __call__ = forward


def build(cfg: ModelConfig) -> Model:
    return Model(cfg)


# -- optimisation --------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay: ``p <- p(1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)``."""

    def __init__(self, params, lr=3e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


def one_cycle_lr(step: int, total: int, peak: float, warmup_frac: float = 0.3,
                 start_div: float = 25.0, final_frac: float = 0.01) -> float:
    """Linear warm-up from ``peak/start_div`` then cosine decay to ``final_frac*peak``."""
    total = max(total, 1)
    warm = max(int(round(warmup_frac * total)), 1)
    if step < warm:
        lo = peak / start_div
        return lo + (peak - lo) * step / warm
    frac = min((step - warm) / max(total - warm, 1), 1.0)
    lo = final_frac * peak
    return lo + 0.5 * (peak - lo) * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 1e-2
    warmup_frac: float = 0.3
    seed: int = 0
    max_translation: int = 2
    rotation: tuple = (-180.0, 180.0)
    grad_clip: float = 1.0          # global gradient norm cap; 0 disables
    check_invariants: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        self.rotation = tuple(float(a) for a in self.rotation)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm before."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def train_step(model: Model, opt: AdamW, x, y, lr: float | None = None, check: bool = False,
               grad_clip: float = 0.0) -> float:
    """One AdamW step on a batch; returns the batch loss before the update."""
    opt.zero_grad()
    with GradTape() as tape:
        logits = model.forward(x, check=check)
        loss = cross_entropy(logits, y)
    tape.backward(loss)
    value = loss.item()
    if not math.isfinite(value):
        raise T.NonFiniteError("non-finite loss")
    model.last_grad_norm = clip_grad_norm(opt.params, grad_clip)
    opt.step(lr)
    return value


@dataclass
class EvalResult:
    accuracy: float
    per_class: list
    mean_loss: float
    predictions: np.ndarray = field(repr=False, default=None)


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model.forward(images[i:i + batch_size]).data)
    if not out:
        return np.zeros((0, model.cfg.num_classes), dtype=T.get_dtype())
    return np.concatenate(out)


def score_logits(logits: np.ndarray, labels: np.ndarray, num_classes: int | None = None) -> EvalResult:
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = logits.shape[1] if num_classes is None else num_classes
    pred = logits.argmax(axis=1)
    correct = pred == labels
    per_class = []
    for c in range(num_classes):
        sel = labels == c
        per_class.append(float(correct[sel].mean()) if sel.any() else float("nan"))
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    losses = lse - logits[np.arange(len(labels)), labels]
    acc = float(correct.mean()) if len(labels) else float("nan")
    loss = float(losses.mean()) if len(labels) else float("nan")
    return EvalResult(acc, per_class, loss, pred)


def evaluate(model: Model, dataset, batch_size: int = 256) -> EvalResult:
    logits = predict_logits(model, dataset.images, batch_size)
    return score_logits(logits, dataset.labels, model.cfg.num_classes)


# -- checkpoints ----------------------------------------------------------------------------

def save_checkpoint(path, model: Model, epoch: int = 0, train_cfg: TrainConfig | None = None, extra=None):
    """Single ``.npz``: one array per parameter plus a JSON manifest."""
    state = model.state_dict()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "seed": model.cfg.seed,
        "epoch": int(epoch),
        "parameters": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in state.items()},
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in state.items()}
    arrays["manifest"] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[Model, dict]:
    with np.load(path, allow_pickle=False) as z:
        if "manifest" not in z:
            raise ValueError(f"{path}: not a checkpoint (no manifest)")
        manifest = json.loads(bytes(z["manifest"]).decode())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unknown format {manifest.get('format')!r}")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported version {manifest.get('version')}")
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    dtype = next(iter(state.values())).dtype if state else T.get_dtype()
    with T.precision(dtype):
        model = Model(ModelConfig.from_dict(manifest["model_config"]))
    model.load_state_dict(state)
    return model, manifest
