"""Epoch loop: fresh geometric noise on the training images every epoch,
AdamW with the one-cycle schedule, per-suite evaluation, JSON-lines log."""
from __future__ import annotations

import json
import logging
import time

import numpy as np

from .data import Dataset, TransformSpec, transform_dataset
from .network import AdamW, Model, TrainConfig, evaluate, one_cycle_lr, save_checkpoint, train_step

log = logging.getLogger(__name__)


def fit(model: Model, train: Dataset, cfg: TrainConfig, suites: list[Dataset] | None = None,
        log_path=None, checkpoint_path=None, suite_labels=None, checkpoint_extra=None) -> list[dict]:
    """Train ``model`` in place; returns one metrics record per epoch.

    With ``cfg.epochs == 0`` only the initial evaluation (epoch 0) is run.
    """
    suites = suites or []
    labels = suite_labels or [s.name for s in suites]
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    spec = TransformSpec(cfg.max_translation, tuple(cfg.rotation))
    steps_per_epoch = -(-len(train) // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    history = []
    fh = open(log_path, "w") if log_path else None

    def emit(record):
        history.append(record)
        if fh:
            fh.write(json.dumps(record) + "\n")
            fh.flush()
        if checkpoint_path:
            save_checkpoint(checkpoint_path, model, record["epoch"], cfg, extra=checkpoint_extra)

    try:
        if cfg.epochs == 0:
            emit(_record(model, 0, None, suites, labels))
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            ds = transform_dataset(train, spec, (cfg.seed, epoch))
            order = np.random.default_rng((cfg.seed, epoch, 1)).permutation(len(ds))
            losses = []
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                lr = one_cycle_lr(step, total, cfg.lr, cfg.warmup_frac)
                losses.append(train_step(model, opt, ds.images[idx], ds.labels[idx], lr,
                                         check=cfg.check_invariants, grad_clip=cfg.grad_clip))
                step += 1
            rec = _record(model, epoch, float(np.mean(losses)), suites, labels)
            # wall time stays out of the record so identical runs give identical logs
            log.info("epoch %d loss %.4f acc %s (%.1fs)", epoch, rec["train_loss"], rec["accuracy"],
                     time.perf_counter() - t0)
            emit(rec)
    finally:
        if fh:
            fh.close()
    return history


def _record(model, epoch, train_loss, suites, labels) -> dict:
    acc = {}
    for name, s in zip(labels, suites):
        acc[name] = evaluate(model, s).accuracy
    return {"epoch": epoch, "train_loss": train_loss, "accuracy": acc}
