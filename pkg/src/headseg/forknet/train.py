"""Slice extraction, restacking, training and inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .network import AXES, HEAD_TRACK, NetworkModel, adam_step, backward, forward

log = logging.getLogger(__name__)

# Volume axis that is held fixed for each slicing direction.
AXIS_INDEX = {"sagittal": 0, "coronal": 1, "axial": 2}


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


def _axis_index(axis: str) -> int:
    if axis not in AXIS_INDEX:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    return AXIS_INDEX[axis]


def to_slices(volume: np.ndarray, axis: str) -> np.ndarray:
    """View a volume as a slice stack; axial slice ``k`` is the plane ``z = k``."""
    return np.moveaxis(np.asarray(volume), _axis_index(axis), 0)


def from_slices(slices: np.ndarray, axis: str) -> np.ndarray:
    """Inverse of :func:`to_slices` (extra trailing axes are kept)."""
    return np.moveaxis(np.asarray(slices), 0, _axis_index(axis))


def track_targets(labels: np.ndarray, tracks) -> np.ndarray:
    """Binary target masks, one channel per decoder track (last axis)."""
    labels = np.asarray(labels)
    chans = [(labels != 0) if t == HEAD_TRACK else (labels == t) for t in tracks]
    return np.stack(chans, axis=-1).astype(np.uint8)


@dataclass
class TrainBatch:
    t1: np.ndarray
    t2: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.t1.shape != self.t2.shape or self.targets.shape[:3] != self.t1.shape:
            raise ValueError("batch inputs and targets disagree in shape")
        if self.targets.size and self.targets.max() > 1:
            raise ValueError("targets must be binary")

    @property
    def size(self) -> int:
        return self.t1.shape[0]


def extract_slices(t1: np.ndarray, t2: np.ndarray, labels: np.ndarray | None, axis: str,
                   tracks=()) -> TrainBatch:
    """All slices along ``axis`` in index order, with per-track targets."""
    s1 = to_slices(t1, axis)
    s2 = to_slices(t2, axis)
    if labels is None:
        tgt = np.zeros(s1.shape + (len(tracks),), dtype=np.uint8)
    else:
        tgt = to_slices(track_targets(labels, tracks), axis)
    return TrainBatch(np.ascontiguousarray(s1), np.ascontiguousarray(s2), np.ascontiguousarray(tgt))


def predict_volume(model: NetworkModel, t1: np.ndarray, t2: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Probability volumes ``(X, Y, Z, D)`` from slice-wise inference.

    All-zero slice pairs (pure background) are not evaluated and get
    probability 0 on every track.
    """
    s1 = to_slices(t1, model.config.axis)
    s2 = to_slices(t2, model.config.axis)
    out = np.zeros(s1.shape + (model.config.n_decoders,), dtype=np.float32)
    live = np.flatnonzero(np.any(s1 != 0, axis=(1, 2)) | np.any(s2 != 0, axis=(1, 2)))
    for i in range(0, live.size, batch_size):
        idx = live[i:i + batch_size]
        out[idx] = forward(model, s1[idx], s2[idx])
    return from_slices(out, model.config.axis)


def train(model: NetworkModel, subjects, epochs: int = 50, batch_size: int = 4, seed: int = 0,
          lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
          skip_empty: bool = True, callback=None):
    """Train ``model`` in place on ``subjects`` and return ``(model, history)``.

    ``subjects`` is a sequence of ``(t1, t2, labels)`` arrays on the network
    grid. Slices are drawn along ``model.config.axis`` and shuffled with a
    generator seeded by ``seed``; ``history`` holds one loss per batch.
    Pure-background slices are dropped when ``skip_empty`` is set.
    """
    if not subjects:
        raise ValueError("need at least one training subject")
    cfg = model.config
    batches = [extract_slices(t1, t2, lab, cfg.axis, cfg.tracks) for t1, t2, lab in subjects]
    s1 = np.concatenate([b.t1 for b in batches]).astype(cfg.dtype)
    s2 = np.concatenate([b.t2 for b in batches]).astype(cfg.dtype)
    tg = np.concatenate([b.targets for b in batches])
    if skip_empty:
        keep = np.any(s1 != 0, axis=(1, 2)) | np.any(s2 != 0, axis=(1, 2))
        s1, s2, tg = s1[keep], s2[keep], tg[keep]
    n = s1.shape[0]
    rng = np.random.default_rng(seed)
    history = []
    per_epoch = -(-n // batch_size)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = np.sort(order[start:start + batch_size])
            _, cache = forward(model, s1[idx], s2[idx], keep_cache=True)
            value, grads = backward(model, cache, tg[idx])
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // batch_size}", history)
            adam_step(model, grads, lr, beta1, beta2, eps)
            history.append(value)
        mean = float(np.mean(history[-per_epoch:]))
        log.info("epoch=%d axis=%s tracks=%s mean_loss=%.6f", epoch + 1, cfg.axis,
                 "/".join(map(str, cfg.tracks)), mean)
        if callback is not None:
            callback(epoch, mean)
    return model, history


def epoch_means(history, n_epochs: int) -> np.ndarray:
    """Per-epoch mean loss from a per-batch history."""
    if n_epochs == 0:
        return np.zeros(0)
    h = np.asarray(history, dtype=float)
    return h.reshape(n_epochs, -1).mean(axis=1)
