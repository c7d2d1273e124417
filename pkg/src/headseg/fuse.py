"""Head-model assembly from per-axis network outputs.

Each slicing direction yields per-tissue probabilities; these become one
label volume per direction, which are merged by a 2-of-3 majority vote with
a neighbourhood-mode fallback, or alternatively by a weighted average of the
probabilities.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .forknet import AXES, HEAD_TRACK, predict_volume
from .volcore import N_CODES, TISSUES, LabelVolume, TissueId as T, VoxelNeighborhood

log = logging.getLogger(__name__)


class FusionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ProbabilityStack:
    """Per-tissue probabilities ``(X, Y, Z, 15)`` in TissueId order (air excluded)."""

    probs: np.ndarray
    axis: str = "axial"
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        p = np.asarray(self.probs)
        if p.ndim != 4:
            raise FusionError(f"probability stack must be 4D, got shape {p.shape}")
        if p.shape[-1] != len(TISSUES):
            missing = [t.label for t in TISSUES[p.shape[-1]:]]
            raise FusionError(f"probability stack has {p.shape[-1]} channels; missing {', '.join(missing)}")
        if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
            raise FusionError("probabilities must lie in [0, 1]")

    @classmethod
    def from_channels(cls, channels: dict, axis: str = "axial", spacing=(1.0, 1.0, 1.0)):
        """Build from ``{tissue code: grid}``; every tissue must be present."""
        missing = [t.label for t in TISSUES if int(t) not in channels]
        if missing:
            raise FusionError(f"missing probability channel(s): {', '.join(missing)}")
        return cls(np.stack([channels[int(t)] for t in TISSUES], axis=-1), axis, spacing)


def _argmax_tau(scores: np.ndarray, tau: float) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest tissue code
    best = np.argmax(scores, axis=-1)
    lab = (best + 1).astype(np.uint8)
    lab[np.max(scores, axis=-1) < tau] = T.AIR
    return lab


def assemble_axis(stack: ProbabilityStack, tau: float = 0.5) -> LabelVolume:
    """Argmax over tissues where the maximum reaches ``tau``, air elsewhere."""
    return LabelVolume(_argmax_tau(np.asarray(stack.probs), tau), stack.spacing)


def _check_aligned(vols):
    a = vols[0]
    for v in vols[1:]:
        if v.dims != a.dims or v.spacing != a.spacing:
            raise FusionError(f"directional grids differ: {a.dims}/{a.spacing} vs {v.dims}/{v.spacing}")


def majority_vote(a: LabelVolume, b: LabelVolume, c: LabelVolume):
    """2-of-3 vote. Returns ``(labels, tie_mask)``.

    Where all three disagree the tie mask is set and the label holds the
    lowest of the three codes as a placeholder.
    """
    _check_aligned([a, b, c])
    x, y, z = (np.asarray(v.labels) for v in (a, b, c))
    out = np.minimum(np.minimum(x, y), z)
    out = np.where(y == z, y, out)
    out = np.where((x == y) | (x == z), x, out)
    tie = (x != y) & (x != z) & (y != z)
    return LabelVolume(out.astype(np.uint8), a.spacing), tie


def neighborhood_counts(volumes, nb=26) -> np.ndarray:
    """Label counts over each voxel's neighbourhood (centre excluded) summed
    over ``volumes``; shape ``(N_CODES, X, Y, Z)``. Outside the grid counts
    nothing."""
    fp = VoxelNeighborhood(nb if isinstance(nb, int) else nb.connectivity).footprint.astype(np.int16)
    shape = np.asarray(volumes[0]).shape
    counts = np.zeros((N_CODES,) + shape, dtype=np.int16)
    for v in volumes:
        v = np.asarray(v)
        for code in np.unique(v):
            counts[code] += ndimage.correlate((v == code).astype(np.int16), fp, mode="constant", cval=0)
    return counts


def neighborhood_vote(directional, tie: np.ndarray, nb=26, fused: LabelVolume | None = None,
                      source: str = "directional") -> LabelVolume:
    """Resolve tied voxels by the label mode over their neighbourhood.

    With ``source="directional"`` the mode is taken over the three
    directional volumes (3 x |nb| votes); ``source="fused"`` uses the
    majority-vote output instead. Count ties go to the lowest code. Only
    tied voxels change.
    """
    _check_aligned(list(directional))
    if fused is None:
        fused, _ = majority_vote(*directional)
    out = np.array(fused.labels, copy=True)
    if not np.any(tie):
        return LabelVolume(out, fused.spacing)
    if source == "directional":
        vols = [v.labels for v in directional]
    elif source == "fused":
        vols = [fused.labels]
    else:
        raise ValueError(f"unknown vote source {source!r}")
    counts = neighborhood_counts(vols, nb)
    idx = np.nonzero(tie)
    out[idx] = np.argmax(counts[(slice(None),) + idx], axis=0).astype(np.uint8)
    return LabelVolume(out, fused.spacing)


def weighted_aggregate(stacks, weights=None, tau: float = 0.5) -> LabelVolume:
    """Per-tissue weighted mean of the axis probabilities, then argmax with ``tau``.

    ``weights`` has shape ``(n_axes, 15)``; ``None`` means uniform.
    """
    stacks = list(stacks)
    if not stacks:
        raise FusionError("no probability stacks")
    shape = np.asarray(stacks[0].probs).shape
    for s in stacks[1:]:
        if np.asarray(s.probs).shape != shape:
            raise FusionError("probability stacks have different shapes")
    w = np.ones((len(stacks), len(TISSUES))) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(stacks), len(TISSUES)):
        raise FusionError(f"weights must have shape ({len(stacks)}, {len(TISSUES)}), got {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise FusionError("weights must be finite and nonnegative")
    tot = w.sum(axis=0)
    if np.any(tot <= 0):
        bad = [TISSUES[i].label for i in np.flatnonzero(tot <= 0)]
        raise FusionError(f"all-zero weights for tissue(s): {', '.join(bad)}")
    score = np.zeros(shape, dtype=np.float64)
    for s, wa in zip(stacks, w):
        score += np.asarray(s.probs, dtype=np.float64) * wa
    score /= tot
    return LabelVolume(_argmax_tau(score, tau), stacks[0].spacing)


def read_weights(path) -> np.ndarray:
    """Weights file: one line per axis, ``axis: w1 w2 ... w15`` (axes in AXES order)."""
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            name, _, vals = line.partition(":")
            rows[name.strip()] = [float(v) for v in vals.replace(",", " ").split()]
    missing = [a for a in AXES if a not in rows]
    if missing:
        raise FusionError(f"weights file lacks axis row(s): {', '.join(missing)}")
    return np.array([rows[a] for a in AXES])


@dataclass(frozen=True)
class FusionConfig:
    method: str = "majority"  # or "weighted"
    tau: float = 0.5
    connectivity: int = 26
    vote_source: str = "directional"
    cleanup: bool = False
    cleanup_min_size: int = 500
    batch_size: int = 8


@dataclass
class QCReport:
    counts: dict = field(default_factory=dict)
    tie_voxels: int = 0
    head_voxels: int = 0
    method: str = "majority"

    @property
    def tie_fraction(self) -> float:
        return self.tie_voxels / self.head_voxels if self.head_voxels else 0.0

    def to_text(self) -> str:
        lines = [f"method={self.method}", f"head_voxels={self.head_voxels}",
                 f"tie_voxels={self.tie_voxels}", f"tie_fraction={self.tie_fraction:.6f}"]
        lines += [f"count.{k}={v}" for k, v in self.counts.items()]
        return "\n".join(lines) + "\n"


def axis_probabilities(models, t1: np.ndarray, t2: np.ndarray, axis: str, spacing=(1.0, 1.0, 1.0),
                       batch_size: int = 8) -> ProbabilityStack:
    """Run every group model of one axis and gather the 15 tissue channels."""
    channels = {}
    for m in models:
        p = predict_volume(m, t1, t2, batch_size)
        for k, code in enumerate(m.config.tracks):
            if code != HEAD_TRACK:
                channels[int(code)] = p[..., k]
    return ProbabilityStack.from_channels(channels, axis, spacing)


def check_models(models: dict) -> None:
    """``models`` maps axis -> list of NetworkModel; every axis must cover all tissues."""
    gaps = []
    for axis in AXES:
        have = {int(c) for m in models.get(axis, []) for c in m.config.tracks}
        miss = [t.label for t in TISSUES if int(t) not in have]
        if miss:
            gaps.append(f"{axis}: {', '.join(miss)}")
        for m in models.get(axis, []):
            if m.config.axis != axis:
                gaps.append(f"{axis}: model trained on {m.config.axis}")
    if gaps:
        raise FusionError("missing models for " + "; ".join(gaps))


def build_head_model(t1, t2, models: dict, config: FusionConfig = FusionConfig(), weights=None):
    """Segment a preprocessed pair with per-axis models and fuse.

    Returns ``(LabelVolume, QCReport, directional)`` where ``directional``
    maps axis -> per-axis LabelVolume. Voxels outside the head (zero in
    both inputs) are air.
    """
    check_models(models)
    a1 = np.asarray(t1.data, dtype=np.float32)
    a2 = np.asarray(t2.data, dtype=np.float32)
    head = (a1 != 0) | (a2 != 0)
    sp = t1.spacing
    stacks = {ax: axis_probabilities(models[ax], a1, a2, ax, sp, config.batch_size) for ax in AXES}
    directional = {ax: assemble_axis(stacks[ax], config.tau) for ax in AXES}
    qc = QCReport(method=config.method, head_voxels=int(head.sum()))
    if config.method == "majority":
        vols = [directional[ax] for ax in AXES]
        fused, tie = majority_vote(*vols)
        qc.tie_voxels = int(np.count_nonzero(tie & head))
        fused = neighborhood_vote(vols, tie, config.connectivity, fused, config.vote_source)
    elif config.method == "weighted":
        fused = weighted_aggregate([stacks[ax] for ax in AXES], weights, config.tau)
    else:
        raise FusionError(f"unknown fusion method {config.method!r}")
    lab = np.array(fused.labels, copy=True)
    lab[~head] = T.AIR
    if config.cleanup:
        from .ruleseg import cleanup_stray_csf

        lab = cleanup_stray_csf(lab, None, config.cleanup_min_size)
    qc.counts = {t.label: int(np.count_nonzero(lab == t)) for t in TISSUES}
    log.info("fusion method=%s tie_fraction=%.6f", config.method, qc.tie_fraction)
    return LabelVolume(lab, sp), qc, directional
