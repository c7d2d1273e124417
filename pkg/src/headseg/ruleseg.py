"""Deterministic rule-based head segmentation.

The head is split into three compartments (inner cavity, skull/nasal
middle layer, outer soft tissue), each labelled by intensity rules on the
T1/T2 pair. Thresholds are expressed in the units of the phantom intensity
table; :func:`calibrate` maps preprocessed data back into those units with
one affine fit per modality.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .phantom import INTENSITY_TABLE
from .priors import cerebellum_prior
from .volcore import (TISSUES, IntensityVolume, LabelVolume, TissueId as T, VoxelNeighborhood,
                      connected_components, distance_transform, fill_holes,
                      resample_nearest)

log = logging.getLogger(__name__)


class RulesegError(RuntimeError):
    """A rule stage failed; ``stage`` names it."""

    def __init__(self, stage: str, msg: str, diagnostics: dict | None = None):
        super().__init__(f"{stage}: {msg}")
        self.stage = stage
        self.diagnostics = diagnostics or {}


class CompartmentSplitError(RulesegError):
    def __init__(self, msg: str, diagnostics: dict | None = None):
        super().__init__("split_compartments", f"compartment split failed: {msg}", diagnostics)


@dataclass(frozen=True)
class RuleConfig:
    """Rule thresholds (intensity-table units) and geometric constants (mm)."""

    dark_t2: float = 0.19  # bone / blood / nasal core
    bone_split: float = 0.25  # T2 cancellous vs cortical
    csf_bright: float = 0.70
    blood_dark: float = 0.25
    brain_t1: float = 0.40
    wm_t1: float = 0.625
    deep_t1_lo: float = 0.0  # optional deep-structure band, mapped to GM
    deep_t1_hi: float = 0.0
    fat_t1: float = 0.65
    skin_t1_lo: float = 0.475
    skin_t1_hi: float = 0.725
    skin_t2_lo: float = 0.38
    skin_t2_hi: float = 0.56
    vitreous_t2: float = 0.76
    vitreous_t1: float = 0.30
    mucous_t2: float = 0.70
    mucous_t1_lo: float = 0.30
    mucous_t1_hi: float = 0.675
    inner_cortical: float = 1.0
    outer_cortical: float = 1.5
    scalp_min: float = 2.0
    scalp_max: float = 10.0
    dura_depth: float = 2.0
    calibrate: bool = True
    cleanup: bool = False
    cleanup_min_size: int = 500
    downscale: float = 0.0  # target spacing in mm; 0 keeps the source grid
    diagnostics_dir: str = ""

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not np.isfinite(v):
                raise ValueError(f"rule threshold {f.name} must be finite")
        if not 0 < self.scalp_min <= self.scalp_max:
            raise ValueError("scalp bounds must satisfy 0 < min <= max")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "RuleConfig":
        from .config import parse_kv

        return cls(**parse_kv(text, cls))


@dataclass(frozen=True)
class Calibration:
    """Data = gain * table + offset, per modality."""

    gain: tuple[float, float] = (1.0, 1.0)
    offset: tuple[float, float] = (0.0, 0.0)

    def to_table(self, t1: np.ndarray, t2: np.ndarray):
        return ((t1 - self.offset[0]) / self.gain[0], (t2 - self.offset[1]) / self.gain[1])


def calibrate(t1: np.ndarray, t2: np.ndarray, mask: np.ndarray, iterations: int = 8) -> Calibration:
    """Fit one affine map per modality from table means to the data.

    Starts from the map sending the darkest/brightest table means onto the
    mask extrema, then alternates nearest-mean assignment (in table units,
    both modalities jointly) with a least-squares refit.
    """
    x1 = np.asarray(t1, dtype=np.float64)[mask]
    x2 = np.asarray(t2, dtype=np.float64)[mask]
    tab = np.array([INTENSITY_TABLE[t] for t in TISSUES], dtype=np.float64)
    gain, off = [], []
    for x, col in ((x1, tab[:, 0]), (x2, tab[:, 1])):
        g = (x.max() - x.min()) / (col.max() - col.min())
        gain.append(g)
        off.append(x.min() - g * col.min())
    for _ in range(iterations):
        u1 = (x1 - off[0]) / gain[0]
        u2 = (x2 - off[1]) / gain[1]
        d = (u1[:, None] - tab[None, :, 0]) ** 2 + (u2[:, None] - tab[None, :, 1]) ** 2
        k = d.argmin(axis=1)
        new = []
        for x, col in ((x1, tab[k, 0]), (x2, tab[k, 1])):
            if np.ptp(col) == 0:
                return Calibration(tuple(gain), tuple(off))
            g, o = np.polyfit(col, x, 1)
            new.append((g, o))
        (g1, o1), (g2, o2) = new
        if g1 <= 0 or g2 <= 0:
            break
        if np.allclose([g1, o1, g2, o2], [gain[0], off[0], gain[1], off[1]], rtol=0, atol=1e-12):
            break
        gain, off = [g1, g2], [o1, o2]
    return Calibration((float(gain[0]), float(gain[1])), (float(off[0]), float(off[1])))


@dataclass
class CompartmentMap:
    """Per-voxel tag: 0 air, 1 inner, 2 middle, 3 outer."""

    tags: np.ndarray
    skull_solid: np.ndarray  # outer skull surface filled
    AIR, INNER, MIDDLE, OUTER = 0, 1, 2, 3

    @property
    def inner(self):
        return self.tags == self.INNER

    @property
    def middle(self):
        return self.tags == self.MIDDLE

    @property
    def outer(self):
        return self.tags == self.OUTER


def split_compartments(t1: np.ndarray, t2: np.ndarray, head: np.ndarray,
                       config: RuleConfig = RuleConfig(), spacing=(1.0, 1.0, 1.0)) -> CompartmentMap:
    """Locate the skull from its dark T2 shells and split the head.

    The inner cavity is the non-dark pocket enclosed by dark tissue that lies
    deepest below the head surface; the skull is the filled dark shell
    around it; any other dark or mucous-like soft tissue (nasal cavity) joins
    the middle compartment.
    """
    head = np.asarray(head, dtype=bool)
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    dark = head & (t2 < config.dark_t2)
    diag = {"head": head, "dark": dark}
    if not dark.any():
        _dump(config, diag)
        raise CompartmentSplitError("no low-T2 tissue inside the head", diag)
    pockets = fill_holes(dark) & ~dark
    if not pockets.any():
        _dump(config, diag)
        raise CompartmentSplitError("low-T2 tissue encloses no cavity", diag)
    ids, sizes = connected_components(pockets, 6)
    depth = distance_transform(~head, spacing)
    best = ndimage.maximum(depth, ids, index=np.arange(1, sizes.size + 1))
    # deepest pocket; size breaks ties so the choice is stable
    order = np.lexsort((-sizes, -np.asarray(best)))
    inner = fill_holes(ids == order[0] + 1)
    if inner.sum() < 27:
        _dump(config, diag)
        raise CompartmentSplitError(f"enclosed cavity too small ({int(inner.sum())} voxels)", diag)
    solid = fill_holes(dark | inner)
    lab, _ = ndimage.label(solid, VoxelNeighborhood(6).structure)
    solid = lab == lab[tuple(np.argwhere(inner)[0])]
    nasal = head & ~solid & (dark | _mucous_like(t1, t2, config))
    tags = np.zeros(head.shape, dtype=np.uint8)
    tags[head] = CompartmentMap.OUTER
    tags[solid | nasal] = CompartmentMap.MIDDLE
    tags[inner] = CompartmentMap.INNER
    return CompartmentMap(tags, solid)


def _mucous_like(t1, t2, c: RuleConfig):
    return (t2 > c.mucous_t2) & (t1 > c.mucous_t1_lo) & (t1 < c.mucous_t1_hi)


def _dump(config: RuleConfig, diag: dict) -> None:
    if config.diagnostics_dir:
        out = Path(config.diagnostics_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(out / "split_failure.npz", **diag)
        log.error("stage=split_compartments diagnostics=%s", out / "split_failure.npz")


def segment_skull(t2: np.ndarray, skull: np.ndarray, inner: np.ndarray, config: RuleConfig = RuleConfig(),
                  spacing=(1.0, 1.0, 1.0), skull_solid: np.ndarray | None = None) -> np.ndarray:
    """Cortical/cancellous split of ``skull`` with minimum cortical thickness.

    Cancellous is T2 > ``bone_split``; any cancellous voxel within
    ``inner_cortical`` mm of the cavity or ``outer_cortical`` mm of the outer
    skull surface is turned cortical. Returns a uint8 label array (0 outside
    ``skull``).
    """
    skull = np.asarray(skull, dtype=bool)
    if skull_solid is None:
        skull_solid = fill_holes(skull | inner)
    lab = np.zeros(skull.shape, dtype=np.uint8)
    lab[skull] = T.SKULL_CORTICAL
    canc = skull & (np.asarray(t2) > config.bone_split)
    near_inner = distance_transform(inner, spacing) <= config.inner_cortical
    near_outer = distance_transform(~skull_solid, spacing) <= config.outer_cortical
    lab[canc & ~near_inner & ~near_outer] = T.SKULL_CANCELLOUS
    return lab


def segment_nasal(t1, t2, nasal: np.ndarray, config: RuleConfig = RuleConfig()) -> np.ndarray:
    """Nasal cavity: dark core is cortical bone, bright lining is mucous."""
    lab = np.zeros(nasal.shape, dtype=np.uint8)
    lab[nasal] = T.SKULL_CORTICAL
    lab[nasal & (np.asarray(t2) > config.bone_split)] = T.MUCOUS
    return lab


def segment_outer(t1, t2, outer: np.ndarray, head: np.ndarray, config: RuleConfig = RuleConfig(),
                  spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Skin, fat, muscle and eyes in the soft-tissue compartment.

    Skin is every outer voxel within ``scalp_min`` mm of the head surface,
    extended down to ``scalp_max`` mm through skin-like voxels connected to
    that shell (the detected layer clamped into [min, max]).
    """
    t1 = np.asarray(t1)
    t2 = np.asarray(t2)
    lab = np.zeros(outer.shape, dtype=np.uint8)
    lab[outer] = T.MUSCLE
    lab[outer & (t1 > config.fat_t1)] = T.FAT

    vit = outer & (t2 > config.vitreous_t2) & (t1 < config.vitreous_t1)
    if vit.any():
        closed = ndimage.binary_closing(np.pad(vit, 2), VoxelNeighborhood(26).structure)[2:-2, 2:-2, 2:-2]
        globe = fill_holes(closed) & outer
        lab[globe] = T.LENS
        lab[vit] = T.VITREOUS_HUMOR

    depth = distance_transform(~head, spacing)
    shell = outer & (depth <= config.scalp_min)
    skin_like = ((t1 > config.skin_t1_lo) & (t1 < config.skin_t1_hi)
                 & (t2 > config.skin_t2_lo) & (t2 < config.skin_t2_hi))
    cand = shell | (outer & skin_like & (depth <= config.scalp_max))
    ids, _ = ndimage.label(cand, VoxelNeighborhood(6).structure)
    keep = np.unique(ids[shell])
    skin = np.isin(ids, keep[keep > 0])
    lab[skin] = T.SKIN
    return lab


def brain_split(t1, t2, inner: np.ndarray, config: RuleConfig = RuleConfig()) -> tuple[np.ndarray, list]:
    """Brain tissue classes inside the cavity from T1 bands and a cerebellum prior.

    Returns ``(labels, warnings)``; labels hold GM/WM (cerebrum or
    cerebellum), ventricular CSF, and 0 elsewhere.
    """
    t1 = np.asarray(t1)
    t2 = np.asarray(t2)
    lab = np.zeros(inner.shape, dtype=np.uint8)
    brain = inner & (t1 >= config.brain_t1)
    wm = brain & (t1 >= config.wm_t1)
    if config.deep_t1_hi > config.deep_t1_lo:
        wm &= ~((t1 >= config.deep_t1_lo) & (t1 < config.deep_t1_hi))
    gm = brain & ~wm
    prior = cerebellum_prior(inner) if inner.any() else np.zeros_like(inner)
    lab[gm] = T.BRAIN_GM
    lab[wm] = T.BRAIN_WM
    lab[gm & prior] = T.CEREBELLUM_GM
    lab[wm & prior] = T.CEREBELLUM_WM
    vent = fill_holes(brain) & ~brain & inner & (t2 > config.csf_bright)
    lab[vent] = T.CSF
    warn = [f"empty class {t.label}" for t in (T.BRAIN_GM, T.BRAIN_WM, T.CEREBELLUM_GM, T.CEREBELLUM_WM)
            if not np.any(lab == t)]
    return lab, warn


def segment_inner(t2, inner: np.ndarray, brain: np.ndarray, config: RuleConfig = RuleConfig(),
                  spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """CSF / blood / dura for non-brain cavity voxels; brain labels pass through."""
    t2 = np.asarray(t2)
    brain = np.asarray(brain, dtype=np.uint8)
    if np.any((brain > 0) & ~inner):
        raise RulesegError("segment_inner", "brain labels extend outside the inner compartment")
    lab = brain.copy()
    rest = inner & (brain == 0)
    near_skull = distance_transform(~inner, spacing) <= config.dura_depth
    lab[rest] = T.CSF
    lab[rest & near_skull] = T.DURA
    lab[rest & (t2 > config.csf_bright)] = T.CSF
    lab[rest & (t2 < config.blood_dark)] = T.BLOOD
    return lab


def cleanup_stray_csf(labels: np.ndarray, inner: np.ndarray | None = None, min_size: int = 500) -> np.ndarray:
    """Relabel small CSF components outside the cavity (e.g. in the mouth).

    Each removed component takes the most common non-CSF, non-air label on
    its 26-neighbour rim. ``inner`` defaults to the filled skull minus the
    skull itself.
    """
    labels = np.asarray(labels)
    if inner is None:
        skull = np.isin(labels, (T.SKULL_CORTICAL, T.SKULL_CANCELLOUS))
        inner = fill_holes(skull) & ~skull
    csf = (labels == T.CSF) & ~inner
    ids, sizes = connected_components(csf, 26)
    out = labels.copy()
    st = VoxelNeighborhood(26).structure
    for i in np.flatnonzero(sizes < min_size) + 1:
        comp = ids == i
        rim = ndimage.binary_dilation(comp, st) & ~comp
        vals = labels[rim]
        vals = vals[(vals != T.CSF) & (vals != T.AIR)]
        out[comp] = np.bincount(vals, minlength=16).argmax() if vals.size else T.MUCOUS
    return out


@dataclass
class RulesegReport:
    calibration: Calibration = field(default_factory=Calibration)
    compartment_voxels: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def to_text(self) -> str:
        c = self.calibration
        lines = [f"calibration.t1=gain:{c.gain[0]:.8g},offset:{c.offset[0]:.8g}",
                 f"calibration.t2=gain:{c.gain[1]:.8g},offset:{c.offset[1]:.8g}"]
        lines += [f"compartment.{k}={v}" for k, v in self.compartment_voxels.items()]
        lines += [f"count.{k}={v}" for k, v in self.counts.items()]
        lines += [f"warning={w}" for w in self.warnings]
        return "\n".join(lines) + "\n"


def run_ruleseg(t1: IntensityVolume, t2: IntensityVolume, config: RuleConfig = RuleConfig(),
                head: np.ndarray | None = None):
    """Full rule pipeline on a preprocessed pair; returns ``(LabelVolume, RulesegReport)``.

    ``head`` defaults to the nonzero voxels of either input (air is exactly
    0 after normalization).
    """
    if t1.dims != t2.dims or t1.spacing != t2.spacing:
        raise RulesegError("input", "T1 and T2 grids differ")
    sp = t1.spacing
    a1 = np.asarray(t1.data, dtype=np.float64)
    a2 = np.asarray(t2.data, dtype=np.float64)
    if head is None:
        head = (a1 > 0) | (a2 > 0)
    head = np.asarray(head, dtype=bool)
    if not head.any():
        raise RulesegError("input", "empty head mask")
    rep = RulesegReport()
    if config.calibrate:
        rep.calibration = calibrate(a1, a2, head)
    u1, u2 = rep.calibration.to_table(a1, a2)

    comp = split_compartments(u1, u2, head, config, sp)
    inner, middle, outer = comp.inner, comp.middle, comp.outer
    rep.compartment_voxels = {"inner": int(inner.sum()), "middle": int(middle.sum()),
                              "outer": int(outer.sum())}
    lab = np.zeros(head.shape, dtype=np.uint8)
    skull = comp.skull_solid & ~inner
    try:
        s = segment_skull(u2, skull, inner, config, sp, comp.skull_solid)
        lab[skull] = s[skull]
        nasal = middle & ~skull
        lab[nasal] = segment_nasal(u1, u2, nasal, config)[nasal]
    except RulesegError:
        raise
    except Exception as e:  # pragma: no cover - names the stage for the CLI
        raise RulesegError("segment_skull", str(e)) from e
    o = segment_outer(u1, u2, outer, head, config, sp)
    lab[outer] = o[outer]
    brain, warn = brain_split(u1, u2, inner, config)
    rep.warnings += warn
    lab[inner] = segment_inner(u2, inner, brain, config, sp)[inner]
    if config.cleanup:
        lab = cleanup_stray_csf(lab, inner, config.cleanup_min_size)
    out = LabelVolume(lab, sp)
    if config.downscale > 0:
        out = resample_nearest(out, (config.downscale,) * 3)
    rep.counts = {t.label: int(np.count_nonzero(out.labels == t)) for t in TISSUES}
    for w in rep.warnings:
        log.warning("stage=ruleseg %s", w.replace(" ", "_"))
    return out, rep
