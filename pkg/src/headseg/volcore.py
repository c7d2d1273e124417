"""Core volume types, nearest-neighbour resampling and binary morphology.

Arrays are indexed ``[x, y, z]`` in RAS+ orientation (x: left to right,
y: posterior to anterior, z: inferior to superior). Voxel ``i`` along an
axis has its centre at ``i * spacing``; on disk x varies fastest.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

#: Value used in place of +infinity by :func:`distance_transform`.
FAR = 1e30


class TissueId(enum.IntEnum):
    AIR = 0
    SKIN = 1
    FAT = 2
    MUSCLE = 3
    SKULL_CANCELLOUS = 4
    SKULL_CORTICAL = 5
    BRAIN_WM = 6
    BRAIN_GM = 7
    CEREBELLUM_WM = 8
    CEREBELLUM_GM = 9
    CSF = 10
    DURA = 11
    VITREOUS_HUMOR = 12
    LENS = 13
    MUCOUS = 14
    BLOOD = 15

    @property
    def label(self) -> str:
        return self.name.lower()


#: The 15 tissues, in code order (air excluded).
TISSUES = tuple(t for t in TissueId if t != TissueId.AIR)
N_CODES = len(TissueId)


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing must be 3 positive finite values, got {spacing!r}")
    return sp


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class IntensityVolume:
    """Scalar 3D image (T1w or T2w) with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: str = "T1"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"intensity data must be a non-empty 3D array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            bad = np.argwhere(~np.isfinite(data))[0]
            raise ValueError(f"non-finite voxel value at index {tuple(int(i) for i in bad)}")
        if self.modality not in ("T1", "T2"):
            raise ValueError(f"modality must be 'T1' or 'T2', got {self.modality!r}")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data) -> "IntensityVolume":
        return IntensityVolume(data, self.spacing, self.modality)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """3D grid of :class:`TissueId` codes."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3 or min(lab.shape) < 1:
            raise ValueError(f"label data must be a non-empty 3D array, got shape {lab.shape}")
        if lab.dtype != np.uint8:
            if np.issubdtype(lab.dtype, np.floating) and not np.all(lab == np.round(lab)):
                raise ValueError("label volume contains non-integer codes")
            if lab.size and (lab.min() < 0 or lab.max() >= N_CODES):
                raise ValueError(f"label codes must lie in [0, {N_CODES - 1}]")
            lab = lab.astype(np.uint8)
        elif lab.size and lab.max() >= N_CODES:
            raise ValueError(f"label codes must lie in [0, {N_CODES - 1}]")
        object.__setattr__(self, "labels", _freeze(lab))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def voxel_volume(self) -> float:
        """Voxel volume in mm^3."""
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def mask(self, *tissues: int) -> np.ndarray:
        return np.isin(self.labels, np.asarray(tissues, dtype=np.uint8))


@dataclass(frozen=True)
class VoxelNeighborhood:
    connectivity: int = 26

    def __post_init__(self):
        if self.connectivity not in (6, 26):
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")

    @property
    def structure(self) -> np.ndarray:
        """3x3x3 boolean structuring element including the centre."""
        rank = 1 if self.connectivity == 6 else 3
        return ndimage.generate_binary_structure(3, rank)

    @property
    def footprint(self) -> np.ndarray:
        """Like :attr:`structure` but without the centre voxel."""
        fp = self.structure.copy()
        fp[1, 1, 1] = False
        return fp


def _as_nb(nb) -> VoxelNeighborhood:
    return nb if isinstance(nb, VoxelNeighborhood) else VoxelNeighborhood(int(nb))


def resample_nearest(src: LabelVolume, target_spacing) -> LabelVolume:
    """Resample labels to ``target_spacing`` by nearest voxel centre.

    The output grid shares its first voxel centre with the source grid and
    covers the same physical extent (``round(dims * spacing / target)``
    voxels per axis). Equidistant ties resolve to the lower source index.
    """
    try:
        tgt = _check_spacing(target_spacing)
    except ValueError as exc:
        raise ValueError(f"degenerate target spacing: {exc}") from None
    idx = []
    for n, s, t in zip(src.dims, src.spacing, tgt):
        m = max(1, int(round(n * s / t)))
        pos = np.arange(m) * (t / s)
        idx.append(np.clip(np.ceil(pos - 0.5), 0, n - 1).astype(np.intp))
    out = src.labels[np.ix_(*idx)]
    return LabelVolume(out, tgt)


def distance_transform(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Exact Euclidean distance (mm) from each voxel to the nearest true voxel.

    Returns :data:`FAR` everywhere when ``mask`` is all false. Only voxels
    inside the grid are considered.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        raise ValueError("mask must be a non-empty volume")
    sp = _check_spacing(spacing) if mask.ndim == 3 else tuple(float(s) for s in spacing)
    if not mask.any():
        return np.full(mask.shape, FAR)
    return ndimage.distance_transform_edt(~mask, sampling=sp)


def connected_components(mask: np.ndarray, nb=26) -> tuple[np.ndarray, np.ndarray]:
    """Label connected components of ``mask``.

    Returns ``(ids, sizes)`` where ``ids`` holds 0 for background and dense
    ids from 1, and ``sizes[k - 1]`` is the voxel count of component ``k``.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3D, got shape {mask.shape}")
    ids, n = ndimage.label(mask, structure=_as_nb(nb).structure)
    sizes = np.bincount(ids.ravel(), minlength=n + 1)[1:]
    return ids, sizes


def largest_component(mask: np.ndarray, nb=26) -> np.ndarray:
    ids, sizes = connected_components(mask, nb)
    if sizes.size == 0:
        return np.zeros_like(mask, dtype=bool)
    return ids == (int(np.argmax(sizes)) + 1)


def morph(mask: np.ndarray, op: str, radius_mm: float, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Euclidean-ball dilation or erosion.

    ``dilate`` keeps every voxel within ``radius_mm`` of the mask; ``erode``
    is its complement dual. The grid border is not treated as background.
    """
    if radius_mm < 0:
        raise ValueError(f"radius_mm must be >= 0, got {radius_mm}")
    mask = np.asarray(mask, dtype=bool)
    if op == "dilate":
        return distance_transform(mask, spacing) <= radius_mm
    if op == "erode":
        return distance_transform(~mask, spacing) > radius_mm
    raise ValueError(f"op must be 'erode' or 'dilate', got {op!r}")


def fill_holes(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_fill_holes(np.asarray(mask, dtype=bool))


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap of two boolean masks (1.0 when both are empty)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom
