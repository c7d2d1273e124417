"""Input conditioning: head contouring, bias correction, normalization and
resampling onto the network grid.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .volcore import IntensityVolume, LabelVolume, fill_holes, largest_component

log = logging.getLogger(__name__)

LO, HI = 0.01, 0.99


class PreprocessError(ValueError):
    pass


@dataclass
class PreprocessReport:
    """Parameters recorded while conditioning one subject."""

    modality: str = ""
    threshold_method: str = "otsu"
    threshold: float = float("nan")
    mask_voxels: int = 0
    bias_method: str = "poly"
    bias_order: int = 0
    bias_coefficients: list = field(default_factory=list)
    mean: float = float("nan")
    variance: float = float("nan")
    out_lo: float = LO
    out_hi: float = HI

    def to_text(self) -> str:
        lines = []
        for k, v in self.__dict__.items():
            if isinstance(v, list):
                v = " ".join(f"{c:.8g}" for c in v)
            lines.append(f"{self.modality.lower()}.{k}={v}" if self.modality else f"{k}={v}")
        return "\n".join(lines) + "\n"


def extract_head_mask(vol: IntensityVolume, closing_iterations: int = 1):
    """Binary head mask: Otsu foreground, largest 26-connected component,
    3x3x3 closing and hole filling.

    Returns ``(mask, threshold)``.
    """
    data = np.asarray(vol.data, dtype=np.float64)
    if not np.any(data > 0) or data.max() == data.min():
        raise PreprocessError("no head found: volume has no foreground")
    thr = float(threshold_otsu(data))
    fg = data > thr
    if not fg.any():
        raise PreprocessError("no head found: threshold selects nothing")
    mask = largest_component(fg, 26)
    if closing_iterations > 0:
        pad = closing_iterations + 1
        closed = ndimage.binary_closing(np.pad(mask, pad), np.ones((3, 3, 3), bool),
                                        iterations=closing_iterations)
        mask = closed[pad:-pad, pad:-pad, pad:-pad]
    return fill_holes(mask), thr


def head_mask_pair(t1: IntensityVolume, t2: IntensityVolume) -> np.ndarray:
    """Union of the per-modality masks, reduced to one filled component."""
    m1, _ = extract_head_mask(t1)
    m2, _ = extract_head_mask(t2)
    return fill_holes(largest_component(m1 | m2, 6))


def _monomials(order: int):
    return [e for d in range(1, order + 1) for e in itertools.product(range(d + 1), repeat=3)
            if sum(e) == d]


def _unit_coords(shape):
    return [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]


def bias_field_from_coefficients(shape, order: int, coef, const: float = 0.0) -> np.ndarray:
    u = _unit_coords(shape)
    x, y, z = np.ix_(*u)
    logf = np.full(shape, const)
    for c, (i, j, k) in zip(coef, _monomials(order)):
        logf = logf + c * (x ** i) * (y ** j) * (z ** k)
    return np.exp(logf)


def correct_bias(vol: IntensityVolume, mask: np.ndarray, order: int = 2, delta: float = 0.04,
                 max_pairs: int = 400_000, report: PreprocessReport | None = None) -> IntensityVolume:
    """Remove a smooth multiplicative field exp(P(x, y, z)), P a polynomial of
    total degree ``order`` in normalized coordinates.

    P is fitted by least squares to log-intensity differences between
    6-neighbours that both lie in ``mask`` and differ by less than ``delta``
    in log-intensity (i.e. pairs inside one tissue), so anatomy does not leak
    into the field. The constant term is set so the mean over ``mask`` is
    unchanged.
    """
    if not (isinstance(order, (int, np.integer)) and 1 <= order <= 4):
        raise ValueError(f"bias order must be an integer in [1, 4], got {order!r}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise PreprocessError("bias correction needs a non-empty mask")
    data = np.asarray(vol.data, dtype=np.float64)
    if np.any(data[mask] <= 0):
        raise PreprocessError("non-positive intensity inside mask: log undefined")
    for ax, name in enumerate("xyz"):
        if np.unique(np.nonzero(mask)[ax]).size <= order:
            raise PreprocessError(f"bias fit is rank deficient along axis {name}: mask too thin")

    logi = np.zeros_like(data)
    logi[mask] = np.log(data[mask])
    u = _unit_coords(data.shape)
    terms = _monomials(order)
    rows, rhs = [], []
    for ax in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[ax], b[ax] = slice(1, None), slice(None, -1)
        a, b = tuple(a), tuple(b)
        d = logi[a] - logi[b]
        ok = mask[a] & mask[b] & (np.abs(d) < delta)
        idx = np.nonzero(ok)
        if idx[0].size == 0:
            continue
        ca = [u[k][idx[k] + (1 if k == ax else 0)] for k in range(3)]
        cb = [u[k][idx[k]] for k in range(3)]
        cols = [ca[0] ** i * ca[1] ** j * ca[2] ** k - cb[0] ** i * cb[1] ** j * cb[2] ** k
                for i, j, k in terms]
        rows.append(np.stack(cols, axis=1))
        rhs.append(d[idx])
    if not rows:
        raise PreprocessError("no homogeneous neighbour pairs inside the mask")
    A = np.concatenate(rows)
    y = np.concatenate(rhs)
    if A.shape[0] > max_pairs:
        step = int(np.ceil(A.shape[0] / max_pairs))
        A, y = A[::step], y[::step]
    if np.linalg.matrix_rank(A) < len(terms):
        raise PreprocessError("bias fit is rank deficient: not enough homogeneous pairs")
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    field = bias_field_from_coefficients(data.shape, order, coef)
    out = np.zeros_like(data)
    out[mask] = data[mask] / field[mask]
    out[mask] *= data[mask].mean() / out[mask].mean()
    out[~mask] = data[~mask]
    if report is not None:
        report.bias_order = int(order)
        report.bias_coefficients = [float(c) for c in coef]
    return vol.with_data(out.astype(np.float32))


def normalize(vol: IntensityVolume, mask: np.ndarray, lo: float = LO, hi: float = HI,
              report: PreprocessReport | None = None) -> IntensityVolume:
    """z-score with mask statistics, then map the mask min/max to ``lo``/``hi``.

    Voxels outside ``mask`` become 0.
    """
    mask = np.asarray(mask, dtype=bool)
    vals = np.asarray(vol.data, dtype=np.float64)[mask]
    if vals.size == 0:
        raise PreprocessError("normalization needs a non-empty mask")
    mu, var = float(vals.mean()), float(vals.var())
    if not var > 0 or vals.max() == vals.min():
        raise PreprocessError("zero variance inside mask: cannot normalize")
    z = (vals - mu) / np.sqrt(var)
    zmin, zmax = z.min(), z.max()
    scaled = lo + (z - zmin) * ((hi - lo) / (zmax - zmin))
    scaled = np.clip(scaled, lo, hi)
    scaled[z == zmin] = lo
    scaled[z == zmax] = hi
    out = np.zeros(vol.dims, dtype=np.float64)
    out[mask] = scaled
    if report is not None:
        report.mean, report.variance = mu, var
        report.out_lo, report.out_hi = lo, hi
    return vol.with_data(out.astype(np.float32))


@dataclass(frozen=True)
class GridPlacement:
    """Maps target voxel ``j`` to source index ``origin + j * step`` per axis."""

    origin: tuple[float, float, float]
    step: tuple[float, float, float]
    edge: int
    spacing: float

    def source_coords(self):
        j = np.arange(self.edge, dtype=np.float64)
        return [o + j * s for o, s in zip(self.origin, self.step)]


def grid_placement(mask: np.ndarray, src_spacing, edge: int = 64, spacing: float = 1.0) -> GridPlacement:
    """Centre a ``edge``-cube of ``spacing`` mm on the mask centroid.

    The origin is snapped to a whole source voxel so that same-spacing inputs
    are shifted rather than interpolated.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise PreprocessError("cannot place an empty head mask")
    src_spacing = np.asarray(src_spacing, dtype=float)
    step = spacing / src_spacing
    pts = np.argwhere(mask)
    extent = (pts.max(axis=0) - pts.min(axis=0) + 1) * src_spacing
    if np.any(extent > edge * spacing):
        raise PreprocessError(f"head extent ({', '.join(f'{e:.1f}' for e in extent)}) mm exceeds the target grid "
                              f"of {edge * spacing:g} mm")
    centroid = pts.mean(axis=0)
    origin = np.round(centroid - step * (edge - 1) / 2.0)
    # keep the whole head inside the window after rounding
    lo_ok = pts.min(axis=0)
    hi_ok = pts.max(axis=0) - step * (edge - 1)
    origin = np.clip(origin, np.minimum(hi_ok, lo_ok), np.maximum(hi_ok, lo_ok))
    return GridPlacement(tuple(float(o) for o in origin), tuple(float(s) for s in step), edge, spacing)


def standardize_grid(vol: IntensityVolume, placement: GridPlacement) -> IntensityVolume:
    """Trilinear resampling onto ``placement``; outside the source is air (0)."""
    c = placement.source_coords()
    coords = np.stack(np.meshgrid(*c, indexing="ij"))
    out = ndimage.map_coordinates(np.asarray(vol.data, dtype=np.float64), coords, order=1,
                                  mode="constant", cval=0.0)
    return IntensityVolume(out.astype(np.float32), (placement.spacing,) * 3, vol.modality)


def standardize_labels(labels: LabelVolume, placement: GridPlacement) -> LabelVolume:
    """Nearest-neighbour counterpart of :func:`standardize_grid`."""
    idx = [np.floor(c + 0.5).astype(np.int64) for c in placement.source_coords()]
    src = np.asarray(labels.labels)
    out = np.zeros((placement.edge,) * 3, dtype=np.uint8)
    ok = [(i >= 0) & (i < n) for i, n in zip(idx, src.shape)]
    sub = src[np.ix_(idx[0][ok[0]], idx[1][ok[1]], idx[2][ok[2]])]
    out[np.ix_(ok[0], ok[1], ok[2])] = sub
    return LabelVolume(out, (placement.spacing,) * 3)


def standardize_mask(mask: np.ndarray, placement: GridPlacement) -> np.ndarray:
    lab = standardize_labels(LabelVolume(np.asarray(mask, dtype=np.uint8)), placement)
    return lab.labels.astype(bool)


@dataclass(frozen=True)
class PreprocessConfig:
    edge: int = 64
    spacing: float = 1.0
    bias: str = "poly"  # or "none"
    bias_order: int = 2
    lo: float = LO
    hi: float = HI


def preprocess_pair(t1: IntensityVolume, t2: IntensityVolume, config: PreprocessConfig = PreprocessConfig(),
                    labels: LabelVolume | None = None):
    """Condition a co-registered T1/T2 pair.

    Order: head mask, bias correction, normalization, grid standardization.
    Returns ``(t1, t2, mask, labels_or_None, reports)``.
    """
    if t1.dims != t2.dims:
        raise PreprocessError(f"T1 {t1.dims} and T2 {t2.dims} are not co-registered")
    mask = head_mask_pair(t1, t2)
    reports = []
    outs = []
    for vol in (t1, t2):
        rep = PreprocessReport(modality=vol.modality, mask_voxels=int(mask.sum()), bias_method=config.bias)
        _, rep.threshold = extract_head_mask(vol)
        v = vol
        if config.bias == "poly":
            v = correct_bias(v, mask, config.bias_order, report=rep)
        elif config.bias != "none":
            raise ValueError(f"unknown bias method {config.bias!r}")
        v = normalize(v, mask, config.lo, config.hi, report=rep)
        outs.append(v)
        reports.append(rep)
    place = grid_placement(mask, t1.spacing, config.edge, config.spacing)
    n1, n2 = (standardize_grid(v, place) for v in outs)
    m = standardize_mask(mask, place)
    lab = standardize_labels(labels, place) if labels is not None else None
    log.info("preprocess mask_voxels=%d edge=%d", int(mask.sum()), config.edge)
    return n1, n2, m, lab, reports
