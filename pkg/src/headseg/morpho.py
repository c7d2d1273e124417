"""Morphometric statistics: tissue volumes and masses, TIV, regressions and
cohort summaries, plus a comparison against ICRP reference values.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .volcore import TISSUES, LabelVolume, TissueId as T

log = logging.getLogger(__name__)

# Mass densities in g/mL (IT'IS tissue properties database, v4.1 averages).
DENSITY_SOURCE = "IT'IS Foundation tissue properties database v4.1 (average density)"
DENSITIES = {
    T.SKIN: 1.109,
    T.FAT: 0.911,
    T.MUSCLE: 1.090,
    T.SKULL_CANCELLOUS: 1.178,
    T.SKULL_CORTICAL: 1.908,
    T.BRAIN_WM: 1.041,
    T.BRAIN_GM: 1.045,
    T.CEREBELLUM_WM: 1.041,
    T.CEREBELLUM_GM: 1.045,
    T.CSF: 1.007,
    T.DURA: 1.174,
    T.VITREOUS_HUMOR: 1.005,
    T.LENS: 1.076,
    T.MUCOUS: 1.102,
    T.BLOOD: 1.050,
}

TIV_TISSUES = (T.BRAIN_GM, T.CEREBELLUM_GM, T.BRAIN_WM, T.CEREBELLUM_WM, T.CSF)


@dataclass(frozen=True)
class DensityTable:
    densities: dict
    source: str = DENSITY_SOURCE

    def __post_init__(self):
        for t, d in self.densities.items():
            if not d > 0:
                raise ValueError(f"density of {_tissue_name(t)} must be positive, got {d}")

    def __getitem__(self, tissue):
        try:
            return self.densities[tissue]
        except KeyError:
            raise KeyError(f"no density for tissue {_tissue_name(tissue)}") from None


def _tissue_name(t) -> str:
    try:
        return T(t).label
    except ValueError:
        return str(t)


DEFAULT_DENSITY = DensityTable(DENSITIES)


def tissue_volumes(model: LabelVolume) -> dict:
    """Volume per tissue in mL (air included under ``TissueId.AIR``)."""
    counts = np.bincount(np.asarray(model.labels).ravel(), minlength=len(TISSUES) + 1)
    return {T(i): float(counts[i]) * model.voxel_volume / 1000.0 for i in range(len(TISSUES) + 1)}


def tissue_masses(volumes: dict, density: DensityTable = DEFAULT_DENSITY) -> dict:
    """Mass per tissue in grams; air is skipped."""
    return {t: volumes.get(t, 0.0) * density[t] for t in TISSUES}


def gm_wm_ratio(volumes: dict, cerebrum_only: bool = False) -> float:
    if cerebrum_only:
        gm, wm = volumes[T.BRAIN_GM], volumes[T.BRAIN_WM]
    else:
        gm = volumes[T.BRAIN_GM] + volumes[T.CEREBELLUM_GM]
        wm = volumes[T.BRAIN_WM] + volumes[T.CEREBELLUM_WM]
    return gm / wm if wm > 0 else math.nan


@dataclass
class SubjectRecord:
    """Demographics plus derived morphometrics for one head model."""

    id: str
    age: float
    sex: str
    height_m: float
    weight_kg: float
    volumes_ml: dict = field(default_factory=dict)
    masses_g: dict = field(default_factory=dict)

    @property
    def bmi(self) -> float:
        if not self.height_m or self.height_m <= 0:
            return math.nan
        return self.weight_kg / self.height_m ** 2

    @property
    def tiv_l(self) -> float:
        # all intracranial CSF counts toward TIV, ventricular or not
        return sum(self.volumes_ml.get(t, 0.0) for t in TIV_TISSUES) / 1000.0

    @property
    def gm_wm_ratio(self) -> float:
        return gm_wm_ratio(self.volumes_ml)

    @property
    def gm_wm_ratio_cerebrum(self) -> float:
        return gm_wm_ratio(self.volumes_ml, cerebrum_only=True)

    def value(self, name: str) -> float:
        """Look up a scalar by name: ``age``, ``bmi``, ``tiv_l``, ``<tissue>_ml`` or ``<tissue>_g``."""
        if name in ("age", "bmi", "tiv_l", "gm_wm_ratio", "gm_wm_ratio_cerebrum", "height_m", "weight_kg"):
            return float(getattr(self, name))
        for suffix, table in (("_ml", self.volumes_ml), ("_g", self.masses_g)):
            if name.endswith(suffix):
                key = name[: -len(suffix)]
                for t in TISSUES:
                    if t.label == key:
                        return float(table.get(t, 0.0))
        raise KeyError(f"unknown field {name!r}")


def subject_record(model: LabelVolume, sid: str, age: float, sex: str, height_m: float,
                   weight_kg: float, density: DensityTable = DEFAULT_DENSITY) -> SubjectRecord:
    vols = tissue_volumes(model)
    return SubjectRecord(sid, float(age), sex, float(height_m), float(weight_kg), vols,
                         tissue_masses(vols, density))


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    r_squared: float
    n: int
    group: str = "all"


def _in_group(rec: SubjectRecord, group: str) -> bool:
    return group == "all" or rec.sex == group


def linfit(x, y, group: str = "all") -> RegressionResult:
    """Ordinary least squares of ``y`` on ``x``.

    R² is 1 - SS_res/SS_tot, and 0 by convention when ``y`` is constant.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError(f"regression needs at least 2 points, got {n}")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0:
        raise ValueError("zero variance in x")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    ss_tot = float(np.sum((y - ym) ** 2))
    if ss_tot == 0:
        warnings.warn("constant y: R^2 set to 0", RuntimeWarning, stacklevel=2)
        return RegressionResult(slope, intercept, 0.0, n, group)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return RegressionResult(slope, intercept, r2, n, group)


def regress(cohort, x_field: str, y_field: str, group: str = "all") -> RegressionResult:
    """Regress ``y_field`` on ``x_field`` over subjects in ``group`` (all/F/M)."""
    pts = [(r.value(x_field), r.value(y_field)) for r in cohort if _in_group(r, group)]
    pts = [(x, y) for x, y in pts if np.isfinite(x) and np.isfinite(y)]
    if len(pts) < 2:
        raise ValueError(f"group {group!r} has {len(pts)} usable subjects, need 2")
    x, y = np.array(pts).T
    return linfit(x, y, group)


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    min: float
    q1: float
    median: float
    q3: float
    max: float
    n: int


def describe(values) -> Summary:
    """Mean, sample std (0 for one value) and five-number summary.

    Quartiles interpolate linearly between order statistics at positions
    p*n + 1/2, so {1, 2, 3, 4} gives Q1 1.5, median 2.5, Q3 3.5.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values")
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="hazen")
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return Summary(float(v.mean()), std, float(v.min()), float(q1), float(med), float(q3),
                   float(v.max()), int(v.size))


def cohort_summary(cohort, groups=("all", "F", "M"), quantity: str = "ml") -> dict:
    """Per group, per tissue summary of volumes (``ml``) or masses (``g``).

    Returns ``{group: {tissue: Summary}}``; empty groups are dropped with a
    warning.
    """
    out = {}
    for g in groups:
        members = [r for r in cohort if _in_group(r, g)]
        if not members:
            log.warning("summary_group=%s status=empty", g)
            continue
        table = {}
        for t in TISSUES:
            table[t] = describe([r.value(f"{t.label}_{quantity}") for r in members])
        table["tiv_l"] = describe([r.tiv_l for r in members])
        out[g] = table
    return out


# Reference constants (ICRP reference man and the published SHARM cohort).
ICRP_SKULL_G = 708.0
ICRP_SKULL_TOL = 0.15
ICRP_VITREOUS_G = (15.0, 6.5)
ICRP_LENS_MG = (172.0, 258.1)
SHARM_REFERENCE = {
    "skull_l": {"M": (0.827, 0.08), "F": (0.730, 0.08)},
    "vitreous_ml": {"M": (15.098, 2.10), "F": (14.124, 1.91)},
    "lens_ml": {"M": (0.246, 0.07), "F": (0.242, 0.08)},
}


@dataclass(frozen=True)
class IcrpRow:
    group: str
    quantity: str
    mean: float
    std: float
    ref_low: float
    ref_high: float
    reference: str

    @property
    def within(self) -> bool:
        return self.ref_low <= self.mean <= self.ref_high


def icrp_report(mass_summary: dict) -> list:
    """Compare cohort mass summaries with the ICRP reference ranges.

    ``mass_summary`` is ``cohort_summary(..., quantity="g")``. Skull mass is
    cortical + cancellous bone checked against 708 g +/- 15%; vitreous
    against 15 +/- 6.5 g; lens (both eyes, per-eye mean) against
    172-258.1 mg.
    """
    rows = []
    for g, table in mass_summary.items():
        if T.SKULL_CORTICAL in table and T.SKULL_CANCELLOUS in table:
            m = table[T.SKULL_CORTICAL].mean + table[T.SKULL_CANCELLOUS].mean
            s = math.hypot(table[T.SKULL_CORTICAL].std, table[T.SKULL_CANCELLOUS].std)
            rows.append(IcrpRow(g, "skull_g", m, s, ICRP_SKULL_G * (1 - ICRP_SKULL_TOL),
                                ICRP_SKULL_G * (1 + ICRP_SKULL_TOL), "708 g"))
        if T.VITREOUS_HUMOR in table:
            mu, sd = ICRP_VITREOUS_G
            v = table[T.VITREOUS_HUMOR]
            rows.append(IcrpRow(g, "vitreous_g", v.mean, v.std, mu - sd, mu + sd, "15 +/- 6.5 g"))
        if T.LENS in table:
            v = table[T.LENS]
            rows.append(IcrpRow(g, "lens_mg", v.mean * 1000.0 / 2, v.std * 1000.0 / 2, *ICRP_LENS_MG,
                                "172-258.1 mg"))
    return rows


def sharm_reference_rows() -> list:
    """Published cohort means as ``(quantity, sex, mean, std)`` tuples, for display only."""
    return [(q, s, m, sd) for q, by_sex in SHARM_REFERENCE.items() for s, (m, sd) in by_sex.items()]


def format_icrp(rows) -> str:
    lines = ["group,quantity,mean,std,ref_low,ref_high,reference,within"]
    for r in rows:
        lines.append(f"{r.group},{r.quantity},{r.mean:.4f},{r.std:.4f},{r.ref_low:.4f},{r.ref_high:.4f},"
                     f"{r.reference},{int(r.within)}")
    for q, s, m, sd in sharm_reference_rows():
        lines.append(f"sharm_{s},{q},{m},{sd},,,published,")
    return "\n".join(lines) + "\n"
