"""Procedural head phantoms: co-registered T1/T2 volumes with 15-tissue
ground truth, and small cohorts with built-in age trends.

The anatomy is a set of nested shells built from exact distance
transforms, so every thickness constant holds in mm on the voxel grid:

    skin > fat/muscle (+ eyes, nasal cavity) > outer cortical > cancellous
    > inner cortical > dura > CSF > GM > WM (+ ventricles, cerebellum,
    vessel tubes)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .priors import cerebellum_prior
from .volcore import (IntensityVolume, LabelVolume, TissueId as T, distance_transform,
                      largest_component, morph)

log = logging.getLogger(__name__)


class PhantomSpecError(ValueError):
    pass


# Mean (T1, T2) intensity per tissue, arbitrary units. Only the ordering
# matters: CSF is the brightest T2 of the bone/blood/fluid group and blood
# the darkest intracranial fluid.
INTENSITY_TABLE: dict[int, tuple[float, float]] = {
    T.AIR: (0.0, 0.0),
    T.SKIN: (0.55, 0.50),
    T.FAT: (0.90, 0.62),
    T.MUSCLE: (0.40, 0.33),
    T.SKULL_CANCELLOUS: (0.70, 0.45),
    T.SKULL_CORTICAL: (0.08, 0.06),
    T.BRAIN_WM: (0.75, 0.32),
    T.BRAIN_GM: (0.50, 0.55),
    T.CEREBELLUM_WM: (0.75, 0.32),
    T.CEREBELLUM_GM: (0.50, 0.55),
    T.CSF: (0.15, 0.95),
    T.DURA: (0.30, 0.42),
    T.VITREOUS_HUMOR: (0.12, 0.90),
    T.LENS: (0.60, 0.28),
    T.MUCOUS: (0.45, 0.78),
    T.BLOOD: (0.25, 0.10),
}


def intensity_lut(modality: str) -> np.ndarray:
    col = 0 if modality == "T1" else 1
    return np.array([INTENSITY_TABLE[c][col] for c in range(len(INTENSITY_TABLE))])


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    grid: int = 64
    spacing: float = 1.0
    # Head ellipsoid semi-axes (x, y, z) in mm; None derives them from the grid.
    head_axes: tuple[float, float, float] | None = None
    skin: float = 2.0
    outer_cortical: float = 1.5
    cancellous: float = 1.5
    inner_cortical: float = 1.0
    dura: float = 1.0
    csf: float = 1.5
    gm: float = 2.5
    ventricle_scale: float = 1.0
    nasal_lining: float = 1.5
    noise_sigma: float = 0.0
    bias_amplitude: float = 0.0
    age: float = 40.0
    sex: str = "F"
    height: float = 1.68
    weight: float = 65.0

    def __post_init__(self):
        for name in ("skin", "outer_cortical", "cancellous", "inner_cortical", "dura", "csf", "gm",
                     "nasal_lining", "spacing"):
            if not getattr(self, name) > 0:
                raise PhantomSpecError(f"{name} must be positive")
        if not 2.0 <= self.skin <= 10.0:
            raise PhantomSpecError(f"scalp thickness {self.skin} mm outside [2, 10] mm")
        if self.inner_cortical < 1.0 or self.outer_cortical < 1.5:
            raise PhantomSpecError("cortical shells must be at least 1.0 mm (inner) and 1.5 mm (outer)")
        if self.noise_sigma < 0 or self.grid < 16:
            raise PhantomSpecError("noise_sigma must be >= 0 and grid >= 16")
        if self.sex not in ("F", "M", "unknown"):
            raise PhantomSpecError(f"bad sex {self.sex!r}")

    @property
    def skull(self) -> float:
        return self.outer_cortical + self.cancellous + self.inner_cortical

    @property
    def axes(self) -> np.ndarray:
        if self.head_axes is not None:
            return np.asarray(self.head_axes, dtype=float)
        return self.grid * self.spacing * np.array([0.40, 0.44, 0.46])


def _coords(spec: PhantomSpec):
    n = spec.grid
    c = (np.arange(n) - (n - 1) / 2.0) * spec.spacing
    return np.ix_(c, c, c)


def _ellipsoid(xyz, centre, radii):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(xyz, centre, radii)) <= 1.0


def bias_field(grid: int, amplitude: float) -> np.ndarray:
    """Smooth multiplicative field exp(amplitude * quadratic(x, y, z))."""
    u = np.linspace(-1.0, 1.0, grid)
    x, y, z = np.ix_(u, u, u)
    return np.exp(amplitude * (0.6 * x + 0.4 * y - 0.3 * z + 0.2 * x * y - 0.2 * z * z))


def _anterior_site(xyz, depth, x, z, min_depth):
    """Most anterior y on the grid column nearest (x, z) with depth >= min_depth."""
    i = int(np.abs(xyz[0].ravel() - x).argmin())
    k = int(np.abs(xyz[2].ravel() - z).argmin())
    ok = np.flatnonzero(depth[i, :, k] >= min_depth)
    if ok.size == 0:
        raise PhantomSpecError("facial structures do not fit; enlarge the head")
    return float(xyz[1].ravel()[ok.max()])


def build_labels(spec: PhantomSpec) -> np.ndarray:
    """Ground-truth label grid (uint8) for ``spec``."""
    sp = (spec.spacing,) * 3
    xyz = _coords(spec)
    a, b, c = spec.axes
    head = _ellipsoid(xyz, (0, 0, 0), (a, b, c))
    depth = distance_transform(~head, sp)  # mm below the head surface

    # Skull envelope: a shifted ellipsoid clipped to stay below the soft tissue.
    skull_out = (_ellipsoid(xyz, (0.0, -0.08 * b, 0.18 * c), (a, 0.92 * b, 0.82 * c))
                 & (depth > spec.skin + 1.5))
    extent = spec.grid * spec.spacing

    # Eyes and nasal cavity sit in the anterior soft tissue; the skull is
    # carved around them (orbits, nasal aperture).
    r_eye = 0.07 * extent
    ez = -0.38 * c
    face = np.zeros(head.shape, dtype=bool)
    eyes = []
    for sx in (-1.0, 1.0):
        ex = sx * 0.30 * a
        ey = _anterior_site(xyz, depth, ex, ez, spec.skin + 1.0 + r_eye)
        globe = _ellipsoid(xyz, (ex, ey, ez), (r_eye,) * 3)
        if not globe.any() or np.any(globe & ~head) or depth[globe].min() <= spec.skin + 0.5:
            raise PhantomSpecError("eye does not fit in the facial soft tissue; enlarge the head")
        lens = _ellipsoid(xyz, (ex, ey + 0.45 * r_eye, ez), (0.45 * r_eye, 0.25 * r_eye, 0.45 * r_eye))
        eyes.append((globe, globe & lens))
        face |= globe
    n_rad = np.array([0.05, 0.08, 0.06]) * extent
    nz = ez - r_eye - 0.3 * n_rad[2]
    ny = _anterior_site(xyz, depth, 0.0, nz, spec.skin + 1.0 + n_rad[1])
    nasal = _ellipsoid(xyz, (0.0, ny, nz), n_rad) & ~morph(face, "dilate", 1.5, sp)
    if nasal.sum() < 8 or np.any(nasal & ~head) or depth[nasal].min() <= spec.skin + 0.5:
        raise PhantomSpecError("nasal cavity does not fit in the facial soft tissue; enlarge the head")
    face |= nasal
    skull_out &= ~morph(face, "dilate", 1.5, sp)
    if not skull_out.any():
        raise PhantomSpecError("skull does not fit inside the scalp; enlarge the head or thin the layers")
    skull_depth = distance_transform(~skull_out, sp)
    inner = largest_component(skull_out & (skull_depth > spec.skull))
    if inner.sum() < 100:
        raise PhantomSpecError("layers exceed the head radius: intracranial cavity is empty")
    skull = skull_out & ~inner
    near_inner = distance_transform(inner, sp)

    lab = np.zeros(head.shape, dtype=np.uint8)
    outer = head & ~skull_out
    lab[outer] = T.FAT
    muscle = outer & ~face & (((xyz[1] < -0.15 * b) & (xyz[2] < 0.05 * c))
                              | ((np.abs(xyz[0]) > 0.78 * a) & (xyz[2] > -0.1 * c) & (xyz[2] < 0.45 * c)))
    lab[muscle] = T.MUSCLE
    for globe, lens in eyes:
        lab[globe] = T.VITREOUS_HUMOR
        lab[lens] = T.LENS
    core = nasal & (distance_transform(~nasal, sp) > spec.nasal_lining)
    lab[nasal] = T.MUCOUS
    lab[core] = T.SKULL_CORTICAL
    lab[outer & (depth <= spec.skin)] = T.SKIN

    cortical = skull & ((near_inner <= spec.inner_cortical) | (skull_depth <= spec.outer_cortical))
    lab[skull] = T.SKULL_CANCELLOUS
    lab[cortical] = T.SKULL_CORTICAL

    d_in = distance_transform(~inner, sp)  # mm inside the cavity
    brain = inner & (d_in > spec.dura + spec.csf)
    lab[inner] = T.CSF
    lab[inner & (d_in <= spec.dura)] = T.DURA
    lab[brain] = T.BRAIN_WM
    lab[brain & (d_in <= spec.dura + spec.csf + spec.gm)] = T.BRAIN_GM
    cereb = brain & cerebellum_prior(inner)
    cb_cortex = cereb & (distance_transform(~cereb, sp) <= spec.gm)
    lab[cereb] = T.CEREBELLUM_WM
    lab[cb_cortex] = T.CEREBELLUM_GM

    ia = np.argwhere(inner)
    lo = (ia.min(axis=0) - (spec.grid - 1) / 2.0) * spec.spacing
    hi = (ia.max(axis=0) - (spec.grid - 1) / 2.0) * spec.spacing
    ic, ih = (lo + hi) / 2, (hi - lo) / 2
    vs = spec.ventricle_scale
    for sx in (-1.0, 1.0):
        vent = _ellipsoid(xyz, (ic[0] + sx * 0.16 * ih[0], ic[1] + 0.1 * ih[1], ic[2] + 0.1 * ih[2]),
                          (0.09 * ih[0] * vs, 0.35 * ih[1] * vs, 0.14 * ih[2] * vs))
        lab[vent & (lab == T.BRAIN_WM)] = T.CSF

    r_v = max(1.0, 0.022 * spec.grid * spec.spacing)
    zv = ic[2] - 0.35 * ih[2]
    tube = (((xyz[0] - ic[0]) ** 2 + (xyz[2] - zv) ** 2 <= r_v ** 2)
            | ((xyz[1] - (ic[1] + 0.3 * ih[1])) ** 2 + (xyz[2] - zv) ** 2 <= r_v ** 2))
    lab[tube & inner & (d_in > spec.dura + 1.0)] = T.BLOOD
    return lab


def render(labels: np.ndarray, modality: str, noise_sigma: float = 0.0, bias_amplitude: float = 0.0,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Intensity image of a label grid: table means, Rician noise, bias field."""
    img = intensity_lut(modality)[labels]
    if noise_sigma > 0:
        rng = rng or np.random.default_rng(0)
        n1 = rng.normal(0.0, noise_sigma, img.shape)
        n2 = rng.normal(0.0, noise_sigma, img.shape)
        img = np.sqrt((img + n1) ** 2 + n2 ** 2)
    if bias_amplitude:
        img = img * bias_field(labels.shape[0], bias_amplitude)
    return img.astype(np.float32)


def generate(spec: PhantomSpec):
    """Return ``(t1, t2, truth, record)`` for one phantom subject.

    Deterministic per ``spec`` (including its seed).
    """
    from .morpho import subject_record

    lab = build_labels(spec)
    sp = (spec.spacing,) * 3
    rng = np.random.default_rng(spec.seed)
    t1 = IntensityVolume(render(lab, "T1", spec.noise_sigma, spec.bias_amplitude, rng), sp, "T1")
    t2 = IntensityVolume(render(lab, "T2", spec.noise_sigma, spec.bias_amplitude, rng), sp, "T2")
    truth = LabelVolume(lab, sp)
    record = subject_record(truth, f"phantom{spec.seed}", spec.age, spec.sex, spec.height, spec.weight)
    return t1, t2, truth, record


@dataclass(frozen=True)
class CohortTrends:
    """Synthetic ageing trends (per year above ``ref_age``)."""

    ref_age: float = 20.0
    csf_per_year: float = 0.02
    gm_per_year: float = -0.02
    ventricle_per_year: float = 0.008
    age_range: tuple[float, float] = (20.0, 80.0)


def sample_spec(rng: np.random.Generator, seed: int, grid: int = 64, noise_sigma: float = 0.02,
                bias_amplitude: float = 0.2, trends: CohortTrends = CohortTrends(),
                **overrides) -> PhantomSpec:
    """Draw demographics and age-dependent layer thicknesses for one subject."""
    age = float(rng.uniform(*trends.age_range))
    u = rng.random()
    sex = "F" if u < 0.627 else ("M" if u < 0.985 else "unknown")
    mu_h = {"F": 1.63, "M": 1.77, "unknown": 1.70}[sex]
    height = float(np.clip(rng.normal(mu_h, 0.07), 1.45, 2.05))
    bmi = float(np.clip(rng.normal(25.0, 3.5), 17.0, 40.0))
    weight = bmi * height ** 2
    size = 1.0 + 0.03 * (sex == "M") + 0.004 * (bmi - 25.0) + float(rng.normal(0.0, 0.012))
    size = float(np.clip(size, 0.94, 1.06))
    years = age - trends.ref_age
    base = PhantomSpec(grid=grid)
    spec = PhantomSpec(
        seed=seed, grid=grid, head_axes=tuple(base.axes * size),
        csf=max(0.5, 1.2 + trends.csf_per_year * years + float(rng.normal(0, 0.08))),
        gm=max(1.0, 3.0 + trends.gm_per_year * years + float(rng.normal(0, 0.08))),
        ventricle_scale=1.0 + trends.ventricle_per_year * years,
        noise_sigma=noise_sigma, bias_amplitude=bias_amplitude,
        age=age, sex=sex, height=height, weight=weight,
    )
    return replace(spec, **overrides) if overrides else spec


@dataclass
class Cohort:
    specs: list
    entries: list = field(default_factory=list)
    manifest: Path | None = None


def generate_cohort(n: int, seed: int = 0, out_dir=None, grid: int = 64, noise_sigma: float = 0.02,
                    bias_amplitude: float = 0.2, trends: CohortTrends = CohortTrends()) -> Cohort:
    """Sample ``n`` phantom subjects; write volumes and a manifest if ``out_dir`` is given.

    Subject seeds are spawned from ``seed`` so each subject is reproducible
    on its own.
    """
    from .io import SubjectEntry, write_manifest, write_nifti

    if n < 1:
        raise ValueError(f"cohort size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    child = np.random.SeedSequence(seed).spawn(n)
    specs = [sample_spec(rng, int(s.generate_state(1)[0]), grid, noise_sigma, bias_amplitude, trends)
             for s in child]
    cohort = Cohort(specs)
    if out_dir is None:
        return cohort
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, spec in enumerate(specs):
        sid = f"sub{i:03d}"
        t1, t2, truth, _ = generate(spec)
        paths = [out / f"{sid}_{k}.nii.gz" for k in ("t1", "t2", "labels")]
        write_nifti(t1, paths[0])
        write_nifti(t2, paths[1])
        write_nifti(truth, paths[2])
        cohort.entries.append(SubjectEntry(sid, paths[0], paths[1], paths[2], spec.age, spec.sex,
                                           spec.height, spec.weight))
        log.info("phantom=%s age=%.1f sex=%s", sid, spec.age, spec.sex)
    cohort.manifest = out / "manifest.csv"
    write_manifest(cohort.entries, cohort.manifest)
    return cohort
