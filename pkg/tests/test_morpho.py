import math

import numpy as np
import pytest

from headseg.morpho import (DEFAULT_DENSITY, ICRP_SKULL_G, DensityTable, Summary, cohort_summary,
                            describe, format_icrp, gm_wm_ratio, icrp_report, linfit, regress,
                            sharm_reference_rows, subject_record, tissue_masses, tissue_volumes)
from headseg.volcore import TISSUES, LabelVolume, TissueId as T


def normal_equation(x, y):
    a = np.column_stack([np.ones_like(x), x])
    coef = np.linalg.solve(a.T @ a, a.T @ y)
    resid = y - a @ coef
    r2 = 1.0 - resid @ resid / np.sum((y - y.mean()) ** 2)
    return coef[1], coef[0], r2


def summary_of(mean, std=0.0):
    return Summary(mean, std, mean, mean, mean, mean, mean, 1)


# ---------------------------------------------------------------------------
# volumes and masses

def test_thousand_voxels_is_one_ml():
    lab = np.zeros((10, 10, 20), np.uint8)
    lab[:, :, :10] = T.BRAIN_GM
    vols = tissue_volumes(LabelVolume(lab))
    assert vols[T.BRAIN_GM] == 1.0
    assert vols[T.LENS] == 0.0


def test_volume_conservation_exact(rng):
    lab = rng.integers(0, 16, (17, 13, 11))
    vol = LabelVolume(lab, spacing=(0.5, 0.75, 1.25))
    vols = tissue_volumes(vol)
    assert sum(vols.values()) == pytest.approx(lab.size * vol.voxel_volume / 1000.0, rel=1e-12)
    for t in TISSUES:
        assert vols[t] == np.count_nonzero(lab == t) * vol.voxel_volume / 1000.0


def test_masses_are_volume_times_density(rng):
    vols = {t: float(rng.uniform(0, 50)) for t in TISSUES}
    masses = tissue_masses(vols)
    for t in TISSUES:
        assert masses[t] == vols[t] * DEFAULT_DENSITY[t]
    unit = DensityTable({t: 1.0 for t in TISSUES})
    assert tissue_masses({T.CSF: 1.0}, unit)[T.CSF] == 1.0


def test_missing_density_names_tissue():
    partial = DensityTable({t: 1.0 for t in TISSUES if t != T.LENS})
    with pytest.raises(KeyError, match="lens"):
        tissue_masses({T.LENS: 1.0}, partial)
    with pytest.raises(ValueError, match="brain_wm"):
        DensityTable({T.BRAIN_WM: 0.0})


def test_gm_wm_ratio():
    vols = {T.BRAIN_GM: 6.0, T.CEREBELLUM_GM: 2.0, T.BRAIN_WM: 3.0, T.CEREBELLUM_WM: 1.0}
    assert gm_wm_ratio(vols) == 2.0
    assert gm_wm_ratio(vols, cerebrum_only=True) == 2.0
    vols[T.CEREBELLUM_GM] = 6.0
    assert gm_wm_ratio(vols) == 3.0
    assert math.isnan(gm_wm_ratio({T.BRAIN_GM: 1, T.CEREBELLUM_GM: 0, T.BRAIN_WM: 0, T.CEREBELLUM_WM: 0}))


def test_subject_record_fields():
    lab = np.zeros((10, 10, 10), np.uint8)
    lab[:5] = T.BRAIN_WM
    lab[5:8] = T.CSF
    rec = subject_record(LabelVolume(lab), "s1", 40, "F", 1.6, 64.0)
    assert rec.bmi == pytest.approx(25.0)
    assert rec.tiv_l == pytest.approx(0.0008)
    assert rec.value("brain_wm_ml") == 0.5
    assert rec.value("csf_g") == pytest.approx(0.3 * DEFAULT_DENSITY[T.CSF])
    with pytest.raises(KeyError, match="unknown field"):
        rec.value("nose_ml")


# ---------------------------------------------------------------------------
# regression

def test_linfit_perfect_line():
    x = np.arange(10.0)
    r = linfit(x, 2 * x + 1)
    assert r.slope == pytest.approx(2.0) and r.intercept == pytest.approx(1.0)
    assert r.r_squared == pytest.approx(1.0) and r.n == 10


def test_linfit_constant_y_warns():
    with pytest.warns(RuntimeWarning, match="constant"):
        r = linfit([1, 2, 3], [5, 5, 5])
    assert r.slope == 0 and r.r_squared == 0


def test_linfit_matches_normal_equations(rng):
    for _ in range(20):
        x = rng.normal(size=20)
        y = 3 * x + rng.normal(size=20)
        r = linfit(x, y)
        slope, icpt, r2 = normal_equation(x, y)
        assert abs(r.slope - slope) < 1e-9
        assert abs(r.intercept - icpt) < 1e-9
        assert abs(r.r_squared - r2) < 1e-9


def test_linfit_errors():
    with pytest.raises(ValueError, match="at least 2"):
        linfit([1.0], [2.0])
    with pytest.raises(ValueError, match="zero variance"):
        linfit([1, 1, 1], [1, 2, 3])


def test_linfit_invariances(rng):
    x, y = rng.normal(size=30), rng.normal(size=30)
    base = linfit(x, y)
    perm = rng.permutation(30)
    shuffled = linfit(x[perm], y[perm])
    assert shuffled.slope == pytest.approx(base.slope, abs=1e-12)
    assert linfit(x, 7 * y - 3).r_squared == pytest.approx(base.r_squared, abs=1e-12)


def _cohort():
    recs = []
    for i, (age, sex) in enumerate([(20, "F"), (30, "M"), (40, "F"), (50, "M"), (60, "F")]):
        lab = np.zeros((10, 10, 10), np.uint8)
        lab[: 8 - i] = T.BRAIN_GM
        lab[8 - i:] = T.CSF
        recs.append(subject_record(LabelVolume(lab), f"s{i}", age, sex, 1.7, 70.0))
    return recs


def test_regress_by_group():
    cohort = _cohort()
    r = regress(cohort, "age", "brain_gm_ml")
    assert r.slope == pytest.approx(-0.01) and r.n == 5
    f = regress(cohort, "age", "csf_ml", group="F")
    assert f.n == 3 and f.slope == pytest.approx(0.01) and f.group == "F"
    with pytest.raises(ValueError, match="usable"):
        regress(cohort[:1], "age", "csf_ml")


# ---------------------------------------------------------------------------
# summaries

def test_describe_quartiles():
    s = describe([4, 1, 3, 2])
    assert (s.q1, s.median, s.q3) == (1.5, 2.5, 3.5)
    assert (s.min, s.max, s.n, s.mean) == (1, 4, 4, 2.5)
    assert s.std == pytest.approx(np.std([1, 2, 3, 4], ddof=1))


def test_describe_single_and_empty():
    assert describe([3.0]).std == 0.0
    with pytest.raises(ValueError):
        describe([])


def test_cohort_summary_groups():
    out = cohort_summary(_cohort())
    assert set(out) == {"all", "F", "M"}
    assert out["F"][T.CSF].n == 3 and out["M"][T.CSF].n == 2
    assert out["all"]["tiv_l"].mean == pytest.approx(0.001)
    only_f = [r for r in _cohort() if r.sex == "F"]
    assert set(cohort_summary(only_f)) == {"all", "F"}


# ---------------------------------------------------------------------------
# reference comparison

def _mass_table(skull=708.0, vitreous=15.0, lens_ml=0.246):
    table = {t: summary_of(0.0) for t in TISSUES}
    table[T.SKULL_CORTICAL] = summary_of(skull * 0.6)
    table[T.SKULL_CANCELLOUS] = summary_of(skull * 0.4)
    table[T.VITREOUS_HUMOR] = summary_of(vitreous)
    table[T.LENS] = summary_of(lens_ml)
    return {"all": table}


def test_icrp_within_and_out_of_range():
    rows = {r.quantity: r for r in icrp_report(_mass_table())}
    assert rows["skull_g"].mean == pytest.approx(ICRP_SKULL_G) and rows["skull_g"].within
    assert rows["vitreous_g"].within
    assert rows["lens_mg"].mean == pytest.approx(123.0) and not rows["lens_mg"].within
    rows = {r.quantity: r for r in icrp_report(_mass_table(skull=900.0, vitreous=25.0, lens_ml=0.4))}
    assert not rows["skull_g"].within and not rows["vitreous_g"].within
    assert rows["lens_mg"].within
    assert rows["vitreous_g"].ref_low == 8.5 and rows["vitreous_g"].ref_high == 21.5


def test_icrp_empty_summary():
    assert icrp_report({}) == []


def test_reference_rows_echoed():
    rows = sharm_reference_rows()
    assert ("lens_ml", "M", 0.246, 0.07) in rows
    text = format_icrp(icrp_report(_mass_table()))
    assert text.splitlines()[0].startswith("group,quantity")
    assert "sharm_M,lens_ml,0.246" in text
    assert "all,skull_g,708.0000" in text
