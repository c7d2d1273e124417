import numpy as np
import pytest
from scipy import ndimage

from headseg.preprocess import (PreprocessConfig, PreprocessError, PreprocessReport, _unit_coords,
                                correct_bias, extract_head_mask, grid_placement, normalize,
                                preprocess_pair, standardize_grid, standardize_labels, standardize_mask)
from headseg.volcore import IntensityVolume, LabelVolume, TissueId as T


def ball(shape, centre, radii):
    g = np.ogrid[tuple(slice(0, n) for n in shape)]
    return sum(((x - c) / r) ** 2 for x, c, r in zip(g, centre, radii)) <= 1.0


def rel_rms(a, b, mask):
    return np.sqrt(np.mean((a[mask] - b[mask]) ** 2)) / np.sqrt(np.mean(b[mask] ** 2))


# ---------------------------------------------------------------------------
# head mask

def test_empty_volume_has_no_head():
    with pytest.raises(PreprocessError, match="no head found"):
        extract_head_mask(IntensityVolume(np.zeros((8, 8, 8))))


def test_mask_of_plain_ellipsoid():
    e = ball((32, 32, 32), (15.5, 16, 15), (12, 10, 9))
    mask, thr = extract_head_mask(IntensityVolume(e.astype(np.float32)))
    np.testing.assert_array_equal(mask, e)
    assert 0 < thr < 1


def test_mask_rejects_speckles(rng):
    e = ball((40, 40, 40), (20, 20, 20), (12, 11, 10))
    far = ndimage.distance_transform_edt(~e) > 3
    cand = np.argwhere(far)
    picks = cand[rng.choice(len(cand), 60, replace=False)]
    data = e.astype(np.float32)
    data[tuple(picks.T)] = 1.0
    ids, n = ndimage.label(data > 0.5, structure=np.ones((3, 3, 3)))
    sizes = np.bincount(ids.ravel())[1:]
    oracle = ids == (np.argmax(sizes) + 1)
    mask, _ = extract_head_mask(IntensityVolume(data))
    np.testing.assert_array_equal(mask, oracle)
    np.testing.assert_array_equal(mask, e)


def test_mask_single_component_and_filled(phantom48):
    t1 = phantom48[0]
    mask, _ = extract_head_mask(t1)
    _, n = ndimage.label(mask)
    assert n == 1
    assert np.array_equal(mask, ndimage.binary_fill_holes(mask))
    # dark cortical bone and CSF cavities stay inside the head
    truth = phantom48[2].labels
    assert np.all(mask[truth != T.AIR])


# ---------------------------------------------------------------------------
# bias correction

def test_constant_volume_unchanged():
    e = ball((24, 24, 24), (12, 12, 12), (9, 9, 9))
    vol = IntensityVolume(np.where(e, 0.7, 0.0).astype(np.float32))
    out = correct_bias(vol, e, order=2)
    np.testing.assert_allclose(out.data, vol.data, rtol=1e-6)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_known_linear_field_removed(phantom48, order):
    t1, _, truth, _ = phantom48
    mask = truth.labels != T.AIR
    x = _unit_coords(t1.dims)[0][:, None, None]
    biased = t1.with_data(t1.data * np.exp(0.3 * x))
    out = correct_bias(biased, mask, order=order)
    # field scale is not identifiable; compare after matching the mask mean
    rec = out.data * (t1.data[mask].mean() / out.data[mask].mean())
    assert rel_rms(rec, t1.data, mask) < 0.01


def test_mean_preserved(phantom48):
    t2, truth = phantom48[1], phantom48[2]
    mask = truth.labels != T.AIR
    biased = t2.with_data(t2.data * np.exp(0.2 * _unit_coords(t2.dims)[2][None, None, :]))
    out = correct_bias(biased, mask)
    assert out.data[mask].mean() == pytest.approx(biased.data[mask].mean(), rel=1e-5)
    np.testing.assert_array_equal(out.data[~mask], biased.data[~mask])


def test_bias_correction_is_fixed_point(phantom48):
    t1, truth = phantom48[0], phantom48[2]
    mask = truth.labels != T.AIR
    x, y, z = np.ix_(*_unit_coords(t1.dims))
    once = correct_bias(t1.with_data(t1.data * np.exp(0.2 * x - 0.1 * y * z)), mask)
    twice = correct_bias(once, mask)
    assert rel_rms(twice.data, once.data, mask) < 0.01


@pytest.mark.parametrize("order", [0, 5, 1.5])
def test_bias_order_validated(order):
    e = ball((16, 16, 16), (8, 8, 8), (5, 5, 5))
    with pytest.raises(ValueError, match="order"):
        correct_bias(IntensityVolume(e.astype(np.float32) + 0.1), e, order=order)


def test_bias_rejects_non_positive_and_thin_masks():
    data = np.ones((8, 8, 8), dtype=np.float32)
    mask = np.ones((8, 8, 8), bool)
    data[2, 2, 2] = 0.0
    with pytest.raises(PreprocessError, match="non-positive"):
        correct_bias(IntensityVolume(data), mask)
    thin = np.zeros((8, 8, 8), bool)
    thin[1:7, 1:7, 4] = True
    with pytest.raises(PreprocessError, match="axis z"):
        correct_bias(IntensityVolume(np.ones((8, 8, 8))), thin)


def test_bias_report_records_coefficients():
    e = ball((20, 20, 20), (10, 10, 10), (8, 8, 8))
    rep = PreprocessReport()
    correct_bias(IntensityVolume(np.where(e, 1.0, 0.0)), e, order=2, report=rep)
    assert rep.bias_order == 2 and len(rep.bias_coefficients) == 9


# ---------------------------------------------------------------------------
# normalization

def test_normalize_three_points():
    data = np.zeros((3, 1, 1))
    data[:, 0, 0] = [1, 2, 3]
    mask = np.ones_like(data, bool)
    out = normalize(IntensityVolume(data), mask)
    np.testing.assert_allclose(out.data[:, 0, 0], [0.01, 0.50, 0.99], atol=1e-7)


def test_normalize_rejects_constant():
    with pytest.raises(PreprocessError, match="zero variance"):
        normalize(IntensityVolume(np.full((4, 4, 4), 2.0)), np.ones((4, 4, 4), bool))


def test_normalize_range_and_rank(rng):
    data = rng.gamma(2.0, size=(10, 11, 12))
    mask = rng.random(data.shape) < 0.7
    out = normalize(IntensityVolume(data), mask).data
    vals = out[mask]
    assert vals.min() == np.float32(0.01) and vals.max() == np.float32(0.99)
    assert np.all(out[~mask] == 0)
    order = np.argsort(data[mask], kind="stable")
    assert np.all(np.diff(vals[order].astype(np.float64)) >= 0)


def test_normalize_affine_invariance(rng):
    data = rng.normal(size=(9, 9, 9))
    mask = rng.random(data.shape) < 0.8
    base = normalize(IntensityVolume(data), mask).data
    for a, b in ((3.0, -1.0), (0.01, 5.0), (250.0, 1000.0)):
        np.testing.assert_allclose(normalize(IntensityVolume(a * data + b), mask).data, base, atol=1e-6)


def test_normalize_report():
    rep = PreprocessReport(modality="T2")
    data = np.arange(27, dtype=float).reshape(3, 3, 3)
    normalize(IntensityVolume(data, modality="T2"), np.ones(data.shape, bool), report=rep)
    assert rep.mean == pytest.approx(13.0) and rep.variance == pytest.approx(np.var(np.arange(27)))
    assert (rep.out_lo, rep.out_hi) == (0.01, 0.99)
    assert "t2.out_lo=0.01" in rep.to_text()


# ---------------------------------------------------------------------------
# grid standardization

def test_standardize_identity():
    rng = np.random.default_rng(1)
    data = rng.random((16, 16, 16)).astype(np.float32)
    place = grid_placement(np.ones((16, 16, 16), bool), (1.0, 1.0, 1.0), edge=16)
    assert place.origin == (0.0, 0.0, 0.0)
    np.testing.assert_array_equal(standardize_grid(IntensityVolume(data), place).data, data)
    lab = LabelVolume(rng.integers(0, 16, (16, 16, 16)))
    np.testing.assert_array_equal(standardize_labels(lab, place).labels, lab.labels)


def test_standardize_constant_from_finer_grid():
    data = np.full((40, 40, 40), 0.6, dtype=np.float32)
    mask = ball((40, 40, 40), (19.5, 19.5, 19.5), (12, 12, 12))
    place = grid_placement(mask, (0.5, 0.5, 0.5), edge=16)
    out = standardize_grid(IntensityVolume(data, (0.5, 0.5, 0.5)), place).data
    inside = [(c >= 0) & (c <= 39) for c in place.source_coords()]
    sub = out[np.ix_(*inside)]
    assert sub.size > 0 and np.all(sub == np.float32(0.6))


def test_standardize_linear_ramp():
    shape = (30, 28, 26)
    i, j, k = np.meshgrid(*(np.arange(n, dtype=float) for n in shape), indexing="ij")
    ramp = 0.01 * i - 0.02 * j + 0.03 * k + 1.0
    mask = ball(shape, (15, 14, 13), (6, 6, 6))
    place = grid_placement(mask, (0.8, 0.8, 0.8), edge=16)
    out = standardize_grid(IntensityVolume(ramp, (0.8, 0.8, 0.8)), place).data
    ci, cj, ck = np.meshgrid(*place.source_coords(), indexing="ij")
    expect = 0.01 * ci - 0.02 * cj + 0.03 * ck + 1.0
    assert np.all((ci <= shape[0] - 1) & (cj <= shape[1] - 1) & (ck <= shape[2] - 1))
    np.testing.assert_allclose(out, expect, atol=1e-6)


def test_standardize_preserves_mask_volume():
    mask = ball((60, 60, 60), (30, 29, 31), (22, 18, 16))
    place = grid_placement(mask, (0.8, 0.8, 0.8), edge=48)
    out = standardize_mask(mask, place)
    assert out.sum() == pytest.approx(mask.sum() * 0.8 ** 3, rel=0.02)


def test_standardize_rejects_large_head():
    mask = ball((50, 50, 50), (25, 25, 25), (20, 20, 20))
    with pytest.raises(PreprocessError, match=r"head extent \(41.0, 41.0, 41.0\) mm"):
        grid_placement(mask, (1.0, 1.0, 1.0), edge=32)


# ---------------------------------------------------------------------------
# full conditioning

def test_preprocess_pair_contract(phantom48):
    t1, t2, truth, _ = phantom48
    n1, n2, mask, lab, reports = preprocess_pair(t1, t2, PreprocessConfig(edge=48), truth)
    assert n1.dims == n2.dims == lab.dims == (48, 48, 48)
    for v in (n1, n2):
        inside = v.data[mask]
        assert inside.min() == np.float32(0.01) and inside.max() == np.float32(0.99)
        assert np.all(v.data[~mask] == 0)
    np.testing.assert_array_equal(lab.labels, truth.labels)
    assert [r.modality for r in reports] == ["T1", "T2"]
    assert reports[0].mask_voxels == int(mask.sum())
    assert "t1.threshold_method=otsu" in reports[0].to_text()


def test_preprocess_pair_errors(phantom48):
    t1 = phantom48[0]
    small = IntensityVolume(np.ones((8, 8, 8)), modality="T2")
    with pytest.raises(PreprocessError, match="co-registered"):
        preprocess_pair(t1, small)
    with pytest.raises(ValueError, match="bias method"):
        preprocess_pair(t1, phantom48[1], PreprocessConfig(edge=48, bias="n4"))
