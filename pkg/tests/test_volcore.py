import itertools
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from headseg.volcore import (FAR, TISSUES, IntensityVolume, LabelVolume, TissueId, VoxelNeighborhood,
                             connected_components, dice, distance_transform, fill_holes, morph,
                             resample_nearest)


def test_tissue_codes():
    assert len(TissueId) == 16
    assert TissueId.AIR == 0
    assert [t.label for t in TISSUES] == [
        "skin", "fat", "muscle", "skull_cancellous", "skull_cortical", "brain_wm", "brain_gm",
        "cerebellum_wm", "cerebellum_gm", "csf", "dura", "vitreous_humor", "lens", "mucous", "blood"]


def test_volume_validation():
    with pytest.raises(ValueError, match="non-finite"):
        IntensityVolume(np.array([[[0.0, np.nan]]]))
    with pytest.raises(ValueError, match="spacing"):
        IntensityVolume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ValueError, match="modality"):
        IntensityVolume(np.zeros((2, 2, 2)), modality="PD")
    with pytest.raises(ValueError, match="codes"):
        LabelVolume(np.full((2, 2, 2), 16, dtype=np.uint8))
    v = IntensityVolume(np.zeros((2, 3, 4)))
    assert v.dims == (2, 3, 4)
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0  # read-only


def _nearest_oracle(src, s, t):
    out_dims = [max(1, int(round(n * si / ti))) for n, si, ti in zip(src.shape, s, t)]
    out = np.empty(out_dims, dtype=src.dtype)
    for j in itertools.product(*[range(n) for n in out_dims]):
        idx = []
        for ax in range(3):
            p = j[ax] * t[ax]
            d = [abs(i * s[ax] - p) for i in range(src.shape[ax])]
            idx.append(int(np.argmin(d)))  # first minimum: lower index on ties
        out[j] = src[tuple(idx)]
    return out


def test_resample_identity():
    lab = LabelVolume(np.arange(8, dtype=np.uint8).reshape(2, 2, 2), (0.5,) * 3)
    out = resample_nearest(lab, (0.5,) * 3)
    assert np.array_equal(out.labels, lab.labels)
    assert out.spacing == (0.5, 0.5, 0.5)


def test_resample_uniform_preserves_volume():
    lab = LabelVolume(np.full((64,) * 3, TissueId.SKIN, dtype=np.uint8), (0.5,) * 3)
    out = resample_nearest(lab, (1.0,) * 3)
    assert out.dims == (32, 32, 32)
    assert np.all(out.labels == TissueId.SKIN)
    assert out.labels.size * out.voxel_volume == lab.labels.size * lab.voxel_volume


def test_resample_matches_bruteforce(rng):
    src = rng.integers(0, 16, (16, 16, 16)).astype(np.uint8)
    out = resample_nearest(LabelVolume(src, (0.5,) * 3), (1.0,) * 3)
    assert np.array_equal(out.labels, _nearest_oracle(src, (0.5,) * 3, (1.0,) * 3))


def test_resample_anisotropic_bruteforce(rng):
    src = rng.integers(0, 16, (7, 9, 5)).astype(np.uint8)
    s, t = (0.7, 1.0, 0.5), (1.1, 0.6, 0.5)
    out = resample_nearest(LabelVolume(src, s), t)
    assert np.array_equal(out.labels, _nearest_oracle(src, s, t))
    assert set(np.unique(out.labels)) <= set(np.unique(src))


@pytest.mark.parametrize("bad", [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0)])
def test_resample_degenerate_spacing(bad):
    with pytest.raises(ValueError, match="degenerate"):
        resample_nearest(LabelVolume(np.zeros((2, 2, 2), np.uint8)), bad)


def test_distance_axis_examples():
    m = np.zeros((9, 9, 9), bool)
    m[4, 4, 4] = True
    assert distance_transform(m)[7, 4, 4] == 3.0
    assert distance_transform(m, (0.5,) * 3)[7, 4, 4] == 1.5
    assert np.all(distance_transform(np.zeros((3, 3, 3), bool)) == FAR)


def test_distance_matches_all_pairs(rng):
    m = rng.random((12, 12, 12)) < 0.05
    sp = np.array([1.0, 0.7, 1.3])
    d = distance_transform(m, sp)
    pts = np.argwhere(m) * sp
    grid = np.argwhere(np.ones_like(m)) * sp
    brute = np.sqrt(((grid[:, None, :] - pts[None, :, :]) ** 2).sum(-1)).min(axis=1).reshape(m.shape)
    assert np.max(np.abs(d - brute)) < 1e-6
    assert np.array_equal(d == 0, m)


def _flood_fill(mask, conn):
    offs = [o for o in itertools.product((-1, 0, 1), repeat=3) if any(o)]
    if conn == 6:
        offs = [o for o in offs if sum(map(abs, o)) == 1]
    ids = np.zeros(mask.shape, int)
    n = 0
    for start in map(tuple, np.argwhere(mask)):
        if ids[start]:
            continue
        n += 1
        ids[start] = n
        q = deque([start])
        while q:
            v = q.popleft()
            for o in offs:
                w = tuple(a + b for a, b in zip(v, o))
                if all(0 <= w[k] < mask.shape[k] for k in range(3)) and mask[w] and not ids[w]:
                    ids[w] = n
                    q.append(w)
    return ids, n


@pytest.mark.parametrize("conn", [6, 26])
def test_components_match_flood_fill(rng, conn):
    m = rng.random((10, 10, 10)) < 0.3
    ids, sizes = connected_components(m, conn)
    ref, n = _flood_fill(m, conn)
    assert sizes.size == n
    assert sizes.sum() == m.sum()
    # same partition: a bijection between ids
    pairs = set(zip(ids[m].tolist(), ref[m].tolist()))
    assert len(pairs) == n
    assert np.array_equal(np.bincount(ids.ravel())[1:], sizes)


def test_components_examples():
    m = np.zeros((6, 6, 6), bool)
    m[:2, :2, :2] = True
    m[4:, 4:, 4:] = True
    ids, sizes = connected_components(m)
    assert sorted(sizes.tolist()) == [8, 8]
    d = np.zeros((3, 3, 3), bool)
    d[0, 0, 0] = d[1, 1, 1] = True
    assert connected_components(d, 6)[1].size == 2
    assert connected_components(d, 26)[1].size == 1
    with pytest.raises(ValueError):
        VoxelNeighborhood(18)


def test_morph_examples(rng):
    m = rng.random((8, 8, 8)) < 0.2
    assert np.array_equal(morph(m, "dilate", 0.0), m)
    assert np.array_equal(morph(m, "erode", 0.0), m)
    one = np.zeros((5, 5, 5), bool)
    one[2, 2, 2] = True
    plus = morph(one, "dilate", 1.0)
    assert plus.sum() == 7
    assert plus[1, 2, 2] and plus[2, 3, 2] and not plus[1, 1, 2]
    with pytest.raises(ValueError):
        morph(m, "dilate", -1.0)
    with pytest.raises(ValueError):
        morph(m, "open", 1.0)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(1.5, 6), b=st.floats(1.5, 6), c=st.floats(1.5, 6), r=st.floats(0.5, 3),
       cx=st.floats(-1, 1))
def test_closing_contains_convex_shape(a, b, c, r, cx):
    g = np.arange(20) - 9.5
    x, y, z = np.meshgrid(g - cx, g, g, indexing="ij")
    m = (x / a) ** 2 + (y / b) ** 2 + (z / c) ** 2 <= 1
    closed = morph(morph(m, "dilate", r), "erode", r)
    assert np.all(closed[m])


def test_fill_holes_and_dice():
    shell = np.zeros((7, 7, 7), bool)
    shell[1:6, 1:6, 1:6] = True
    shell[2:5, 2:5, 2:5] = False
    filled = fill_holes(shell)
    assert filled.sum() == 125
    assert dice(shell, shell) == 1.0
    assert dice(np.zeros(3, bool), np.zeros(3, bool)) == 1.0
    assert dice(shell, filled) == pytest.approx(2 * 98 / (98 + 125))
