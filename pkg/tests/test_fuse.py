import itertools

import numpy as np
import pytest

from headseg.forknet import AXES, NetworkConfig, NetworkModel, tissue_groups
from headseg.fuse import (FusionConfig, FusionError, ProbabilityStack, assemble_axis,
                          build_head_model, check_models, majority_vote, neighborhood_counts,
                          neighborhood_vote, read_weights, weighted_aggregate)
from headseg.volcore import TISSUES, LabelVolume, TissueId as T


def brute_fuse(vols, nb=26):
    """Per-voxel 2-of-3 vote, else the neighbourhood mode over all inputs."""
    a, b, c = vols
    shape = a.shape
    out = np.zeros(shape, dtype=np.uint8)
    for idx in itertools.product(*(range(n) for n in shape)):
        x, y, z = a[idx], b[idx], c[idx]
        if x == y or x == z:
            out[idx] = x
            continue
        if y == z:
            out[idx] = y
            continue
        counts = np.zeros(16, dtype=int)
        for d in itertools.product((-1, 0, 1), repeat=3):
            if d == (0, 0, 0) or (nb == 6 and sum(map(abs, d)) != 1):
                continue
            q = tuple(i + k for i, k in zip(idx, d))
            if all(0 <= q[k] < shape[k] for k in range(3)):
                for v in vols:
                    counts[v[q]] += 1
        best = counts.max()
        out[idx] = min(k for k in range(16) if counts[k] == best)
    return out


def fuse(vols, nb=26):
    lv = [LabelVolume(v) for v in vols]
    fused, tie = majority_vote(*lv)
    return neighborhood_vote(lv, tie, nb, fused).labels


def random_triple(rng, n=8, k=4):
    base = rng.integers(0, k, size=(n, n, n))
    vols = []
    for _ in range(3):
        v = base.copy()
        flip = rng.random(v.shape) < 0.5
        v[flip] = rng.integers(0, 16, size=int(flip.sum()))
        vols.append(v.astype(np.uint8))
    return vols


@pytest.mark.parametrize("nb", [26, 6])
def test_fusion_matches_brute_force(nb):
    rng = np.random.default_rng(100 + nb)
    for _ in range(10):
        vols = random_triple(rng)
        np.testing.assert_array_equal(fuse(vols, nb), brute_fuse(vols, nb))


def test_fusion_permutation_invariant():
    rng = np.random.default_rng(3)
    for _ in range(5):
        vols = random_triple(rng)
        ref = fuse(vols)
        for perm in itertools.permutations(vols):
            np.testing.assert_array_equal(fuse(list(perm)), ref)


def test_constructed_neighbourhood_counts():
    # centre tie; neighbourhood holds 40 fat and 38 skin votes across 3 volumes
    vols = [np.full((3, 3, 3), T.SKIN, dtype=np.uint8) for _ in range(3)]
    coords = [p for p in itertools.product(range(3), repeat=3) if p != (1, 1, 1)]
    slots = [(v, p) for v in range(3) for p in coords]
    for v, p in slots[:40]:
        vols[v][p] = T.FAT
    vols[0][1, 1, 1], vols[1][1, 1, 1], vols[2][1, 1, 1] = T.MUSCLE, T.CSF, T.LENS
    counts = neighborhood_counts(vols)[:, 1, 1, 1]
    assert counts[T.FAT] == 40 and counts[T.SKIN] == 38
    assert fuse(vols)[1, 1, 1] == T.FAT


def test_majority_vote_tie_placeholder():
    a, b, c = (LabelVolume(np.full((2, 2, 2), v, np.uint8)) for v in (7, 3, 5))
    fused, tie = majority_vote(a, b, c)
    assert tie.all() and np.all(fused.labels == 3)
    fused, tie = majority_vote(a, a, c)
    assert not tie.any() and np.all(fused.labels == 7)


def test_vote_source_fused():
    vols = [np.zeros((3, 3, 3), np.uint8) for _ in range(3)]
    vols[0][1, 1, 1], vols[1][1, 1, 1], vols[2][1, 1, 1] = 1, 2, 3
    lv = [LabelVolume(v) for v in vols]
    fused, tie = majority_vote(*lv)
    out = neighborhood_vote(lv, tie, 26, fused, source="fused").labels
    assert out[1, 1, 1] == 0
    with pytest.raises(ValueError, match="vote source"):
        neighborhood_vote(lv, tie, 26, fused, source="other")


def test_misaligned_volumes_rejected():
    a = LabelVolume(np.zeros((2, 2, 2), np.uint8))
    b = LabelVolume(np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(FusionError, match="differ"):
        majority_vote(a, a, b)


def random_stack(rng, shape=(5, 4, 3)):
    return ProbabilityStack(rng.random(shape + (15,)))


def test_assemble_axis_matches_brute_force(rng):
    for tau in (0.0, 0.5, 0.9):
        stack = random_stack(rng)
        p = stack.probs
        got = assemble_axis(stack, tau).labels
        for idx in itertools.product(*(range(n) for n in p.shape[:3])):
            v = p[idx]
            best = max(range(15), key=lambda k: (v[k], -k))
            expect = best + 1 if v[best] >= tau else 0
            assert got[idx] == expect


def test_assemble_axis_tie_goes_to_lowest_code():
    p = np.zeros((1, 1, 1, 15))
    p[..., 4] = p[..., 9] = 0.8
    assert assemble_axis(ProbabilityStack(p)).labels[0, 0, 0] == 5


def test_weighted_matches_brute_force(rng):
    stacks = [random_stack(rng) for _ in range(3)]
    w = rng.random((3, 15))
    got = weighted_aggregate(stacks, w, tau=0.4).labels
    for idx in itertools.product(*(range(n) for n in stacks[0].probs.shape[:3])):
        score = [sum(w[a, k] * stacks[a].probs[idx][k] for a in range(3)) / w[:, k].sum() for k in range(15)]
        best = int(np.argmax(score))
        assert got[idx] == (best + 1 if score[best] >= 0.4 else 0)


def test_weighted_uniform_is_mean(rng):
    stacks = [random_stack(rng) for _ in range(3)]
    mean = ProbabilityStack(sum(s.probs for s in stacks) / 3)
    np.testing.assert_array_equal(weighted_aggregate(stacks).labels, assemble_axis(mean).labels)


def test_weight_errors(rng):
    stacks = [random_stack(rng) for _ in range(3)]
    w = np.ones((3, 15))
    w[:, T.LENS - 1] = 0
    with pytest.raises(FusionError, match="lens"):
        weighted_aggregate(stacks, w)
    with pytest.raises(FusionError, match="shape"):
        weighted_aggregate(stacks, np.ones((3, 14)))
    with pytest.raises(FusionError, match="nonnegative"):
        weighted_aggregate(stacks, -np.ones((3, 15)))


def test_read_weights(tmp_path):
    p = tmp_path / "w.txt"
    p.write_text("# per axis\naxial: " + " ".join(["1"] * 15) + "\nsagittal: " + ",".join(["2"] * 15)
                 + "\ncoronal: " + " ".join(["0.5"] * 15) + "\n")
    w = read_weights(p)
    assert w.shape == (3, 15) and w[1, 0] == 2 and w[2, 14] == 0.5
    p.write_text("axial: " + " ".join(["1"] * 15) + "\n")
    with pytest.raises(FusionError, match="sagittal, coronal"):
        read_weights(p)


def test_probability_stack_validation():
    with pytest.raises(FusionError, match="missing .*blood"):
        ProbabilityStack(np.zeros((2, 2, 2, 14)))
    with pytest.raises(FusionError, match=r"\[0, 1\]"):
        ProbabilityStack(np.full((2, 2, 2, 15), 1.5))
    ch = {int(t): np.zeros((2, 2, 2)) for t in TISSUES if t != T.DURA}
    with pytest.raises(FusionError, match="dura"):
        ProbabilityStack.from_channels(ch)


def tiny_models(edge=8, drop=None):
    models = {}
    for axis in AXES:
        models[axis] = [NetworkModel.init(NetworkConfig(slice_edge=edge, levels=1, widths=(2,),
                                                        tracks=g, axis=axis, seed=i))
                        for i, g in enumerate(tissue_groups(4)) if (axis, i) != drop]
    return models


def test_check_models_names_gaps():
    check_models(tiny_models())
    with pytest.raises(FusionError, match="coronal: cerebellum_gm, csf, dura, vitreous_humor"):
        check_models(tiny_models(drop=("coronal", 2)))


def test_build_head_model_contract():
    from headseg.volcore import IntensityVolume

    rng = np.random.default_rng(0)
    head = np.zeros((8, 8, 8), bool)
    head[2:6, 1:7, 2:7] = True
    t1 = IntensityVolume(np.where(head, rng.uniform(0.01, 0.99, head.shape), 0.0))
    t2 = IntensityVolume(np.where(head, rng.uniform(0.01, 0.99, head.shape), 0.0), modality="T2")
    models = tiny_models()
    for cfg in (FusionConfig(), FusionConfig(method="weighted"), FusionConfig(tau=0.0)):
        lab, qc, directional = build_head_model(t1, t2, models, cfg)
        assert lab.dims == (8, 8, 8)
        assert np.all(lab.labels[~head] == T.AIR)
        assert qc.head_voxels == head.sum() and 0 <= qc.tie_fraction <= 1
        assert sum(qc.counts.values()) == np.count_nonzero(lab.labels)
        assert set(directional) == set(AXES)
    assert "tie_fraction=" in qc.to_text()
    with pytest.raises(FusionError, match="unknown fusion method"):
        build_head_model(t1, t2, models, FusionConfig(method="staple"))
