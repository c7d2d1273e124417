"""
Phantom to rule-based head model
================================

Build one synthetic head, condition the T1/T2 pair and label it with the
rule-based segmenter. Ground truth is known, so every step can be checked.
Run with ``python demos/phantom_and_rules.py``.
"""

import numpy as np
from scipy import ndimage

from headseg.phantom import PhantomSpec, generate
from headseg.preprocess import PreprocessConfig, preprocess_pair
from headseg.ruleseg import run_ruleseg
from headseg.volcore import TISSUES, TissueId as T, dice

# A 64^3 phantom at 1 mm with mild Rician noise and a smooth bias field.
spec = PhantomSpec(seed=5, grid=64, noise_sigma=0.02, bias_amplitude=0.2)
t1, t2, truth, record = generate(spec)
print(f"subject {record.id}: age {record.age:.0f}, sex {record.sex}, dims {t1.dims}")

# Head mask, polynomial bias correction, [0.01, 0.99] scaling, 64^3 grid.
n1, n2, mask, truth_std, reports = preprocess_pair(t1, t2, PreprocessConfig(edge=64), truth)
print(f"head mask: {int(mask.sum())} voxels, Otsu threshold {reports[0].threshold:.3f}")
print(f"T1 range inside the mask: {n1.data[mask].min():.2f} .. {n1.data[mask].max():.2f}")

# Rule-based labelling: compartments, skull, brain, scalp and eyes.
labels, rep = run_ruleseg(n1, n2)
print("\ntissue            voxels   Dice")
for t in TISSUES:
    n = int(np.sum(truth_std.labels == t))
    print(f"{t.label:16s} {n:7d}  {dice(labels.labels == t, truth_std.labels == t):.3f}")
for w in rep.warnings:
    print("warning:", w)

# Cortical bone minima, checked with an exact distance transform: no
# cancellous voxel may sit within 1 mm of the brain side or 1.5 mm of
# the scalp side.
lab = labels.labels
intracranial = np.isin(lab, (T.BRAIN_WM, T.BRAIN_GM, T.CEREBELLUM_WM, T.CEREBELLUM_GM,
                             T.CSF, T.DURA, T.BLOOD))
skull = np.isin(lab, (T.SKULL_CORTICAL, T.SKULL_CANCELLOUS))
canc = lab == T.SKULL_CANCELLOUS
d_in = ndimage.distance_transform_edt(~intracranial, sampling=labels.spacing)
d_out = ndimage.distance_transform_edt(intracranial | skull, sampling=labels.spacing)
print(f"\nclosest cancellous voxel: {d_in[canc].min():.2f} mm from the brain side, "
      f"{d_out[canc].min():.2f} mm from the scalp side")
