"""
Training a slice network on phantoms
====================================

Train one two-encoder network on axial slices for white matter, gray
matter and CSF, then score it on held-out phantoms. With the defaults this
takes a few minutes on one CPU core.
Run with ``python demos/train_slice_network.py [--epochs N]``.
"""

import argparse
import time

import numpy as np

from headseg.forknet import NetworkConfig, NetworkModel, epoch_means, predict_volume, train
from headseg.phantom import generate, sample_spec
from headseg.preprocess import PreprocessConfig, preprocess_pair
from headseg.volcore import TissueId as T, dice

ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
ap.add_argument("--grid", type=int, default=48)
ap.add_argument("--epochs", type=int, default=8)
ap.add_argument("--train", type=int, default=10)
args = ap.parse_args()

# Phantoms with sampled demographics; the last two are held out.
subjects = []
for s in range(args.train + 2):
    spec = sample_spec(np.random.default_rng(1000 + s), 1000 + s, args.grid)
    t1, t2, truth, _ = generate(spec)
    n1, n2, _, lab, _ = preprocess_pair(t1, t2, PreprocessConfig(edge=args.grid), truth)
    subjects.append((n1.data, n2.data, lab.labels))
print(f"{len(subjects)} phantoms on a {args.grid}^3 grid")

# Three encoder levels, one decoder per tissue track, trained with ADAM on
# summed binary cross-entropy.
tracks = (T.BRAIN_WM, T.BRAIN_GM, T.CSF)
cfg = NetworkConfig(slice_edge=args.grid, levels=3, widths=(8, 16, 32), tracks=tracks, axis="axial")
t0 = time.perf_counter()
model, hist = train(NetworkModel.init(cfg), subjects[:args.train], epochs=args.epochs, batch_size=4,
                    seed=0, lr=0.003, callback=lambda e, m: print(f"epoch {e}: mean loss {m:.4f}"))
print(f"trained in {time.perf_counter() - t0:.0f} s; "
      f"loss {epoch_means(hist, args.epochs)[0]:.4f} -> {epoch_means(hist, args.epochs)[-1]:.4f}")

# Threshold the probability maps at 0.5 and compare with truth.
for i, (t1, t2, lab) in enumerate(subjects[args.train:]):
    prob = predict_volume(model, t1, t2)
    scores = ", ".join(f"{T(c).label} {dice(prob[..., k] >= 0.5, lab == c):.3f}" for k, c in enumerate(tracks))
    print(f"held-out {i}: {scores}")
