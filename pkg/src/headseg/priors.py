"""Spatial priors shared by the phantom generator and the rule segmenter."""
import numpy as np


def bbox_frame(mask: np.ndarray):
    """Centre and half-extent (index units) of a mask's bounding box."""
    idx = np.argwhere(mask)
    if idx.size == 0:
        raise ValueError("empty mask has no bounding box")
    lo = idx.min(axis=0).astype(float)
    hi = idx.max(axis=0).astype(float)
    return (lo + hi) / 2.0, np.maximum((hi - lo) / 2.0, 0.5)


def cerebellum_prior(inner: np.ndarray) -> np.ndarray:
    """Posterior-inferior ellipsoid of the intracranial cavity.

    Defined in the cavity's bounding-box frame: centre shifted by 55% of
    the half-extent backwards and downwards, radii (0.65, 0.5, 0.45) of the
    half-extents.
    """
    centre, half = bbox_frame(inner)
    centre = centre + half * np.array([0.0, -0.55, -0.55])
    radii = half * np.array([0.65, 0.5, 0.45])
    grids = np.ogrid[tuple(slice(0, n) for n in inner.shape)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, centre, radii))
    return r2 <= 1.0
