"""Shared helpers: finite-difference gradients and small random scenes."""

import dataclasses

import numpy as np
import pytest

from layerseg.synth import SceneSpec, generate_scene


def fd_gradient(f, x, step=1e-5):
    """Central finite differences of a scalar function at a float64 array.

    ``f`` must not retain references into ``x``; it is re-evaluated with the
    perturbed array for every element.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def assert_grads_match(analytic, numeric, rtol=1e-3, atol=1e-6):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def small_scene(seed, size=16, count=(2, 4), overlap=0.7):
    """A small scene with a good chance of overlapping objects."""
    spec = SceneSpec(height=size, width=size, object_count_range=count,
                     axis_range=(3, 5), overlap_probability=overlap,
                     max_overlap_fraction=0.4, seed=seed)
    return generate_scene(spec)


def overlapping_scene(seed=0, size=16):
    """A small scene guaranteed to contain at least one overlapping pair."""
    from layerseg import regions

    s = seed
    while True:
        scene = small_scene(s, size=size)
        dec = regions.decompose(scene)
        if any(m.any() for m in dec.overlap_masks) and all(
                f.any() for f in dec.free_masks):
            return scene
        s += 1
