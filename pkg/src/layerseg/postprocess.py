"""Instance extraction from raw predictions.

Threshold the foreground, binarize the layering stack per pixel (argmax
plus, in overlap mode, every channel above the threshold), intersect with
the foreground, and take per-layer connected components of sufficient size
as objects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class PostprocessParams:
    threshold: float = 0.5       # tau: foreground / layer binarization threshold
    min_size: int = 30           # S_min: minimal object size in pixels
    overlap_mode: bool = True    # also set every channel above tau
    foreground_intersect: bool = True

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must be in (0, 1)")
        if self.min_size < 1:
            raise ValueError("min_size must be >= 1")


@dataclass
class InstanceSegResult:
    masks: list        # (H, W) bool, possibly overlapping across layers
    layers: list       # source layer index (0-based) per mask

    @property
    def num_instances(self):
        return len(self.masks)


def _remove_small(mask, min_size):
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return mask
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_size
    keep[0] = False
    return keep[labels]


def segment(prediction, params: PostprocessParams) -> InstanceSegResult:
    """Turn (foreground, layering) fields into instance masks.

    Components are emitted ordered by (layer, row-major discovery order).
    An empty result is valid.
    """
    f_raw = np.asarray(prediction.foreground)
    l_raw = np.asarray(prediction.layering)
    h, w, n = l_raw.shape

    fg = _remove_small(f_raw > params.threshold, params.min_size)

    stack = np.zeros((h, w, n), dtype=bool)
    am = np.argmax(l_raw, axis=2)  # ties resolve to the lowest channel
    np.put_along_axis(stack, am[:, :, None], True, axis=2)
    if params.overlap_mode:
        stack |= l_raw > params.threshold
    if params.foreground_intersect:
        stack &= fg[:, :, None]

    masks = []
    layers = []
    for k in range(n):
        labels, count = ndimage.label(stack[:, :, k], structure=EIGHT_CONNECTED)
        for comp in range(1, count + 1):
            m = labels == comp
            if int(m.sum()) >= params.min_size:
                masks.append(m)
                layers.append(k)
    return InstanceSegResult(masks=masks, layers=layers)
