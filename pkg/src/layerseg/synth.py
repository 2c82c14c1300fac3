"""Synthetic crowded/overlapping scene generation.

Produces images plus per-instance binary masks with controllable object
count, crowding and pairwise overlap.  Two shape families: rotated
ellipses (roundish cells) and dilated random curves ("worms", slender
curved bodies).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PLACEMENT_RETRIES = 60
INTENSITY_RANGE = (0.5, 0.9)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    object_count_range: tuple = (3, 7)
    shape_kind: str = "ellipse"          # "ellipse" | "worm"
    axis_range: tuple = (6, 12)          # half-axis lengths in pixels
    overlap_probability: float = 0.5
    max_overlap_fraction: float = 0.3    # of the smaller object's area
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.overlap_probability <= 1.0):
            raise ValueError("overlap_probability must be in [0, 1]")
        if not (0.0 <= self.max_overlap_fraction < 1.0):
            raise ValueError("max_overlap_fraction must be in [0, 1)")
        for lo, hi in (self.object_count_range, self.axis_range):
            if lo > hi:
                raise ValueError("range min must not exceed max")
        if self.shape_kind not in ("ellipse", "worm"):
            raise ValueError(f"unknown shape_kind {self.shape_kind!r}")


@dataclass
class Scene:
    """An image plus possibly-overlapping per-instance binary masks."""
    image: np.ndarray              # (H, W) float in [0, 1]
    instances: list                # list of (H, W) bool arrays
    placement_warning: bool = False

    @property
    def num_instances(self):
        return len(self.instances)


def _rasterize_ellipse(h, w, cy, cx, a, b, theta):
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _rasterize_worm(h, w, cy, cx, length, radius, rng):
    """Dilated random curve: unit steps with a wandering heading."""
    heading = rng.uniform(0.0, 2.0 * np.pi)
    pts = np.zeros((h, w), dtype=bool)
    y, x = float(cy), float(cx)
    for _ in range(int(length)):
        iy, ix = int(round(y)), int(round(x))
        if 0 <= iy < h and 0 <= ix < w:
            pts[iy, ix] = True
        heading += rng.normal(0.0, 0.25)
        y += np.sin(heading)
        x += np.cos(heading)
    if not pts.any():
        return pts
    dist = ndimage.distance_transform_edt(~pts)
    return dist <= radius


def _propose_mask(spec, rng, existing, want_overlap):
    h, w = spec.height, spec.width
    lo, hi = spec.axis_range
    if want_overlap and existing:
        # anchor near an existing object to make overlap likely
        anchor = existing[rng.integers(len(existing))]
        ys, xs = np.nonzero(anchor)
        j = rng.integers(len(ys))
        cy = ys[j] + rng.normal(0.0, hi / 2)
        cx = xs[j] + rng.normal(0.0, hi / 2)
    else:
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
    if spec.shape_kind == "ellipse":
        a = rng.uniform(lo, hi)
        b = rng.uniform(lo, hi)
        theta = rng.uniform(0.0, np.pi)
        return _rasterize_ellipse(h, w, cy, cx, max(a, b), min(a, b), theta)
    length = rng.uniform(3 * lo, 3 * hi)
    radius = max(1.5, lo / 3)
    return _rasterize_worm(h, w, cy, cx, length, radius, rng)


def _acceptable(mask, existing, spec):
    """Pairwise overlap-fraction bound plus a nonempty-core guarantee."""
    area = int(mask.sum())
    if area < 4:
        return False
    for other in existing:
        inter = int(np.logical_and(mask, other).sum())
        if inter == 0:
            continue
        if inter / min(area, int(other.sum())) > spec.max_overlap_fraction:
            return False
    # every object must keep at least one pixel covered by no other object
    all_masks = existing + [mask]
    coverage = np.zeros(mask.shape, dtype=np.int32)
    for m in all_masks:
        coverage += m
    for m in all_masks:
        if not np.any(m & (coverage == 1)):
            return False
    return True


def generate_scene(spec: SceneSpec) -> Scene:
    """Deterministic scene generation from (spec, spec.seed).

    Placement uses rejection sampling with a bounded retry budget; when the
    budget is exhausted the scene is returned with fewer objects and
    ``placement_warning`` set.
    """
    rng = np.random.default_rng(spec.seed)
    n_target = int(rng.integers(spec.object_count_range[0],
                                spec.object_count_range[1] + 1))
    masks = []
    warning = False
    for _ in range(n_target):
        want_overlap = rng.random() < spec.overlap_probability
        placed = False
        for _ in range(PLACEMENT_RETRIES):
            mask = _propose_mask(spec, rng, masks, want_overlap)
            if not want_overlap and any(np.logical_and(mask, m).any() for m in masks):
                continue
            if _acceptable(mask, masks, spec):
                masks.append(mask)
                placed = True
                break
        if not placed:
            warning = True
            break
    image = render_image(masks, spec.noise_sigma, int(rng.integers(2 ** 63)),
                         shape=(spec.height, spec.width))
    return Scene(image=image, instances=masks, placement_warning=warning)


def render_image(instances, noise_sigma, seed, shape=None):
    """Render instance masks to an intensity image.

    Per-object base intensity is drawn uniformly from [0.5, 0.9]; overlap
    pixels take the per-pixel maximum of contributing intensities; additive
    Gaussian noise is clamped to [0, 1].
    """
    rng = np.random.default_rng(seed)
    if shape is None:
        if not instances:
            raise ValueError("render_image: shape required when no instances given")
        shape = instances[0].shape
    image = np.zeros(shape, dtype=np.float64)
    for mask in instances:
        if mask.shape != shape:
            raise ValueError("render_image: masks must share one shape")
        intensity = rng.uniform(*INTENSITY_RANGE)
        np.maximum(image, intensity * mask, out=image)
    if noise_sigma > 0:
        image += rng.normal(0.0, noise_sigma, size=shape)
    return np.clip(image, 0.0, 1.0)


def augment(scene: Scene, seed) -> Scene:
    """Random flips, rotation by a multiple of 90 degrees and gamma correction.

    All instance masks receive exactly the geometric transform applied to
    the image; gamma applies to the image only.
    """
    rng = np.random.default_rng(seed)
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    k = int(rng.integers(0, 4))
    gamma = rng.uniform(0.5, 2.0)

    def geom(a):
        if hflip:
            a = a[:, ::-1]
        if vflip:
            a = a[::-1, :]
        return np.rot90(a, k)

    image = geom(scene.image) ** gamma
    instances = [np.ascontiguousarray(geom(m)) for m in scene.instances]
    return Scene(image=np.ascontiguousarray(image), instances=instances,
                 placement_warning=scene.placement_warning)
