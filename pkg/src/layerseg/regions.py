"""Region structure derived from a scene: overlap decomposition,
adjacency under a pixel-distance threshold, layer assignment from
predictions, and target-stack construction for overlap completion."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

ADJACENCY_THRESHOLD = 15.0  # pixels


@dataclass
class RegionDecomposition:
    masks: list              # O_i, (H, W) bool
    free_masks: list         # O_i^n: pixels covered by object i only
    overlap_masks: list      # O_i^o: pixels of O_i covered by >= 2 objects
    foreground: np.ndarray   # S_f: union of all masks
    free_foreground: np.ndarray  # S_fn: pixels covered by exactly one object

    @property
    def num_objects(self):
        return len(self.masks)


@dataclass
class AdjacencyGraph:
    threshold: float
    neighbors: list          # per object: sorted list of adjacent object indices

    def __getitem__(self, i):
        return self.neighbors[i]


def decompose(scene) -> RegionDecomposition:
    """Split each object mask into its overlap-free and overlapping parts."""
    masks = [np.asarray(m, dtype=bool) for m in scene.instances]
    if masks:
        shape = masks[0].shape
    else:
        shape = scene.image.shape
    coverage = np.zeros(shape, dtype=np.int32)
    for m in masks:
        coverage += m
    single = coverage == 1
    free = [m & single for m in masks]
    over = [m & ~single for m in masks]
    return RegionDecomposition(
        masks=masks,
        free_masks=free,
        overlap_masks=over,
        foreground=coverage >= 1,
        free_foreground=single,
    )


def adjacency(scene, threshold=ADJACENCY_THRESHOLD) -> AdjacencyGraph:
    """Objects whose minimum Euclidean pixel-centre distance is below threshold.

    Uses one distance transform per object; overlapping objects are at
    distance 0 and therefore always adjacent.
    """
    if threshold <= 0:
        raise ValueError("adjacency threshold must be positive")
    masks = [np.asarray(m, dtype=bool) for m in scene.instances]
    n = len(masks)
    neighbors = [set() for _ in range(n)]
    for i in range(n):
        dist = ndimage.distance_transform_edt(~masks[i])
        for j in range(i + 1, n):
            if dist[masks[j]].min() < threshold:
                neighbors[i].add(j)
                neighbors[j].add(i)
    return AdjacencyGraph(threshold=threshold,
                          neighbors=[sorted(s) for s in neighbors])


@dataclass
class LayerAssignment:
    layers: dict             # object index -> layer index in 0..N-1
    skipped: list            # object indices with empty overlap-free part


def assign_layers(prediction, decomposition) -> LayerAssignment:
    """Assign each object to the layer with the highest mean activation
    over its overlap-free part; ties break toward the lowest channel."""
    lay = prediction.layering
    layers = {}
    skipped = []
    for i, free in enumerate(decomposition.free_masks):
        if not free.any():
            skipped.append(i)
            continue
        means = lay[free].mean(axis=0)
        layers[i] = int(np.argmax(means))
    return LayerAssignment(layers=layers, skipped=skipped)


def build_target_stack(assignment, decomposition, num_layers):
    """Place each full object mask (including its overlapping part) into its
    assigned layer; overlap pixels of objects in different layers become
    multi-hot.  Overlapping objects assigned the same layer only trigger a
    warning (their union merges into one component in that layer)."""
    h, w = decomposition.foreground.shape
    stack = np.zeros((h, w, num_layers), dtype=np.float32)
    by_layer = {}
    for i, k in assignment.layers.items():
        stack[:, :, k] = np.logical_or(stack[:, :, k], decomposition.masks[i])
        by_layer.setdefault(k, []).append(i)
    for k, objs in by_layer.items():
        for a in range(len(objs)):
            for b in range(a + 1, len(objs)):
                if np.logical_and(decomposition.masks[objs[a]],
                                  decomposition.masks[objs[b]]).any():
                    warnings.warn(
                        f"objects {objs[a]} and {objs[b]} overlap but share layer {k}",
                        stacklevel=2)
    return stack
