"""Training objective for object layering.

Foreground cross-entropy, the cosine-similarity layering loss
(attracting + repelling + sparse terms), the Dice-like overlap-completion
loss, and the phase-dependent total.  All terms are built from
differentiable tensor ops so gradients flow back into the network;
predictions given as plain numpy arrays are wrapped as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, constant

NORM_EPS = 1e-8      # floor for L2 norms in cosine similarity / sparse term
LOG_CLAMP = 1e-7     # floor for cross-entropy log arguments


@dataclass(frozen=True)
class LossWeights:
    sparse_weight: float = 0.1
    phase: int = 1

    def __post_init__(self):
        if self.sparse_weight < 0:
            raise ValueError("sparse_weight must be >= 0")
        if self.phase not in (1, 2):
            raise ValueError("phase must be 1 or 2")


def _as_tensor(x, dtype=np.float32):
    if isinstance(x, Tensor):
        return x
    return constant(np.asarray(x), dtype=np.asarray(x).dtype if np.asarray(x).dtype.kind == "f" else dtype)


def _scalar(value, like):
    return constant(value, dtype=like.dtype)


def cosine_similarity(a, b):
    """D(a, b) = a.b / (|a| |b|), with norms floored at 1e-8."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    na = a.square().sum().sqrt().floor_at(NORM_EPS)
    nb = b.square().sum().sqrt().floor_at(NORM_EPS)
    return (a * b).sum() / (na * nb)


def _pixel_norms(lay):
    """Per-pixel L2 norm of the embedding field, floored."""
    return lay.square().sum(axis=2).sqrt().floor_at(NORM_EPS)


def _mean_embedding(lay, free_mask):
    """u_i: mean embedding over the object's overlap-free pixels."""
    m = constant(free_mask.astype(lay.dtype.type))
    cnt = float(free_mask.sum())
    return (lay * m.reshape(*free_mask.shape, 1)).sum(axis=(0, 1)) / cnt


def _attract(lay, decomposition, norms):
    total = 0
    acc = None
    for free in decomposition.free_masks:
        cnt = int(free.sum())
        if cnt == 0:
            continue
        total += cnt
        u = _mean_embedding(lay, free)
        un = u / u.square().sum().sqrt().floor_at(NORM_EPS)
        dots = (lay * un.reshape(1, 1, -1)).sum(axis=2) / norms
        term = (dots.square() * constant(free.astype(lay.dtype.type))).sum()
        acc = term if acc is None else acc + term
    if acc is None:
        return _scalar(0.0, lay)
    return 1.0 - acc / float(total)


def attract_loss(prediction, decomposition):
    """1 - mean squared cosine similarity between pixels and their object mean."""
    lay = _as_tensor(prediction.layering)
    return _attract(lay, decomposition, _pixel_norms(lay))


def repel_loss(prediction, decomposition, adjacency):
    """Mean squared cosine similarity between adjacent objects' mean embeddings.

    An object without adjacencies contributes 0; the outer divisor stays
    at the object count.
    """
    lay = _as_tensor(prediction.layering)
    c = decomposition.num_objects
    if c == 0:
        return _scalar(0.0, lay)
    means = [
        _mean_embedding(lay, free) if free.any() else None
        for free in decomposition.free_masks
    ]
    normed = [
        None if u is None else u / u.square().sum().sqrt().floor_at(NORM_EPS)
        for u in means
    ]
    acc = None
    for i in range(c):
        neigh = [j for j in adjacency[i] if normed[j] is not None]
        if normed[i] is None or not neigh:
            continue
        inner = None
        for j in neigh:
            d = (normed[i] * normed[j]).sum()
            d2 = d.square()
            inner = d2 if inner is None else inner + d2
        inner = inner / float(len(adjacency[i]))
        acc = inner if acc is None else acc + inner
    if acc is None:
        return _scalar(0.0, lay)
    return acc / float(c)


def sparse_loss(prediction, decomposition):
    """1 - mean maximal digit of the normalized embedding over overlap-free pixels."""
    lay = _as_tensor(prediction.layering)
    total = int(sum(int(f.sum()) for f in decomposition.free_masks))
    if total == 0:
        return _scalar(0.0, lay)
    norms = _pixel_norms(lay)
    peak = (lay / norms.reshape(*norms.shape, 1)).max(axis=2)
    # overlap-free parts of distinct objects are disjoint: one combined mask
    combined = np.zeros(decomposition.free_foreground.shape, dtype=lay.dtype.type)
    for free in decomposition.free_masks:
        combined += free
    return 1.0 - (peak * constant(combined)).sum() / float(total)


def layering_loss(prediction, decomposition, adjacency, sparse_weight=0.1):
    """Attracting + repelling + weighted sparse term, over overlap-free pixels only."""
    lay = _as_tensor(prediction.layering)
    norms = _pixel_norms(lay)
    attr = _attract(lay, decomposition, norms)
    rep = repel_loss(prediction, decomposition, adjacency)
    total = int(sum(int(f.sum()) for f in decomposition.free_masks))
    if total == 0:
        return attr + rep
    peak = (lay / norms.reshape(*norms.shape, 1)).max(axis=2)
    combined = np.zeros(decomposition.free_foreground.shape, dtype=lay.dtype.type)
    for free in decomposition.free_masks:
        combined += free
    sparse = 1.0 - (peak * constant(combined)).sum() / float(total)
    return attr + rep + sparse_weight * sparse


def foreground_loss(prediction, decomposition):
    """Binary cross-entropy between the foreground field and the foreground
    indicator, averaged over the whole image."""
    fg = _as_tensor(prediction.foreground)
    target = constant(decomposition.foreground.astype(fg.dtype.type))
    p = fg.clip(LOG_CLAMP, 1.0)
    q = (1.0 - fg).clip(LOG_CLAMP, 1.0)
    return -(target * p.log() + (1.0 - target) * q.log()).mean()


def overlap_loss(prediction, target_stack, decomposition):
    """Dice-like overlap-completion loss over the full object masks.

    Iterates objects then their full masks, so overlap pixels are counted
    once per covering object.
    """
    lay = _as_tensor(prediction.layering)
    coverage = np.zeros(decomposition.foreground.shape, dtype=lay.dtype.type)
    for m in decomposition.masks:
        coverage += m
    if not coverage.any():
        return _scalar(0.0, lay)
    stack = np.asarray(target_stack, dtype=lay.dtype.type)
    cov = constant(coverage)
    inter = ((lay * constant(stack)).sum(axis=2) * cov).sum()
    mass = ((lay.sum(axis=2) + constant(stack.sum(axis=2))) * cov).sum()
    return 1.0 - 2.0 * inter / mass


def total_loss(prediction, decomposition, adjacency, target_stack, weights):
    """Phase 1: foreground + layering.  Phase 2 additionally includes the
    overlap-completion loss and requires a target stack."""
    loss = foreground_loss(prediction, decomposition) + layering_loss(
        prediction, decomposition, adjacency, sparse_weight=weights.sparse_weight)
    if weights.phase == 2:
        if target_stack is None:
            raise ValueError("phase 2 requires a target stack")
        loss = loss + overlap_loss(prediction, target_stack, decomposition)
    return loss
