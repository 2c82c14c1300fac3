"""Unit values, invariances and gradient checks for the training losses."""

import numpy as np
import pytest

from layerseg import losses, regions
from layerseg.model import Prediction
from layerseg.synth import Scene
from layerseg.tensor import Tensor, gradients, ParameterSet, parameter

from conftest import assert_grads_match, fd_gradient, overlapping_scene, small_scene


def scene_from_masks(masks, shape=(16, 16)):
    image = np.zeros(shape)
    for m in masks:
        image = np.maximum(image, 0.7 * m)
    return Scene(image=image, instances=[np.asarray(m, bool) for m in masks])


def rect(shape, r0, r1, c0, c1):
    m = np.zeros(shape, dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def pred(fg, lay):
    return Prediction(foreground=np.asarray(fg, dtype=np.float64),
                      layering=np.asarray(lay, dtype=np.float64))


def random_pred(shape, n, seed, lo=0.05, hi=0.95):
    rng = np.random.default_rng(seed)
    return pred(rng.uniform(lo, hi, shape), rng.uniform(lo, hi, (*shape, n)))


# -- cosine similarity ---------------------------------------------------

def test_cosine_similarity_values():
    assert losses.cosine_similarity([1.0, 0.0], [0.0, 1.0]).item() == pytest.approx(0.0, abs=1e-6)
    assert losses.cosine_similarity([1.0, 0.0], [1.0, 0.0]).item() == pytest.approx(1.0, abs=1e-6)
    assert losses.cosine_similarity([1.0, 1.0], [1.0, 0.0]).item() == pytest.approx(
        1.0 / np.sqrt(2.0), abs=1e-6)


def test_cosine_similarity_scale_invariant():
    rng = np.random.default_rng(0)
    a = rng.uniform(0.1, 1.0, 5)
    b = rng.uniform(0.1, 1.0, 5)
    base = losses.cosine_similarity(a, b).item()
    assert losses.cosine_similarity(7.3 * a, 0.02 * b).item() == pytest.approx(base, abs=1e-6)


# -- attracting loss -----------------------------------------------------

def test_attract_zero_for_constant_embeddings():
    scene = overlapping_scene(0)
    dec = regions.decompose(scene)
    lay = np.zeros((*scene.image.shape, 4))
    rng = np.random.default_rng(1)
    for free in dec.free_masks:
        lay[free] = rng.uniform(0.1, 0.9, 4)
    p = pred(dec.foreground, lay)
    assert losses.attract_loss(p, dec).item() == pytest.approx(0.0, abs=1e-6)


def test_attract_two_pixel_orthogonal_object_is_half():
    m = np.zeros((8, 8), dtype=bool)
    m[2, 2] = m[2, 3] = True
    dec = regions.decompose(scene_from_masks([m], (8, 8)))
    lay = np.zeros((8, 8, 2))
    lay[2, 2] = (1.0, 0.0)
    lay[2, 3] = (0.0, 1.0)
    p = pred(m, lay)
    assert losses.attract_loss(p, dec).item() == pytest.approx(0.5, abs=1e-6)


def test_attract_direct_summation_oracle():
    """Direct numpy re-implementation of Eq. 2 on random scenes."""
    for seed in range(4):
        scene = small_scene(seed)
        dec = regions.decompose(scene)
        p = random_pred(scene.image.shape, 4, seed + 50)
        lay = p.layering
        total = 0
        acc = 0.0
        for free in dec.free_masks:
            if not free.any():
                continue
            u = lay[free].mean(axis=0)
            for e in lay[free]:
                d = e @ u / (np.linalg.norm(e) * np.linalg.norm(u))
                acc += d * d
            total += int(free.sum())
        expected = 1.0 - acc / total
        assert losses.attract_loss(p, dec).item() == pytest.approx(expected, abs=1e-5)


# -- repelling loss ------------------------------------------------------

def _two_object_scene():
    a = rect((16, 16), 0, 4, 0, 4)
    b = rect((16, 16), 0, 4, 8, 12)
    scene = scene_from_masks([a, b])
    dec = regions.decompose(scene)
    adj = regions.adjacency(scene, threshold=15.0)
    assert adj[0] == [1]
    return dec, adj


def test_repel_orthogonal_means_is_zero():
    dec, adj = _two_object_scene()
    lay = np.zeros((16, 16, 2))
    lay[dec.free_masks[0]] = (1.0, 0.0)
    lay[dec.free_masks[1]] = (0.0, 1.0)
    p = pred(dec.foreground, lay)
    assert losses.repel_loss(p, dec, adj).item() == pytest.approx(0.0, abs=1e-6)


def test_repel_identical_means_is_one():
    dec, adj = _two_object_scene()
    lay = np.zeros((16, 16, 2))
    lay[dec.free_masks[0]] = (0.6, 0.8)
    lay[dec.free_masks[1]] = (0.6, 0.8)
    p = pred(dec.foreground, lay)
    assert losses.repel_loss(p, dec, adj).item() == pytest.approx(1.0, abs=1e-6)


def test_repel_direct_summation_oracle():
    for seed in range(4):
        scene = small_scene(seed)
        dec = regions.decompose(scene)
        adj = regions.adjacency(scene, threshold=6.0)
        p = random_pred(scene.image.shape, 4, seed + 70)
        lay = p.layering
        means = [lay[f].mean(axis=0) if f.any() else None for f in dec.free_masks]
        c = dec.num_objects
        acc = 0.0
        for i in range(c):
            if means[i] is None or not adj[i]:
                continue
            inner = 0.0
            for j in adj[i]:
                if means[j] is None:
                    continue
                d = means[i] @ means[j] / (np.linalg.norm(means[i]) * np.linalg.norm(means[j]))
                inner += d * d
            acc += inner / len(adj[i])
        expected = acc / c if c else 0.0
        assert losses.repel_loss(p, dec, adj).item() == pytest.approx(expected, abs=1e-5)


# -- sparse loss ---------------------------------------------------------

def test_sparse_one_hot_embeddings_is_zero():
    scene = overlapping_scene(1)
    dec = regions.decompose(scene)
    lay = np.full((*scene.image.shape, 4), 1e-12)
    rng = np.random.default_rng(3)
    for free in dec.free_masks:
        k = int(rng.integers(4))
        field = lay[:, :, k]
        field[free] = rng.uniform(0.3, 0.9)
    p = pred(dec.foreground, lay)
    assert losses.sparse_loss(p, dec).item() == pytest.approx(0.0, abs=1e-6)


def test_sparse_uniform_embedding_is_half():
    m = rect((8, 8), 2, 6, 2, 6)
    dec = regions.decompose(scene_from_masks([m], (8, 8)))
    lay = np.zeros((8, 8, 4))
    lay[m] = (0.3, 0.3, 0.3, 0.3)   # normalized max digit 1/2
    p = pred(m, lay)
    assert losses.sparse_loss(p, dec).item() == pytest.approx(0.5, abs=1e-6)


def test_sparse_345_pixel_term():
    m = np.zeros((8, 8), dtype=bool)
    m[4, 4] = True
    dec = regions.decompose(scene_from_masks([m], (8, 8)))
    lay = np.zeros((8, 8, 2))
    lay[4, 4] = (3.0, 4.0)          # normalized (0.6, 0.8), max digit 0.8
    p = pred(m, lay)
    assert losses.sparse_loss(p, dec).item() == pytest.approx(0.2, abs=1e-6)


# -- layering loss composition ------------------------------------------

def test_layering_loss_is_weighted_sum_of_terms():
    for seed in range(3):
        scene = small_scene(seed)
        dec = regions.decompose(scene)
        adj = regions.adjacency(scene, threshold=8.0)
        p = random_pred(scene.image.shape, 4, seed + 90)
        expected = (losses.attract_loss(p, dec).item()
                    + losses.repel_loss(p, dec, adj).item()
                    + 0.1 * losses.sparse_loss(p, dec).item())
        assert losses.layering_loss(p, dec, adj, sparse_weight=0.1).item() == \
            pytest.approx(expected, abs=1e-6)


def test_layering_component_combination_arithmetic():
    # components 0.5 / 1 / 0.5 with weight 0.1 combine to 1.55
    assert 0.5 + 1.0 + 0.1 * 0.5 == pytest.approx(1.55, abs=1e-12)
    dec, adj = _two_object_scene()
    lay = np.zeros((16, 16, 2))
    # identical means across the pair -> repel = 1; within each object make
    # embeddings alternate between (1,0) and (0,1) -> attract = 0.5, and the
    # normalized max digit is 1 -> sparse = 0
    for free in dec.free_masks:
        ys, xs = np.nonzero(free)
        for idx, (y, x) in enumerate(zip(ys, xs)):
            lay[y, x] = (1.0, 0.0) if idx % 2 == 0 else (0.0, 1.0)
    p = pred(dec.foreground, lay)
    assert losses.attract_loss(p, dec).item() == pytest.approx(0.5, abs=1e-6)
    assert losses.repel_loss(p, dec, adj).item() == pytest.approx(1.0, abs=1e-6)
    assert losses.sparse_loss(p, dec).item() == pytest.approx(0.0, abs=1e-6)
    assert losses.layering_loss(p, dec, adj, sparse_weight=0.1).item() == \
        pytest.approx(1.5, abs=1e-6)


# -- foreground loss -----------------------------------------------------

def test_foreground_exact_match_is_clamp_limited():
    scene = small_scene(2)
    dec = regions.decompose(scene)
    p = pred(dec.foreground.astype(float), np.zeros((*scene.image.shape, 2)))
    assert losses.foreground_loss(p, dec).item() == pytest.approx(0.0, abs=2e-7)


def test_foreground_half_everywhere_is_ln2():
    scene = small_scene(3)
    dec = regions.decompose(scene)
    p = pred(np.full(scene.image.shape, 0.5), np.zeros((*scene.image.shape, 2)))
    assert losses.foreground_loss(p, dec).item() == pytest.approx(np.log(2.0), abs=1e-6)


def test_foreground_direct_oracle():
    scene = small_scene(4)
    dec = regions.decompose(scene)
    p = random_pred(scene.image.shape, 2, 5)
    t = dec.foreground.astype(np.float64)
    f = p.foreground
    expected = -np.mean(t * np.log(f) + (1.0 - t) * np.log(1.0 - f))
    assert losses.foreground_loss(p, dec).item() == pytest.approx(expected, abs=1e-6)


# -- overlap-completion loss --------------------------------------------

def _stack_setup(seed):
    scene = overlapping_scene(seed)
    dec = regions.decompose(scene)
    rng = np.random.default_rng(seed)
    want = {}
    for i in range(dec.num_objects):
        want[i] = int(rng.integers(4))
        for j in range(i):
            if (dec.masks[i] & dec.masks[j]).any() and want[i] == want[j]:
                want[i] = (want[i] + 1) % 4
    assignment = regions.LayerAssignment(layers=want, skipped=[])
    stack = regions.build_target_stack(assignment, dec, 4)
    return dec, stack


def test_overlap_exact_match_is_zero():
    dec, stack = _stack_setup(0)
    p = pred(dec.foreground.astype(float), stack.astype(np.float64))
    assert losses.overlap_loss(p, stack, dec).item() == pytest.approx(0.0, abs=1e-6)


def test_overlap_all_floor_activations_is_one():
    dec, stack = _stack_setup(1)
    p = pred(dec.foreground.astype(float), np.full(stack.shape, 1e-9))
    assert losses.overlap_loss(p, stack, dec).item() == pytest.approx(1.0, abs=1e-4)


def test_overlap_direct_summation_oracle():
    """Eq. 6 iterated explicitly: objects, then every pixel of O_i."""
    for seed in range(4):
        dec, stack = _stack_setup(seed + 10)
        p = random_pred(dec.foreground.shape, 4, seed + 31)
        lay = p.layering
        num = 0.0
        den = 0.0
        for m in dec.masks:
            for y, x in zip(*np.nonzero(m)):
                num += float(lay[y, x] @ stack[y, x])
                den += float(lay[y, x].sum() + stack[y, x].sum())
        expected = 1.0 - 2.0 * num / den
        assert losses.overlap_loss(p, stack, dec).item() == pytest.approx(expected, abs=1e-5)


# -- total loss ----------------------------------------------------------

def test_total_phase1_composition_and_phase2_addition():
    scene = overlapping_scene(5)
    dec = regions.decompose(scene)
    adj = regions.adjacency(scene)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        stack = regions.build_target_stack(
            regions.assign_layers(random_pred(scene.image.shape, 4, 0), dec), dec, 4)
    p = random_pred(scene.image.shape, 4, 6)
    w1 = losses.LossWeights(phase=1)
    w2 = losses.LossWeights(phase=2)
    t1 = losses.total_loss(p, dec, adj, None, w1).item()
    expected1 = (losses.foreground_loss(p, dec).item()
                 + losses.layering_loss(p, dec, adj, 0.1).item())
    assert t1 == pytest.approx(expected1, abs=1e-6)
    t2 = losses.total_loss(p, dec, adj, stack, w2).item()
    assert t2 == pytest.approx(t1 + losses.overlap_loss(p, stack, dec).item(), abs=1e-6)


def test_total_phase2_requires_target():
    scene = small_scene(6)
    dec = regions.decompose(scene)
    adj = regions.adjacency(scene)
    with pytest.raises(ValueError):
        losses.total_loss(random_pred(scene.image.shape, 4, 0), dec, adj, None,
                          losses.LossWeights(phase=2))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        losses.LossWeights(sparse_weight=-0.1)
    with pytest.raises(ValueError):
        losses.LossWeights(phase=3)


# -- invariances ---------------------------------------------------------

def test_channel_permutation_invariance_all_losses():
    scene = overlapping_scene(7)
    dec = regions.decompose(scene)
    adj = regions.adjacency(scene)
    _, stack = _stack_setup(7)
    p = random_pred(scene.image.shape, 4, 8)
    perm = np.array([2, 0, 3, 1])
    p2 = pred(p.foreground, p.layering[:, :, perm])
    stack2 = stack[:, :, perm]
    for a, b in [
        (losses.attract_loss(p, dec), losses.attract_loss(p2, dec)),
        (losses.repel_loss(p, dec, adj), losses.repel_loss(p2, dec, adj)),
        (losses.sparse_loss(p, dec), losses.sparse_loss(p2, dec)),
        (losses.overlap_loss(p, stack, dec), losses.overlap_loss(p2, stack2, dec)),
        (losses.layering_loss(p, dec, adj), losses.layering_loss(p2, dec, adj)),
    ]:
        assert a.item() == pytest.approx(b.item(), abs=1e-6)


def test_positive_scale_invariance_of_cosine_terms():
    scene = overlapping_scene(9)
    dec = regions.decompose(scene)
    adj = regions.adjacency(scene)
    p = random_pred(scene.image.shape, 4, 10)
    for c in (0.3, 5.0):
        p2 = pred(p.foreground, c * p.layering)
        assert losses.attract_loss(p2, dec).item() == pytest.approx(
            losses.attract_loss(p, dec).item(), abs=1e-6)
        assert losses.repel_loss(p2, dec, adj).item() == pytest.approx(
            losses.repel_loss(p, dec, adj).item(), abs=1e-6)
        assert losses.sparse_loss(p2, dec).item() == pytest.approx(
            losses.sparse_loss(p, dec).item(), abs=1e-6)


def test_layering_loss_ignores_pixels_outside_free_foreground():
    scene = overlapping_scene(11)
    dec = regions.decompose(scene)
    adj = regions.adjacency(scene)
    p = random_pred(scene.image.shape, 4, 12)
    lay2 = p.layering.copy()
    outside = ~dec.free_foreground
    rng = np.random.default_rng(13)
    lay2[outside] = rng.uniform(0.05, 0.95, (int(outside.sum()), 4))
    p2 = pred(p.foreground, lay2)
    assert losses.layering_loss(p2, dec, adj).item() == pytest.approx(
        losses.layering_loss(p, dec, adj).item(), abs=1e-6)


# -- gradients -----------------------------------------------------------

class _TensorPred:
    def __init__(self, fg, lay):
        self.foreground = fg
        self.layering = lay


def _loss_grad_check(build_loss, seed, n=4):
    """Backward vs finite differences for a loss over (F_raw, L_raw)."""
    scene = overlapping_scene(seed)
    shape = scene.image.shape
    rng = np.random.default_rng(seed + 1000)
    fg0 = rng.uniform(0.1, 0.9, shape)
    lay0 = rng.uniform(0.1, 0.9, (*shape, n))

    params = ParameterSet()
    params.add("fg", parameter(fg0, dtype=np.float64))
    params.add("lay", parameter(lay0, dtype=np.float64))
    loss = build_loss(scene, _TensorPred(params["fg"], params["lay"]))
    grads = gradients(loss, params)

    def f_fg(x):
        p = _TensorPred(Tensor(x), Tensor(lay0.copy()))
        return float(build_loss(scene, p).data)

    def f_lay(x):
        p = _TensorPred(Tensor(fg0.copy()), Tensor(x))
        return float(build_loss(scene, p).data)

    assert_grads_match(grads["fg"], fd_gradient(f_fg, fg0), rtol=1e-3)
    assert_grads_match(grads["lay"], fd_gradient(f_lay, lay0), rtol=1e-3)


def test_grad_layering_and_foreground_losses():
    def build(scene, p):
        dec = regions.decompose(scene)
        adj = regions.adjacency(scene)
        return losses.total_loss(p, dec, adj, None, losses.LossWeights(phase=1))
    _loss_grad_check(build, 21)


def test_grad_overlap_loss():
    def build(scene, p):
        dec = regions.decompose(scene)
        assignment = regions.LayerAssignment(
            layers={i: i % 4 for i in range(dec.num_objects)}, skipped=[])
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            stack = regions.build_target_stack(assignment, dec, 4)
        return losses.overlap_loss(p, stack, dec)
    _loss_grad_check(build, 22)
