"""Two-phase training loop.

Phase 1 optimizes foreground + layering losses on augmented scenes; phase 2
adds overlap completion with target stacks rebuilt per batch from the
current model's layer assignments (no gradient flows through the targets).
RMSprop updates with an exponentially decayed learning rate; the best model
per phase is selected on validation loss.
"""

from __future__ import annotations

import copy
import json
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import losses, regions, synth
from .model import NetworkConfig, forward_batch, init_params, save_checkpoint
from .tensor import NonFiniteError, ParameterSet, Tensor, gradients, parameter


@dataclass(frozen=True)
class TrainConfig:
    phase1_epochs: int = 300
    phase2_epochs: int = 150
    learning_rate: float = 1e-4
    decay_factor: float = 0.9
    decay_interval_steps: int = 1000
    optimizer_rho: float = 0.9
    optimizer_eps: float = 1e-8
    batch_size: int = 4
    validation_fraction: float = 0.1
    sparse_weight: float = 0.1
    adjacency_threshold: float = regions.ADJACENCY_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must be in (0, 1)")
        for name in ("learning_rate", "decay_factor", "optimizer_rho", "optimizer_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainState:
    params: ParameterSet
    accumulators: dict = field(default_factory=dict)
    step: int = 0
    phase: int = 1
    best_val: float = float("inf")

    def __post_init__(self):
        for name, t in self.params.items():
            if name not in self.accumulators:
                self.accumulators[name] = np.zeros_like(t.data)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the last good checkpoint is retained."""


def learning_rate_at(step, config):
    return config.learning_rate * config.decay_factor ** (step // config.decay_interval_steps)


def optimizer_step(state, grads, config):
    """RMSprop: a <- rho a + (1-rho) g^2; p <- p - lr g / (sqrt(a) + eps)."""
    for name, _ in state.params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
    lr = learning_rate_at(state.step, config)
    for name, t in state.params.items():
        g = grads[name]
        a = state.accumulators[name]
        a *= config.optimizer_rho
        a += (1.0 - config.optimizer_rho) * g * g
        t.data = t.data - (lr * g / (np.sqrt(a) + config.optimizer_eps)).astype(t.data.dtype)
    state.step += 1
    return state


def split_dataset(n, validation_fraction, seed):
    """Seeded 90/10-style split; returns (train indices, val indices)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(validation_fraction * n)))
    return list(perm[n_val:]), list(perm[:n_val])


def _derive_seed(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _frozen_view(params):
    """Non-trainable snapshot of the parameters for validation forwards."""
    return {name: Tensor(t.data) for name, t in params.items()}


class _ScenePack:
    """A scene with its precomputed region structure and adjacency.

    Adjacency is invariant under the augmentation group (flips, 90-degree
    rotations, gamma), so it is computed once on the source scene and its
    index structure reused; decomposition is recomputed per augmented view.
    """

    def __init__(self, scene, threshold):
        self.scene = scene
        self.adjacency = regions.adjacency(scene, threshold)


def _batch_loss(packs, aug_scenes, params, net_config, weights):
    """Mean total loss over a batch of scenes; returns (loss, per-scene info)."""
    images = np.stack([s.image for s in aug_scenes]).astype(np.float32)[:, :, :, None]
    fg_b, lay_b = forward_batch(Tensor(images), params, net_config)
    per_scene = []
    for b, (pack, scene) in enumerate(zip(packs, aug_scenes)):
        dec = regions.decompose(scene)
        fg = fg_b.select(b).reshape(scene.image.shape)
        lay = lay_b.select(b)
        pred = _TensorPred(fg, lay)
        target = None
        if weights.phase == 2:
            # targets from the current model, treated as constants; an
            # immature model may still co-assign overlapping objects, so the
            # stack builder's warning is expected noise here
            raw = _NumpyPred(fg.data, lay.data)
            assign = regions.assign_layers(raw, dec)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                target = regions.build_target_stack(assign, dec, net_config.num_layers)
        loss = losses.total_loss(pred, dec, pack.adjacency, target, weights)
        per_scene.append(loss)
    total = per_scene[0]
    for extra in per_scene[1:]:
        total = total + extra
    return total * (1.0 / len(per_scene))


@dataclass
class _TensorPred:
    foreground: Tensor
    layering: Tensor


@dataclass
class _NumpyPred:
    foreground: np.ndarray
    layering: np.ndarray


def _validation_loss(packs, params, net_config, config, phase):
    weights = losses.LossWeights(sparse_weight=config.sparse_weight, phase=phase)
    frozen = _frozen_view(params)
    total = 0.0
    count = 0
    for start in range(0, len(packs), config.batch_size):
        chunk = packs[start:start + config.batch_size]
        loss = _batch_loss(chunk, [p.scene for p in chunk], frozen, net_config, weights)
        total += float(loss.data) * len(chunk)
        count += len(chunk)
    return total / count


def _run_phase(phase, epochs, packs, train_idx, val_idx, state, net_config,
               config, ckpt_path, log_fh, seed):
    weights = losses.LossWeights(sparse_weight=config.sparse_weight, phase=phase)
    val_packs = [packs[i] for i in val_idx]
    state.phase = phase
    state.best_val = float("inf")
    best_saved = False
    for epoch in range(epochs):
        t0 = time.time()
        epoch_rng = np.random.default_rng(_derive_seed(seed, phase, epoch))
        order = [train_idx[i] for i in epoch_rng.permutation(len(train_idx))]
        epoch_loss = 0.0
        n_scenes = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            chunk = [packs[i] for i in idx]
            aug = [synth.augment(packs[i].scene, _derive_seed(seed, phase, epoch, i))
                   for i in idx]
            try:
                loss = _batch_loss(chunk, aug, state.params, net_config, weights)
                grads = gradients(loss, state.params)
                optimizer_step(state, grads, config)
            except NonFiniteError as err:
                raise TrainingDiverged(
                    f"phase {phase} epoch {epoch}: {err}") from err
            epoch_loss += float(loss.data) * len(idx)
            n_scenes += len(idx)
        val_loss = _validation_loss(val_packs, state.params, net_config, config, phase)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"phase {phase} epoch {epoch}: validation loss not finite")
        if val_loss < state.best_val:
            state.best_val = val_loss
            save_checkpoint(ckpt_path, net_config, state.params)
            best_saved = True
        record = {
            "phase": phase,
            "epoch": epoch,
            "train_loss": epoch_loss / max(1, n_scenes),
            "val_loss": val_loss,
            "lr": learning_rate_at(state.step, config),
            "seconds": time.time() - t0,
        }
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()
    if not best_saved:
        save_checkpoint(ckpt_path, net_config, state.params)
    return ckpt_path


def train(scenes, net_config, config, run_dir, initial_params=None,
          initial_step=0, phases=(1, 2), log_name="train_log.jsonl"):
    """Train on a list of scenes; writes phaseN_best.ckpt files and an epoch
    log into run_dir.  Returns {phase: checkpoint path}.

    Fully deterministic given (scenes, configs, seed).
    """
    if not scenes:
        raise ValueError("train: dataset is empty")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    packs = [_ScenePack(s, config.adjacency_threshold) for s in scenes]
    train_idx, val_idx = split_dataset(len(packs), config.validation_fraction,
                                      _derive_seed(config.seed, 0))
    if initial_params is None:
        params = init_params(net_config, _derive_seed(config.seed, 1))
    else:
        params = initial_params
    state = TrainState(params=params, step=initial_step)
    out = {}
    with open(run_dir / log_name, "a") as log_fh:
        for phase in phases:
            epochs = config.phase1_epochs if phase == 1 else config.phase2_epochs
            ckpt = run_dir / f"phase{phase}_best.ckpt"
            _run_phase(phase, epochs, packs, train_idx, val_idx, state,
                       net_config, config, ckpt, log_fh, config.seed)
            out[phase] = ckpt
            # continue phase 2 from the best phase-1 model
            from .model import load_checkpoint
            _, best_params = load_checkpoint(ckpt)
            state = TrainState(params=best_params, step=state.step)
    return out
