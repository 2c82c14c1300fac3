"""On-disk formats for scenes, datasets and segmentation results.

A scene directory holds ``image.png`` (8-bit grayscale), ``inst_000.png``,
``inst_001.png``, ... (binary masks as 0/255) and ``scene.json``.  A dataset
directory holds one subdirectory per scene plus ``dataset.json``.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .synth import Scene, SceneSpec, generate_scene


def _to_u8(image):
    # round-half-up, fixed across platforms
    return np.floor(np.asarray(image) * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def save_scene(scene_dir, scene, generator_spec=None, seed=None):
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_u8(scene.image), mode="L").save(scene_dir / "image.png")
    for i, mask in enumerate(scene.instances):
        arr = (np.asarray(mask, dtype=np.uint8) * 255)
        Image.fromarray(arr, mode="L").save(scene_dir / f"inst_{i:03d}.png")
    meta = {
        "height": int(scene.image.shape[0]),
        "width": int(scene.image.shape[1]),
        "instance_count": len(scene.instances),
        "generator_spec": generator_spec,
        "seed": seed,
    }
    with open(scene_dir / "scene.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_scene(scene_dir) -> Scene:
    scene_dir = Path(scene_dir)
    with open(scene_dir / "scene.json") as f:
        meta = json.load(f)
    image = np.asarray(Image.open(scene_dir / "image.png"), dtype=np.float64) / 255.0
    instances = []
    for i in range(meta["instance_count"]):
        arr = np.asarray(Image.open(scene_dir / f"inst_{i:03d}.png"))
        instances.append(arr > 127)
    return Scene(image=image, instances=instances)


def scene_names(dataset_dir):
    with open(Path(dataset_dir) / "dataset.json") as f:
        return json.load(f)["scenes"]


def generate_dataset(out_dir, spec: SceneSpec, count, seed):
    """Write ``count`` scenes; scene i is generated with seed ``seed + i``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    spec_dict = dataclasses.asdict(spec)
    for i in range(count):
        scene_spec = dataclasses.replace(spec, seed=seed + i)
        scene = generate_scene(scene_spec)
        name = f"scene_{i:04d}"
        save_scene(out_dir / name, scene, generator_spec=spec_dict, seed=seed + i)
        names.append(name)
    index = {"count": count, "seed": seed, "generator_spec": spec_dict,
             "scenes": names}
    with open(out_dir / "dataset.json", "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")
    return names


def load_dataset(dataset_dir):
    """Returns a list of (name, Scene) in index order."""
    dataset_dir = Path(dataset_dir)
    return [(name, load_scene(dataset_dir / name)) for name in scene_names(dataset_dir)]


def save_result(out_dir, result):
    """Write an InstanceSegResult in the per-instance PNG convention.

    Layer indices are reported 1-based in ``result.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, mask in enumerate(result.masks):
        arr = (np.asarray(mask, dtype=np.uint8) * 255)
        Image.fromarray(arr, mode="L").save(out_dir / f"inst_{i:03d}.png")
    meta = {
        "instance_count": len(result.masks),
        "instances": [
            {"layer": int(layer) + 1, "pixel_count": int(np.asarray(m).sum())}
            for m, layer in zip(result.masks, result.layers)
        ],
    }
    with open(out_dir / "result.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_result_masks(result_dir):
    result_dir = Path(result_dir)
    with open(result_dir / "result.json") as f:
        meta = json.load(f)
    masks = []
    for i in range(meta["instance_count"]):
        arr = np.asarray(Image.open(result_dir / f"inst_{i:03d}.png"))
        masks.append(arr > 127)
    return masks
