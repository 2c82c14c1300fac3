"""Two-head fully-convolutional network for object layering.

Shared encoder-decoder backbone with skip connections; two 3x3 pre-head
convolutions per branch; a 1-channel sigmoid foreground head and an
N-channel sigmoid layering head.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .tensor import ParameterSet, ShapeError, Tensor, concat, parameter

CHECKPOINT_MAGIC = b"LSEG"
CHECKPOINT_VERSION = 1

HEAD_CHANNELS = 32
LEAKY_ALPHA = 0.1
NORM_EPS = 1e-5


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 3             # encoder levels
    base_channels: int = 16    # channels at the first level
    num_layers: int = 4        # N: layering output channels
    input_channels: int = 1

    def __post_init__(self):
        if self.depth not in (2, 3, 4):
            raise ValueError(f"depth must be 2, 3 or 4, got {self.depth}")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2")


@dataclass
class Prediction:
    """Raw network output for one image: foreground field and layering stack."""
    foreground: np.ndarray    # (H, W), values in (0, 1)
    layering: np.ndarray      # (H, W, N), values in (0, 1)


def _conv_block_names(prefix):
    return [f"{prefix}_w", f"{prefix}_b", f"{prefix}_scale", f"{prefix}_shift"]


def _level_channels(config):
    """Encoder channel widths, shallowest first; one extra bottleneck level."""
    return [config.base_channels * (2 ** i) for i in range(config.depth + 1)]


def _conv_specs(config):
    """Every convolution in the network as (name, in_channels, out_channels, normalized)."""
    chans = _level_channels(config)
    specs = []
    cin = config.input_channels
    for lvl in range(config.depth):
        c = chans[lvl]
        specs.append((f"enc{lvl}_conv0", cin, c, True))
        specs.append((f"enc{lvl}_conv1", c, c, True))
        cin = c
    c = chans[config.depth]
    specs.append(("bottleneck_conv0", cin, c, True))
    specs.append(("bottleneck_conv1", c, c, True))
    cin = c
    for lvl in reversed(range(config.depth)):
        c = chans[lvl]
        specs.append((f"dec{lvl}_up", cin, c, True))
        specs.append((f"dec{lvl}_conv0", 2 * c, c, True))
        specs.append((f"dec{lvl}_conv1", c, c, True))
        cin = c
    for head in ("fg", "layer"):
        specs.append((f"head_{head}_conv0", cin, HEAD_CHANNELS, True))
        specs.append((f"head_{head}_conv1", HEAD_CHANNELS, HEAD_CHANNELS, True))
    specs.append(("out_fg", HEAD_CHANNELS, 1, False))
    specs.append(("out_layer", HEAD_CHANNELS, config.num_layers, False))
    return specs


def parameter_count(config):
    """Closed-form number of trainable scalars."""
    total = 0
    for _, cin, cout, normed in _conv_specs(config):
        total += 9 * cin * cout + cout          # kernel + bias
        if normed:
            total += 2 * cout                   # norm scale + shift
    return total


def init_params(config, seed, dtype=np.float32):
    """He-style initialization: kernels ~ N(0, 2/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    for name, cin, cout, normed in _conv_specs(config):
        fan_in = 9 * cin
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(3, 3, cin, cout))
        params.add(f"{name}_w", parameter(w, dtype=dtype))
        params.add(f"{name}_b", parameter(np.zeros(cout), dtype=dtype))
        if normed:
            params.add(f"{name}_scale", parameter(np.ones(cout), dtype=dtype))
            params.add(f"{name}_shift", parameter(np.zeros(cout), dtype=dtype))
    return params


def _block(x, params, name):
    """conv 3x3 -> leaky ReLU -> per-channel normalization."""
    x = x.conv2d(params[f"{name}_w"], params[f"{name}_b"]).leaky_relu(LEAKY_ALPHA)
    return x.channel_norm(params[f"{name}_scale"], params[f"{name}_shift"], eps=NORM_EPS)


def forward_batch(images, params, config):
    """Run the network on a batch.

    images: Tensor (B, H, W, input_channels), H and W divisible by 2^depth.
    Returns (foreground, layering) Tensors of shapes (B, H, W, 1) and
    (B, H, W, N), both sigmoid-activated.
    """
    B, H, W, C = images.shape
    div = 2 ** config.depth
    if H % div or W % div:
        raise ShapeError(
            f"input {H}x{W} must be divisible by {div} for depth {config.depth}")
    if C != config.input_channels:
        raise ShapeError(f"expected {config.input_channels} input channels, got {C}")

    x = images
    skips = []
    for lvl in range(config.depth):
        x = _block(x, params, f"enc{lvl}_conv0")
        x = _block(x, params, f"enc{lvl}_conv1")
        skips.append(x)
        x = x.maxpool2()
    x = _block(x, params, "bottleneck_conv0")
    x = _block(x, params, "bottleneck_conv1")
    for lvl in reversed(range(config.depth)):
        x = _block(x.upsample2(), params, f"dec{lvl}_up")
        x = concat([skips[lvl], x], axis=-1)
        x = _block(x, params, f"dec{lvl}_conv0")
        x = _block(x, params, f"dec{lvl}_conv1")

    fg = _block(x, params, "head_fg_conv0")
    fg = _block(fg, params, "head_fg_conv1")
    fg = fg.conv2d(params["out_fg_w"], params["out_fg_b"]).sigmoid()

    lay = _block(x, params, "head_layer_conv0")
    lay = _block(lay, params, "head_layer_conv1")
    lay = lay.conv2d(params["out_layer_w"], params["out_layer_b"]).sigmoid()
    return fg, lay


def forward(image, params, config):
    """Single-image inference; returns a Prediction of numpy arrays."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    x = Tensor(img[None])
    fg, lay = forward_batch(x, params, config)
    return Prediction(foreground=fg.data[0, :, :, 0], layering=lay.data[0])


# -- checkpoint format ---------------------------------------------------
# "LSEG" | version u32 | config-json length u32 | config json |
# param count u32 | per parameter (sorted by name):
#   name length u32 | name bytes | rank u32 | dims u32... | float32 LE data

def save_checkpoint(path, config, params):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = json.dumps(asdict(config), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    names = params.names()
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        data = np.ascontiguousarray(params[name].data, dtype="<f4")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (config, params); bit-exact inverse of save_checkpoint."""
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a layerseg checkpoint")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", buf.read(4))
    config = NetworkConfig(**json.loads(buf.read(clen).decode()))
    (count,) = struct.unpack("<I", buf.read(4))
    params = ParameterSet()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", buf.read(4))
        name = buf.read(nlen).decode()
        (rank,) = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{rank}I", buf.read(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(buf.read(4 * n), dtype="<f4").reshape(shape).copy()
        params.add(name, parameter(data))
    return config, params
