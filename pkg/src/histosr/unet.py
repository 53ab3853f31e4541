"""U-Net mapping a low-resolution RGB image to its shifted residual image.

Layout per level: two 3x3 conv+ELU, then 2x2 max-pooling on the way down;
on the way up a nearest 2x upsample followed by a 2x2 conv that halves the
channels, concatenation with the matching encoder activation, and two 3x3
conv+ELU.  A 1x1 conv and a sigmoid produce the 3-channel output.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError

WEIGHTS_MAGIC = b"PSRW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 4
    base_channels: int = 16
    convs_per_block: int = 2
    kernel_size: int = 3
    upsample: str = "nearest+conv2x2"
    skip: str = "concat"
    in_channels: int = 3
    out_channels: int = 3
    input_size: tuple = (512, 512)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.levels < 0 or self.base_channels < 1 or self.convs_per_block < 1:
            raise ConfigError(f"invalid U-Net config: {self}")
        if self.kernel_size < 1:
            raise ConfigError(f"kernel size must be positive, got {self.kernel_size}")
        if self.upsample != "nearest+conv2x2":
            raise ConfigError(f"unsupported upsample mode {self.upsample!r}")
        if self.skip != "concat":
            raise ConfigError(f"unsupported skip mode {self.skip!r}")
        self.check_size(*self.input_size)

    @property
    def bottleneck_channels(self):
        return self.base_channels * 2 ** self.levels

    def channels(self, level):
        return self.base_channels * 2 ** level

    def check_size(self, h, w):
        div = 2 ** self.levels
        if h < 1 or w < 1 or h % div or w % div:
            raise ConfigError(f"image size {h}x{w} must be positive and divisible by 2^levels = {div}")

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def layer_shapes(config):
    """Ordered ``(name, kernel_shape)`` for every layer of ``config``.

    Order: encoder blocks top-down, bottleneck, decoder blocks bottom-up, final.
    """
    k = config.kernel_size
    shapes = []

    def block(prefix, c_in, c_out):
        for i in range(config.convs_per_block):
            shapes.append((f"{prefix}_conv{i + 1}", (k, k, c_in if i == 0 else c_out, c_out)))

    c_in = config.in_channels
    for level in range(config.levels):
        block(f"enc{level}", c_in, config.channels(level))
        c_in = config.channels(level)
    block("bottleneck", c_in, config.bottleneck_channels)
    for level in reversed(range(config.levels)):
        c = config.channels(level)
        shapes.append((f"dec{level}_up", (2, 2, 2 * c, c)))
        block(f"dec{level}", 2 * c, c)
    shapes.append(("final", (1, 1, config.base_channels, config.out_channels)))
    return shapes


@dataclass
class ModelWeights:
    config: UNetConfig
    layers: dict  # name -> ConvKernel, in traversal order

    def __post_init__(self):
        expected = layer_shapes(self.config)
        if [n for n, _ in expected] != list(self.layers):
            raise ShapeError(f"layer names {list(self.layers)} do not match config {self.config}")
        for name, shape in expected:
            if self.layers[name].shape != shape:
                raise ShapeError(f"layer {name}: shape {self.layers[name].shape} expected {shape}")

    def params(self):
        """Flat parameter list: kernel then bias for each layer, in order."""
        out = []
        for kernel in self.layers.values():
            out += [kernel.weights, kernel.bias]
        return out

    def copy(self):
        return ModelWeights(self.config, {n: k.copy() for n, k in self.layers.items()})

    def astype(self, dtype):
        return ModelWeights(
            self.config,
            {n: T.ConvKernel(k.weights.astype(dtype), k.bias.astype(dtype)) for n, k in self.layers.items()},
        )

    def parameter_count(self):
        return sum(p.size for p in self.params())


def build(config, seed=0):
    """He-normal initialised weights, drawn in traversal order from ``seed``."""
    rng = T.make_rng(seed, 1)
    return ModelWeights(config, {name: T.he_normal_init(shape, rng) for name, shape in layer_shapes(config)})


def parameter_count(config):
    return sum(kh * kw * ci * co + co for _, (kh, kw, ci, co) in layer_shapes(config))


# -- forward / backward -----------------------------------------------------------


def _conv_elu(x, kernel, cache, name):
    z = T.conv2d_forward(x, kernel)
    cache[name] = (x, z)
    return T.elu(z)


def forward(weights, x):
    """Run the network on an (n, h, w, 3) tensor in [0, 1].

    Returns the (n, h, w, 3) sigmoid output and a cache for :func:`backward`.
    """
    cfg = weights.config
    L = weights.layers
    if x.ndim != 4 or x.shape[3] != cfg.in_channels:
        raise ShapeError(f"layer enc0_conv1: input must be (n, h, w, {cfg.in_channels}), got {x.shape}")
    cfg.check_size(x.shape[1], x.shape[2])
    cache = {"_input_shape": x.shape, "_config": cfg}
    skips = []
    h = x
    for level in range(cfg.levels):
        for i in range(cfg.convs_per_block):
            h = _conv_elu(h, L[f"enc{level}_conv{i + 1}"], cache, f"enc{level}_conv{i + 1}")
        skips.append(h)
        h, idx = T.maxpool2x2_forward(h)
        cache[f"enc{level}_pool"] = idx
    for i in range(cfg.convs_per_block):
        h = _conv_elu(h, L[f"bottleneck_conv{i + 1}"], cache, f"bottleneck_conv{i + 1}")
    for level in reversed(range(cfg.levels)):
        up = T.upsample2x2_forward(h)
        cache[f"dec{level}_up"] = (up, None)
        h = T.conv2d_forward(up, L[f"dec{level}_up"])
        h = T.concat_channels(h, skips[level])
        for i in range(cfg.convs_per_block):
            h = _conv_elu(h, L[f"dec{level}_conv{i + 1}"], cache, f"dec{level}_conv{i + 1}")
    cache["final"] = (h, None)
    y = T.sigmoid(T.conv2d_forward(h, L["final"]))
    cache["_output"] = y
    return y, cache


def backward(weights, cache, d_out):
    """Gradients for every layer, as ``{name: (d_weights, d_bias)}`` in layer order."""
    cfg = weights.config
    L = weights.layers
    if cache.get("_config") != cfg:
        raise ShapeError("cache was produced by a model with a different config")
    y = cache["_output"]
    if d_out.shape != y.shape:
        raise ShapeError(f"d_output shape {d_out.shape} does not match forward output {y.shape}")
    grads = {}

    def conv_back(name, g, activated=True):
        x, z = cache[name]
        if activated:
            g = T.elu_backward(z, g)
        dx, dw, db = T.conv2d_backward(x, L[name], g)
        grads[name] = (dw, db)
        return dx

    g = T.sigmoid_backward(y, d_out)
    g = conv_back("final", g, activated=False)
    d_skips = {}
    for level in range(cfg.levels):
        for i in reversed(range(cfg.convs_per_block)):
            g = conv_back(f"dec{level}_conv{i + 1}", g)
        g, d_skips[level] = T.split_channels(g, cfg.channels(level))
        g = conv_back(f"dec{level}_up", g, activated=False)
        g = T.upsample2x2_backward(g)
    for i in reversed(range(cfg.convs_per_block)):
        g = conv_back(f"bottleneck_conv{i + 1}", g)
    for level in reversed(range(cfg.levels)):
        g = T.maxpool2x2_backward(cache[f"enc{level}_pool"], g)
        g = g + d_skips[level]
        for i in reversed(range(cfg.convs_per_block)):
            g = conv_back(f"enc{level}_conv{i + 1}", g)
    return {name: grads[name] for name in L}


def flat_grads(grads):
    out = []
    for dw, db in grads.values():
        out += [dw, db]
    return out


def predict_residual(weights, lr_image):
    """Predicted residual image (uint8, 127 = no change) for one uint8 RGB image."""
    from .data import denormalize, normalize

    if lr_image.ndim != 3 or lr_image.shape[2] != 3:
        raise ConfigError(f"expected an (h, w, 3) image, got shape {lr_image.shape}")
    weights.config.check_size(*lr_image.shape[:2])
    y, _ = forward(weights, normalize(lr_image))
    return denormalize(y)[0]


# -- serialisation ------------------------------------------------------------------


def _manifest(config):
    entries = []
    for name, shape in layer_shapes(config):
        entries.append({"name": f"{name}.kernel", "shape": list(shape)})
        entries.append({"name": f"{name}.bias", "shape": [shape[3]]})
    return entries


def save_weights(weights, path):
    """Write the PSRW container: magic, u32 version, u32 header length, JSON header, raw f32 LE."""
    header = {"config": weights.config.to_dict(), "tensors": _manifest(weights.config)}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(blob)))
        f.write(blob)
        for p in weights.params():
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_weights(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12:
        raise FormatError(f"{path}: file too short for a weights header", len(data))
    if data[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {WEIGHTS_MAGIC!r}", 0)
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported weights version {version}", 4)
    if 12 + hlen > len(data):
        raise FormatError(f"{path}: header length {hlen} runs past end of file", 8)
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        config = UNetConfig.from_dict(header["config"])
        tensors = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: invalid header: {exc}", 12) from exc

    expected = _manifest(config)
    if len(tensors) != len(expected):
        raise FormatError(f"{path}: header lists {len(tensors)} tensors, config needs {len(expected)}", 12)
    for got, want in zip(tensors, expected):
        if got.get("name") != want["name"]:
            raise FormatError(f"{path}: tensor {got.get('name')!r} found where {want['name']!r} expected", 12)
        if list(got.get("shape", [])) != want["shape"]:
            layer = want["name"].split(".")[0]
            raise ShapeError(
                f"{path}: layer {layer}: {want['name']} has shape {got.get('shape')}, "
                f"config requires {want['shape']}"
            )

    offset = 12 + hlen
    total = offset + 4 * sum(int(np.prod(e["shape"])) for e in expected)
    if len(data) != total:
        raise FormatError(f"{path}: expected {total} bytes, file has {len(data)}", min(len(data), total))
    arrays = []
    for e in expected:
        count = int(np.prod(e["shape"]))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(e["shape"])
        arrays.append(arr.astype(np.float32))
        offset += 4 * count
    layers = {}
    for (name, _), w, b in zip(layer_shapes(config), arrays[0::2], arrays[1::2]):
        layers[name] = T.ConvKernel(w, b)
    return ModelWeights(config, layers)


# -- gradient verification ----------------------------------------------------------


@dataclass
class GradCheckReport:
    worst: float
    checked: int
    excluded: int
    per_layer: dict
    coverage: dict = None  # layer name -> (checked, total) coordinates

    @property
    def excluded_fraction(self):
        return self.excluded / max(1, self.checked + self.excluded)


def _kink_pattern(cache, config):
    signs = [np.signbit(v[1]) for v in cache.values() if isinstance(v, tuple) and v[1] is not None]
    pools = [cache[f"enc{i}_pool"] for i in range(config.levels)]
    return signs + pools


def gradient_check_model(weights, x, target, step=1e-3, scale_floor=1e-3):
    """Compare backprop gradients of the BCE loss with central differences, in float64.

    A coordinate is excluded when its +/- step stencil moves any ELU
    pre-activation across zero or changes any max-pool winner, since the
    difference quotient is then not a derivative estimate.  Relative error
    uses ``max(|a|, |n|, scale_floor * max|a over the tensor|)`` as the
    denominator so that near-zero gradients are judged on their tensor's scale.
    """
    w = weights.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    y, cache = forward(w, x)
    _, d_out = T.bce_loss(y, target)
    grads = backward(w, cache, d_out)
    base = _kink_pattern(cache, w.config)

    worst, checked, excluded = 0.0, 0, 0
    per_layer, coverage = {}, {}
    for name, kernel in w.layers.items():
        layer_worst, layer_checked = 0.0, 0
        for arr, analytic in ((kernel.weights, grads[name][0]), (kernel.bias, grads[name][1])):
            flat, aflat = arr.reshape(-1), analytic.reshape(-1)
            floor = scale_floor * float(np.abs(analytic).max()) if analytic.size else 0.0
            for i in range(flat.size):
                orig = flat[i]
                losses, crossed = [], False
                for h in (step, -step):
                    flat[i] = orig + h
                    yy, cc = forward(w, x)
                    losses.append(T.bce_loss(yy, target)[0])
                    pattern = _kink_pattern(cc, w.config)
                    crossed |= any(not np.array_equal(a, b) for a, b in zip(pattern, base))
                flat[i] = orig
                if crossed:
                    excluded += 1
                    continue
                numeric = (losses[0] - losses[1]) / (2 * step)
                err = float(T.relative_error(aflat[i], numeric, max(floor, 1e-300)))
                layer_worst = max(layer_worst, err)
                layer_checked += 1
        checked += layer_checked
        per_layer[name] = layer_worst
        coverage[name] = (layer_checked, kernel.weights.size + kernel.bias.size)
        worst = max(worst, layer_worst)
    return GradCheckReport(worst, checked, excluded, per_layer, coverage)
