"""Images, cubic degradation, the shifted residual codec and dataset building.

Images are ``uint8`` numpy arrays of shape (height, width, 3).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, FormatError, ShapeError
from .tensor import make_rng

NO_CHANGE = 127
PNG_COMPRESS_LEVEL = 6
CUBIC_A = -0.5


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def as_image(image, name="image"):
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"{name} must be a uint8 (h, w, 3) array, got {arr.dtype} {arr.shape}")
    return arr


# -- PNG I/O ----------------------------------------------------------------------


def read_png(path):
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                im = im.convert("RGB")
            return np.array(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_png(path, image):
    """8-bit RGB PNG with fixed compression settings (byte-reproducible)."""
    image = as_image(image)
    try:
        Image.fromarray(image, mode="RGB").save(path, format="PNG", compress_level=PNG_COMPRESS_LEVEL)
    except OSError as exc:
        raise DataError(f"cannot write image {path}: {exc}") from exc


# -- cubic resampling -----------------------------------------------------------------


def cubic_kernel(x, a=CUBIC_A):
    """Keys cubic convolution kernel; a = -0.5 gives Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _resample_matrix(n_in, n_out):
    """(n_out, n_in) matrix of cubic weights with pixel-centre alignment and edge clamping."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for tap in (-1, 0, 1, 2):
        w = cubic_kernel(frac - tap)
        idx = np.clip(base + tap, 0, n_in - 1)
        np.add.at(mat, (rows, idx), w)
    return mat


def bicubic_resample(image, out_w, out_h):
    """Separable Catmull-Rom resize of an RGB image to ``out_w`` x ``out_h``."""
    image = as_image(image)
    if out_w < 1 or out_h < 1:
        raise ConfigError(f"target size must be at least 1x1, got {out_w}x{out_h}")
    h, w, c = image.shape
    my = _resample_matrix(h, out_h)
    mx = _resample_matrix(w, out_w)
    cols = (my @ image.astype(np.float64).reshape(h, w * c)).reshape(out_h, w, c)
    out = (mx @ cols.transpose(1, 0, 2).reshape(w, out_h * c)).reshape(out_w, out_h, c)
    return np.clip(round_half_away(out.transpose(1, 0, 2)), 0, 255).astype(np.uint8)


def resample_1d(values, n_out):
    """Cubic resampling of a 1-D float signal, without rounding."""
    values = np.asarray(values, dtype=np.float64)
    return _resample_matrix(values.size, n_out) @ values


def degrade(image, factor=2):
    """Cubic downsample by ``factor`` and back up to the original size."""
    image = as_image(image)
    if int(factor) != factor or factor < 2:
        raise ConfigError(f"degradation factor must be an integer >= 2, got {factor}")
    h, w, _ = image.shape
    if h % factor or w % factor:
        raise ConfigError(f"image size {w}x{h} is not divisible by factor {factor}")
    small = bicubic_resample(image, w // factor, h // factor)
    return bicubic_resample(small, w, h)


# -- residual codec -----------------------------------------------------------------


def encode_residual(hr, lr):
    """clamp(hr - lr + 127, 0, 255) per channel."""
    hr, lr = as_image(hr, "hr"), as_image(lr, "lr")
    if hr.shape != lr.shape:
        raise ShapeError(f"hr shape {hr.shape} does not match lr shape {lr.shape}")
    diff = hr.astype(np.int16) - lr.astype(np.int16) + NO_CHANGE
    return np.clip(diff, 0, 255).astype(np.uint8)


def decode_residual(lr, residual):
    """clamp(lr + residual - 127, 0, 255) per channel."""
    lr, residual = as_image(lr, "lr"), as_image(residual, "residual")
    if lr.shape != residual.shape:
        raise ShapeError(f"lr shape {lr.shape} does not match residual shape {residual.shape}")
    out = lr.astype(np.int16) + residual.astype(np.int16) - NO_CHANGE
    return np.clip(out, 0, 255).astype(np.uint8)


def normalize(images):
    """uint8 image(s) to a float32 (n, h, w, 3) tensor in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return arr.astype(np.float32) / np.float32(255)


def denormalize(tensor):
    """Inverse of :func:`normalize`: scale by 255, round half away from zero, clamp."""
    t = np.asarray(tensor)
    return np.clip(round_half_away(t * np.float32(255)), 0, 255).astype(np.uint8)


# -- augmentation and splitting -------------------------------------------------------


def augment(sources, count, patch=512, rng=None):
    """``count`` random square crops with independent horizontal/vertical flips.

    Each patch draws, in order: source index, top row, left column, a
    horizontal-flip coin and a vertical-flip coin.
    """
    if rng is None:
        rng = make_rng(0)
    sources = [as_image(s, f"source {i}") for i, s in enumerate(sources)]
    if not sources:
        raise ConfigError("augmentation needs at least one source image")
    for i, s in enumerate(sources):
        if s.shape[0] < patch or s.shape[1] < patch:
            raise ConfigError(f"source {i} ({s.shape[1]}x{s.shape[0]}) is smaller than patch size {patch}")
    patches = []
    for _ in range(count):
        src = sources[int(rng.integers(len(sources)))]
        y = int(rng.integers(src.shape[0] - patch + 1))
        x = int(rng.integers(src.shape[1] - patch + 1))
        flip_h = rng.random() < 0.5
        flip_v = rng.random() < 0.5
        p = src[y:y + patch, x:x + patch]
        if flip_h:
            p = p[:, ::-1]
        if flip_v:
            p = p[::-1]
        patches.append(np.ascontiguousarray(p))
    return patches


def split(samples, n_train, n_test, rng):
    """Seeded shuffle, then the first ``n_train`` go to train and the next ``n_test`` to test."""
    if n_train < 0 or n_test < 0:
        raise ConfigError("split sizes must be non-negative")
    if n_train + n_test > len(samples):
        raise ConfigError(f"cannot split {len(samples)} samples into {n_train} train + {n_test} test")
    order = rng.permutation(len(samples))
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:n_train + n_test]]
    return train, test


# -- synthetic histology-like textures ---------------------------------------------------


def _smooth_field(rng, h, w, cell):
    """Random field with features about ``cell`` pixels wide, roughly unit variance."""
    gh, gw = max(2, h // cell + 2), max(2, w // cell + 2)
    grid = rng.standard_normal((gh, gw))
    my = _resample_matrix(gh, h)
    mx = _resample_matrix(gw, w)
    return my @ grid @ mx.T


def synth_image(width, height, rng):
    h, w = height, width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # eosin-pink stroma with slow density variation
    density = _smooth_field(rng, h, w, 48)
    img = np.empty((h, w, 3))
    img[..., 0] = 225 + 12 * density
    img[..., 1] = 170 + 18 * density
    img[..., 2] = 200 + 10 * density

    area = h * w
    n_cells = max(1, int(area / 900 * rng.uniform(0.8, 1.2)))
    for _ in range(n_cells):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(4, 14), rng.uniform(4, 14)
        theta = rng.uniform(0, np.pi)
        r = int(np.ceil(max(ry, rx))) + 2
        y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
        x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        dy, dx = yy[y0:y1, x0:x1] - cy, xx[y0:y1, x0:x1] - cx
        c, s = np.cos(theta), np.sin(theta)
        u, v = c * dx + s * dy, -s * dx + c * dy
        rho = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
        patch = img[y0:y1, x0:x1]

        cyto = np.array([205, 130, 175]) + rng.normal(0, 8, 3)
        membrane = np.array([150, 70, 140]) + rng.normal(0, 8, 3)
        nucleus = np.array([85, 45, 120]) + rng.normal(0, 8, 3)
        patch[rho < 1.0] = cyto
        patch[(rho >= 0.82) & (rho < 1.0)] = membrane
        if rng.random() < 0.8:
            nr = rng.uniform(0.3, 0.5)
            ox, oy = rng.uniform(-0.2, 0.2, 2)
            rn = np.sqrt(((u / rx) - ox) ** 2 + ((v / ry) - oy) ** 2)
            patch[rn < nr] = nucleus

    # band-limited grain: fine minus coarse field
    grain = _smooth_field(rng, h, w, 3) - _smooth_field(rng, h, w, 12)
    img += 9 * grain[..., None]
    img += rng.normal(0, 3, img.shape)
    return np.clip(round_half_away(img), 0, 255).astype(np.uint8)


def synth_generate(n, width, height, seed):
    """``n`` procedural H&E-like images; image ``i`` depends only on (seed, i)."""
    if n < 1:
        raise ConfigError(f"need at least one image, got n={n}")
    if width < 1 or height < 1:
        raise ConfigError(f"invalid image size {width}x{height}")
    return [synth_image(width, height, make_rng(seed, 2, i)) for i in range(n)]


# -- datasets on disk ---------------------------------------------------------------------


@dataclass
class Sample:
    lr: str
    hr: str
    residual: str
    split: str


@dataclass
class DatasetManifest:
    degrade_factor: int
    patch: int
    seed: int
    samples: list = field(default_factory=list)
    root: str = "."

    def split_samples(self, name):
        return [s for s in self.samples if s.split == name]

    def to_dict(self):
        return {
            "degrade_factor": self.degrade_factor,
            "patch": self.patch,
            "seed": self.seed,
            "samples": [
                {"lr": s.lr, "hr": s.hr, "residual": s.residual, "split": s.split} for s in self.samples
            ],
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as f:
                d = json.load(f)
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        except ValueError as exc:
            raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
        try:
            samples = [Sample(s["lr"], s["hr"], s["residual"], s["split"]) for s in d["samples"]]
            return cls(int(d["degrade_factor"]), int(d["patch"]), int(d["seed"]), samples,
                       root=os.path.dirname(os.path.abspath(path)))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"manifest {path} is missing field {exc}") from exc

    def path(self, rel):
        return os.path.join(self.root, rel)


@dataclass
class PairedArrays:
    """A split loaded into memory as stacked uint8 arrays of shape (n, h, w, 3)."""

    lr: np.ndarray
    hr: np.ndarray
    residual: np.ndarray

    def __len__(self):
        return len(self.lr)


def make_pairs(patches, factor):
    """Degrade each HR patch and encode its residual."""
    lr = [degrade(p, factor) for p in patches]
    res = [encode_residual(h, l) for h, l in zip(patches, lr)]
    return PairedArrays(np.stack(lr), np.stack(patches), np.stack(res))


def load_split(manifest, name):
    samples = manifest.split_samples(name)
    if not samples:
        raise ConfigError(f"manifest has no samples in split {name!r}")
    lr = np.stack([read_png(manifest.path(s.lr)) for s in samples])
    hr = np.stack([read_png(manifest.path(s.hr)) for s in samples])
    res = np.stack([read_png(manifest.path(s.residual)) for s in samples])
    if not (lr.shape == hr.shape == res.shape):
        raise DataError(f"split {name!r}: lr/hr/residual shapes differ")
    return PairedArrays(lr, hr, res)


def build_dataset(sources, out_dir, count, patch, factor, n_train, n_test, seed):
    """Augment, degrade, encode and split; write PNG triplets and ``manifest.json``.

    Only the samples selected into train or test are written.  The result is
    re-read from disk and audited before returning the manifest path.
    """
    if n_train + n_test > count:
        raise ConfigError(f"count {count} is smaller than train + test = {n_train + n_test}")
    if patch % factor:
        raise ConfigError(f"patch size {patch} is not divisible by factor {factor}")
    patches = augment(sources, count, patch, make_rng(seed, 3))
    train, test = split(list(range(count)), n_train, n_test, make_rng(seed, 4))
    tags = {i: "train" for i in train}
    tags.update({i: "test" for i in test})

    for sub in ("lr", "hr", "residual"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    manifest = DatasetManifest(factor, patch, seed, root=os.path.abspath(out_dir))
    for i in sorted(tags):
        hr = patches[i]
        lr = degrade(hr, factor)
        res = encode_residual(hr, lr)
        name = f"{i:05d}.png"
        for sub, img in (("lr", lr), ("hr", hr), ("residual", res)):
            write_png(os.path.join(out_dir, sub, name), img)
        manifest.samples.append(Sample(f"lr/{name}", f"hr/{name}", f"residual/{name}", tags[i]))
    path = os.path.join(out_dir, "manifest.json")
    manifest.save(path)
    audit_dataset(path, n_train, n_test)
    return path


def audit_dataset(manifest_path, n_train=None, n_test=None):
    """Re-read a dataset and check residual consistency, sizes and split disjointness."""
    m = DatasetManifest.load(manifest_path)
    seen = set()
    counts = {"train": 0, "test": 0}
    for s in m.samples:
        if s.split not in counts:
            raise DataError(f"sample {s.hr}: unknown split {s.split!r}")
        if s.hr in seen:
            raise DataError(f"sample {s.hr} appears more than once")
        seen.add(s.hr)
        counts[s.split] += 1
        lr, hr, res = (read_png(m.path(p)) for p in (s.lr, s.hr, s.residual))
        if not (lr.shape == hr.shape == res.shape == (m.patch, m.patch, 3)):
            raise DataError(f"sample {s.hr}: unexpected image shapes")
        if not np.array_equal(res, encode_residual(hr, lr)):
            raise DataError(f"sample {s.hr}: residual does not match encode_residual(hr, lr)")
    if n_train is not None and counts["train"] != n_train:
        raise DataError(f"train split has {counts['train']} samples, expected {n_train}")
    if n_test is not None and counts["test"] != n_test:
        raise DataError(f"test split has {counts['test']} samples, expected {n_test}")
    return counts
