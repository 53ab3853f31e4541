"""Forward and backward passes for the layer set used by the U-Net.

Tensors are plain numpy arrays in NHWC layout, float32 for training and
inference.  Every op preserves the floating dtype of its inputs, so the
gradient checker can drive the same code in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError

BCE_EPSILON = 1e-7
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-7


def make_rng(seed, *stream):
    """Seeded PCG64 generator; ``stream`` selects an independent sub-stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *stream])))


def _check_rank4(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, h, w, c), got shape {x.shape}")


@dataclass
class ConvKernel:
    """Convolution weights of shape (kh, kw, c_in, c_out) plus a bias of length c_out."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"kernel weights must be (kh, kw, c_in, c_out), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[3],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match kernel output channels {self.weights.shape[3]}"
            )

    @property
    def shape(self):
        return self.weights.shape

    def copy(self):
        return ConvKernel(self.weights.copy(), self.bias.copy())


# -- convolution -------------------------------------------------------------


def _same_padding(k):
    # extra row/column goes after, as in TF/Keras "same"
    before = (k - 1) // 2
    return before, k - 1 - before


def _im2col(x, kh, kw):
    n, h, w, c = x.shape
    (pt, pb), (pl, pr) = _same_padding(kh), _same_padding(kw)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    if kh == 1 and kw == 1:
        return xp
    cols = np.empty((n, h, w, kh, kw, c), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, :, :, dy, dx, :] = xp[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(n, h, w, kh * kw * c)


def conv2d_forward(x, kernel):
    """Stride-1 convolution with zero "same" padding.

    ``out[n, y, x, o] = bias[o] + sum(window * weights[..., o])`` where the
    window is centred on (y, x); for even kernel sizes the extra tap lies
    below/right of the centre.
    """
    _check_rank4(x)
    kh, kw, c_in, c_out = kernel.shape
    if x.shape[3] != c_in:
        raise ShapeError(f"input shape {x.shape} does not match kernel shape {kernel.shape}")
    n, h, w, _ = x.shape
    cols = _im2col(x, kh, kw)
    out = cols.reshape(-1, kh * kw * c_in) @ kernel.weights.reshape(kh * kw * c_in, c_out)
    out += kernel.bias
    return out.reshape(n, h, w, c_out)


def conv2d_backward(x, kernel, d_out):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias."""
    _check_rank4(x)
    kh, kw, c_in, c_out = kernel.shape
    n, h, w, c = x.shape
    if c != c_in or d_out.shape != (n, h, w, c_out):
        raise ShapeError(
            f"inconsistent shapes: input {x.shape}, kernel {kernel.shape}, d_output {d_out.shape}"
        )
    g2 = d_out.reshape(-1, c_out)
    cols = _im2col(x, kh, kw).reshape(-1, kh * kw * c_in)
    d_weights = (cols.T @ g2).reshape(kernel.shape)
    d_bias = g2.sum(axis=0)

    d_cols = (g2 @ kernel.weights.reshape(-1, c_out).T).reshape(n, h, w, kh, kw, c_in)
    (pt, pb), (pl, pr) = _same_padding(kh), _same_padding(kw)
    d_xp = np.zeros((n, h + pt + pb, w + pl + pr, c_in), dtype=d_cols.dtype)
    for dy in range(kh):
        for dx in range(kw):
            d_xp[:, dy:dy + h, dx:dx + w, :] += d_cols[:, :, :, dy, dx, :]
    d_x = d_xp[:, pt:pt + h, pl:pl + w, :]
    return np.ascontiguousarray(d_x), d_weights, d_bias


# -- pooling / upsampling / concat -----------------------------------------------


def maxpool2x2_forward(x):
    """2x2 max-pooling, stride 2.

    Returns the pooled tensor and the winning position of each window
    (0..3 in row-major order; the first maximum wins ties).
    """
    _check_rank4(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pooling needs even spatial dimensions, got {x.shape}")
    windows = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.uint8)


def maxpool2x2_backward(argmax, d_out):
    if argmax.shape != d_out.shape:
        raise ShapeError(f"argmax shape {argmax.shape} does not match d_output {d_out.shape}")
    n, h2, w2, c = d_out.shape
    d_windows = np.zeros((n, h2, w2, c, 4), dtype=d_out.dtype)
    np.put_along_axis(d_windows, argmax[..., None].astype(np.intp), d_out[..., None], axis=-1)
    d_x = d_windows.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return d_x.reshape(n, 2 * h2, 2 * w2, c)


def upsample2x2_forward(x):
    """Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block."""
    _check_rank4(x)
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2x2_backward(d_out):
    n, h, w, c = d_out.shape
    if h % 2 or w % 2:
        raise ShapeError(f"upsample gradient must have even spatial dimensions, got {d_out.shape}")
    return d_out.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def concat_channels(a, b):
    """Concatenate along channels, ``a`` first."""
    _check_rank4(a, "a")
    _check_rank4(b, "b")
    if a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: (n, h, w) differ")
    return np.concatenate([a, b], axis=3)


def split_channels(d_out, c_a):
    """Backward of :func:`concat_channels`: split a cotangent at channel ``c_a``."""
    return d_out[..., :c_a], d_out[..., c_a:]


# -- activations and loss ----------------------------------------------------------


def elu(x):
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0)))


def elu_backward(x, d_out):
    """ELU (alpha = 1) gradient given the pre-activation ``x``."""
    return d_out * np.where(x >= 0, 1, np.exp(np.minimum(x, 0))).astype(d_out.dtype)


def sigmoid(x):
    """Logistic function, saturating strictly inside (0, 1)."""
    x = np.asarray(x)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + z), z / (1 + z))
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1 - info.epsneg)


def sigmoid_backward(y, d_out):
    """Sigmoid gradient given the forward output ``y``."""
    return d_out * y * (1 - y)


def bce_loss(pred, target):
    """Mean binary cross-entropy and its gradient w.r.t. ``pred``.

    Predictions are clamped to [1e-7, 1 - 1e-7].  The loss is accumulated in
    float64; the gradient keeps the dtype of ``pred``.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    p = np.clip(pred, BCE_EPSILON, 1 - BCE_EPSILON)
    t = target.astype(p.dtype, copy=False)
    p64, t64 = p.astype(np.float64), t.astype(np.float64)
    loss = -np.mean(t64 * np.log(p64) + (1 - t64) * np.log1p(-p64))
    grad = (p - t) / (p * (1 - p)) / p.size
    return float(loss), grad.astype(pred.dtype, copy=False)


# -- initialisation and optimisation --------------------------------------------


def he_normal_init(shape, rng, dtype=np.float32):
    """He-normal kernel: N(0, 2 / fan_in) weights with fan_in = kh*kw*c_in, zero bias."""
    kh, kw, c_in, c_out = shape
    fan_in = kh * kw * c_in
    if fan_in <= 0:
        raise ConfigError(f"kernel shape {tuple(shape)} has zero fan-in")
    std = math.sqrt(2.0 / fan_in)
    weights = (rng.standard_normal(size=tuple(shape)) * std).astype(dtype)
    return ConvKernel(weights, np.zeros(c_out, dtype=dtype))


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter array."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPSILON):
    """One in-place Adam update with bias correction; increments ``state.t``.

    Returns ``params`` for convenience.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("params, grads and Adam moments must have the same length")
    state.t += 1
    t = state.t
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeError(f"Adam shape mismatch: param {p.shape}, grad {g.shape}, moments {m.shape}/{v.shape}")
        m[...] = beta1 * m + (1 - beta1) * g
        v[...] = beta2 * v + (1 - beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


# -- verification harness --------------------------------------------------------


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numerical_gradient(objective, array, step=1e-3):
    """Central finite differences of a scalar ``objective()`` w.r.t. ``array``.

    ``array`` is perturbed in place and restored after every coordinate.
    """
    grad = np.zeros(array.shape, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = objective()
        flat[i] = orig - step
        f_minus = objective()
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            coord = np.unravel_index(i, array.shape)
            raise NumericalError(f"non-finite objective while perturbing coordinate {coord}")
        gflat[i] = (f_plus - f_minus) / (2 * step)
    return grad


def gradient_check(forward, backward, inputs, rng, step=1e-3, floor=1e-8):
    """Worst relative error between analytic and finite-difference gradients.

    ``forward(*inputs)`` returns an array (or a scalar loss); ``backward(inputs,
    d_output)`` returns one gradient per input.  Array outputs are reduced to
    the scalar ``sum(g * forward(...))`` with a random cotangent ``g``, scalar
    outputs are checked directly (``d_output`` is then 1.0).  All arithmetic is
    float64.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out = forward(*inputs)
    if np.ndim(out) == 0:
        cot = 1.0

        def objective():
            return float(forward(*inputs))
    else:
        cot = rng.standard_normal(np.shape(out))

        def objective():
            return float(np.sum(cot * forward(*inputs)))

    analytic = backward(inputs, cot)
    worst = 0.0
    for arr, grad in zip(inputs, analytic):
        if not np.all(np.isfinite(grad)):
            bad = np.unravel_index(int(np.argmin(np.isfinite(grad))), arr.shape)
            raise NumericalError(f"non-finite analytic gradient at coordinate {bad}")
        numeric = numerical_gradient(objective, arr, step)
        if arr.size:
            worst = max(worst, float(relative_error(grad, numeric, floor).max()))
    return worst
