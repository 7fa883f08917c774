"""Differentiable layer catalogue with a minimal reverse-mode tape.

Arrays are plain numpy arrays laid out time-major: a sequence of ``T`` frames
with ``C`` channels has shape ``(T, C)``; any leading axes are batch axes.
All arithmetic is carried out in float64 whatever the storage dtype.

Every op takes an optional :class:`Tape`. When one is given the op records a
vector-Jacobian product so that :meth:`Tape.gradients` can later return the
gradient of any recorded output with respect to any recorded input::

    tape = Tape()
    y = sigmoid(linear(x, w, b, tape), tape)
    gw, gb = tape.gradients(y, [w, b])
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigError, InputError

BCE_EPS = 1e-7


class Tape:
    """Records the ops of one forward pass for a later backward sweep.

    Arrays are tracked by identity, so an array that is mutated in place after
    being recorded gives wrong gradients. The tape keeps a reference to every
    recorded array, which keeps their ids unique for its lifetime.
    """

    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def record(self, out, inputs, vjp):
        self._records.append((out, inputs, vjp))
        return out

    def gradients(self, output, wrt, seed=None):
        """Return d(seed . output)/d(w) for each ``w`` in ``wrt``.

        ``seed`` defaults to ones, i.e. the gradient of ``output.sum()``.
        Arrays in ``wrt`` that ``output`` does not depend on get zeros.
        """
        if seed is None:
            seed = np.ones(np.shape(output))
        grads = {id(output): np.asarray(seed, dtype=np.float64)}
        for out, inputs, vjp in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for x, gx in zip(inputs, vjp(g)):
                if gx is None:
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx
        return [
            grads[id(w)] if id(w) in grads else np.zeros(np.shape(w))
            for w in wrt
        ]


def _record(tape, out, inputs, vjp):
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_float64(x, tape=None):
    """Promote ``x`` to float64, recording the cast so gradients reach ``x``."""
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return x
    out = np.asarray(x, dtype=np.float64)
    if tape is not None and isinstance(x, np.ndarray):
        tape.record(out, (x,), lambda g: (g,))
    return out


@dataclass(frozen=True)
class Conv1DLayer:
    """Weights ``(filters, in_dim, width)``, bias ``(filters,)`` and symmetric padding."""

    weight: np.ndarray
    bias: np.ndarray
    padding: int = 0

    @property
    def filters(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def width(self):
        return self.weight.shape[2]


def conv_output_length(n_in, width, padding):
    return n_in + 2 * padding - width + 1


def pool_output_length(n_in, width, stride):
    return (n_in - width) // stride + 1


def conv1d(x, layer, tape=None):
    """Stride-1 convolution along time; ``(..., T, C) -> (..., T_out, filters)``."""
    w = as_float64(layer.weight, tape)
    b = as_float64(layer.bias, tape)
    x = as_float64(x, tape)
    n_filters, in_dim, width = w.shape
    if x.shape[-1] != in_dim:
        raise ConfigError(
            f"conv1d expects {in_dim} input channels, got {x.shape[-1]}"
        )
    pad = layer.padding
    n_in = x.shape[-2]
    n_out = conv_output_length(n_in, width, pad)
    if n_out < 1:
        raise ConfigError(
            f"conv1d output length {n_out} < 1 (T={n_in}, width={width}, padding={pad})"
        )
    lead = x.shape[:-2]
    xp = np.pad(x, [(0, 0)] * len(lead) + [(pad, pad), (0, 0)])
    # (..., T_out, C, width) -> (..., T_out, C*width); reshape copies
    cols = sliding_window_view(xp, width, axis=-2).reshape(*lead, n_out, in_dim * width)
    wmat = w.reshape(n_filters, in_dim * width)
    out = cols @ wmat.T + b

    def vjp(g):
        g2 = g.reshape(-1, n_filters)
        gw = (g2.T @ cols.reshape(-1, in_dim * width)).reshape(w.shape)
        gb = g2.sum(axis=0)
        gcols = (g @ wmat).reshape(*lead, n_out, in_dim, width)
        gxp = np.zeros(xp.shape)
        for k in range(width):
            gxp[..., k:k + n_out, :] += gcols[..., k]
        return gxp[..., pad:pad + n_in, :], gw, gb

    return _record(tape, out, (x, w, b), vjp)


def relu(x, tape=None):
    x = as_float64(x, tape)
    out = np.maximum(x, 0.0)
    return _record(tape, out, (x,), lambda g: (g * (x > 0),))


def sigmoid(x, tape=None):
    x = as_float64(x, tape)
    out = expit(x)
    return _record(tape, out, (x,), lambda g: (g * out * (1.0 - out),))


def maxpool1d(x, width, stride, tape=None):
    """Max over windows along time. Ties go to the earliest frame of the window."""
    if stride < 1 or width < 1:
        raise ConfigError(f"maxpool1d needs width, stride >= 1 (got {width}, {stride})")
    x = as_float64(x, tape)
    n_in = x.shape[-2]
    if n_in < width:
        raise ConfigError(f"maxpool1d input length {n_in} < window width {width}")
    n_out = pool_output_length(n_in, width, stride)
    # (..., T_out, C, width)
    windows = sliding_window_view(x, width, axis=-2)[..., ::stride, :, :][..., :n_out, :, :]
    arg = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros(x.shape)
        last = stride * (n_out - 1) + 1
        for k in range(width):
            gx[..., k:k + last:stride, :] += g * (arg == k)
        return (gx,)

    return _record(tape, out, (x,), vjp)


def linear(x, weight, bias, tape=None):
    """Affine map over the last axis; ``weight`` is ``(out_dim, in_dim)``."""
    w = as_float64(weight, tape)
    b = as_float64(bias, tape)
    x = as_float64(x, tape)
    if x.shape[-1] != w.shape[1]:
        raise ConfigError(f"linear expects input dim {w.shape[1]}, got {x.shape[-1]}")
    # one row per stacked product keeps each row's result independent of batch size
    out = (x[..., None, :] @ w.T)[..., 0, :] + b

    def vjp(g):
        g2 = g.reshape(-1, w.shape[0])
        gw = g2.T @ x.reshape(-1, w.shape[1])
        return g @ w, gw, g2.sum(axis=0)

    return _record(tape, out, (x, w, b), vjp)


def matmul(a, b, tape=None):
    a = as_float64(a, tape)
    b = as_float64(b, tape)
    out = a @ b

    def vjp(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(tape, out, (a, b), vjp)


def reshape(x, shape, tape=None):
    x = as_float64(x, tape)
    out = x.reshape(shape)
    return _record(tape, out, (x,), lambda g: (g.reshape(x.shape),))


def swap_last(x, tape=None):
    """Swap the last two axes."""
    x = as_float64(x, tape)
    out = np.swapaxes(x, -1, -2)
    return _record(tape, out, (x,), lambda g: (np.swapaxes(g, -1, -2),))


def gather_rows(table, index, tape=None):
    """``table[index]`` for a 1-D integer index, differentiable w.r.t. ``table``."""
    table = as_float64(table, tape)
    index = np.asarray(index, dtype=np.intp)
    out = table[index]

    def vjp(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, index, g)
        return (gt,)

    return _record(tape, out, (table,), vjp)


def softmax(e, axis=-1, tape=None):
    """Softmax with max subtraction; invariant to adding a constant along ``axis``."""
    e = as_float64(e, tape)
    z = np.exp(e - e.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(tape, out, (e,), vjp)


def log_mean_exp(h, r, axis=-1, tape=None):
    """Smooth pooling ``(1/r) log mean exp(r h)``: mean as r -> 0, max as r -> inf.

    Computed as ``m + log1p(mean(expm1(r (h - m)))) / r`` with ``m = max(h)`` so
    that both limits stay accurate in float64.
    """
    if not r > 0:
        raise ConfigError(f"log_mean_exp sharpness r must be > 0, got {r}")
    h = as_float64(h, tape)
    m = h.max(axis=axis, keepdims=True)
    s = r * (h - m)
    out = np.squeeze(m, axis=axis) + np.log1p(np.expm1(s).mean(axis=axis)) / r

    def vjp(g):
        z = np.exp(s)
        weights = z / z.sum(axis=axis, keepdims=True)
        return (np.expand_dims(g, axis) * weights,)

    return _record(tape, out, (h,), vjp)


def dot_attention(H, q, tape=None):
    """Dot-product attention of query ``q`` over the frames of ``H``.

    ``H`` is ``(..., T, K)``. ``q`` is ``(K,)`` for one query or ``(M, K)`` for
    ``M`` queries at once. Returns ``(weights, context)`` with shapes
    ``(..., T)``/``(..., K)`` or ``(..., M, T)``/``(..., M, K)``.
    """
    H = as_float64(H, tape)
    q = as_float64(q, tape)
    if q.shape[-1] != H.shape[-1]:
        raise ConfigError(
            f"query dim {q.shape[-1]} does not match feature dim {H.shape[-1]}"
        )
    single = q.ndim == 1
    if single:
        q = reshape(q, (1, q.shape[0]), tape)
    scores = matmul(q, swap_last(H, tape), tape)
    weights = softmax(scores, axis=-1, tape=tape)
    context = matmul(weights, H, tape)
    if single:
        weights = reshape(weights, weights.shape[:-2] + weights.shape[-1:], tape)
        context = reshape(context, context.shape[:-2] + context.shape[-1:], tape)
    return weights, context


def bce_loss(y_hat, y, tape=None):
    """Binary cross-entropy averaged over the last axis (and any leading ones).

    ``y_hat`` is clamped to ``[eps, 1 - eps]``. The clamp is treated as the
    identity in the backward pass so that saturated predictions still get a
    gradient.
    """
    y = np.asarray(y, dtype=np.float64)
    if np.any((y < 0) | (y > 1)) or not np.all(np.isfinite(y)):
        raise InputError("bce_loss targets must lie in [0, 1]")
    y_hat = as_float64(y_hat, tape)
    if y_hat.shape != y.shape:
        raise ConfigError(f"bce_loss shape mismatch {y_hat.shape} vs {y.shape}")
    p = np.clip(y_hat, BCE_EPS, 1.0 - BCE_EPS)
    out = np.float64(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))

    def vjp(g):
        return (g * (p - y) / (p * (1.0 - p)) / y.size,)

    out = np.asarray(out)
    return _record(tape, out, (y_hat,), vjp)
