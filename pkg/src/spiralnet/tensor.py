"""Dense tensor operations with hand-written reverse-mode gradients.

Feature maps are laid out as ``(batch, time, frequency, channel)``. Every
public forward op also accepts a single unbatched ``(time, frequency, channel)``
map. Convolutions follow the index convention ``W[tau, kappa] x[t - tau, k - kappa]``
(a true convolution, not a correlation) and keep only the fully valid support.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PROB_FLOOR = 1e-12


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(y: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(y).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return y


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(f"expected a (T, K, C) or (N, T, K, C) tensor, got shape {x.shape}")
    return x, False


def im2col(x: np.ndarray, dt: int, dk: int) -> np.ndarray:
    """Patch matrix ``(N * To * Ko, dt * dk * Cin)`` of valid windows, in (tau, kappa, cin) order."""
    n, t, k, c = x.shape
    win = sliding_window_view(x, (dt, dk), axis=(1, 2))  # N, To, Ko, Cin, dt, dk
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * (t - dt + 1) * (k - dk + 1), dt * dk * c)


def col2im(dcols: np.ndarray, shape: tuple, dt: int, dk: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back onto the input grid."""
    n, t, k, c = shape
    to, ko = t - dt + 1, k - dk + 1
    d = dcols.reshape(n, to, ko, dt, dk, c)
    dx = np.zeros(shape, dtype=dcols.dtype)
    for a in range(dt):
        for b in range(dk):
            dx[:, a : a + to, b : b + ko] += d[:, :, :, a, b]
    return dx


def _conv_checks(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> None:
    if weight.ndim != 4:
        raise DimensionError(f"kernel must be (dt, dk, Cin, Cout), got shape {weight.shape}")
    dt, dk, cin, cout = weight.shape
    if dt < 1 or dk < 1:
        raise DimensionError("kernel extents must be positive")
    if bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match Cout={cout}")
    if x.shape[3] != cin:
        raise DimensionError(f"channel axis: input has {x.shape[3]} channels, kernel expects {cin}")
    if x.shape[1] < dt:
        raise DimensionError(f"time axis: input length {x.shape[1]} < kernel width {dt}")
    if x.shape[2] < dk:
        raise DimensionError(f"frequency axis: input height {x.shape[2]} < kernel height {dk}")


def conv2d_valid(x, weight, bias, return_cols=False):
    """Valid 2-d convolution over (time, frequency), summing over input channels.

    Output has shape ``(T - dt + 1, K - dk + 1, Cout)`` (plus the batch axis
    when given one). With ``return_cols`` the patch matrix is returned too,
    for reuse by :func:`conv2d_valid_backward`.
    """
    xb, squeeze = _batched(x)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    _conv_checks(xb, weight, bias)
    dt, dk, cin, cout = weight.shape
    n, t, k, _ = xb.shape
    cols = im2col(xb, dt, dk)
    y = (cols @ weight[::-1, ::-1].reshape(-1, cout)).reshape(n, t - dt + 1, k - dk + 1, cout)
    y += bias
    _check_finite(y, "conv2d_valid")
    y = y[0] if squeeze else y
    return (y, cols) if return_cols else y


def conv2d_valid_backward(dy, x, weight, need_input_grad=True, cols=None):
    """Gradients of :func:`conv2d_valid` w.r.t. weight, bias and (optionally) input.

    ``dy`` and ``x`` are batched. ``cols`` is the forward patch matrix, if kept.
    """
    dt, dk, cin, cout = weight.shape
    if cols is None:
        cols = im2col(x, dt, dk)
    dy2 = dy.reshape(-1, cout)
    dweight = (cols.T @ dy2).reshape(dt, dk, cin, cout)[::-1, ::-1]
    dbias = dy2.sum(axis=0)
    dx = None
    if need_input_grad:
        dcols = dy2 @ weight[::-1, ::-1].reshape(-1, cout).T
        dx = col2im(dcols, x.shape, dt, dk)
    return np.ascontiguousarray(dweight), dbias, dx


def spiral_output_height(height: int, dk: int, octaves: int, bins_per_octave: int) -> int:
    return height - bins_per_octave * (octaves - 1) - (dk - 1)


def _spiral_kernel_matrix(weight):
    dt, dk, n_oct, cin, cout = weight.shape
    # rows ordered (j, tau, kappa, cin) to match the stacked patch matrix
    return weight[::-1, ::-1].transpose(2, 0, 1, 3, 4).reshape(-1, cout)


def _spiral_cols(xb, dt, dk, n_oct, q, ho):
    span = ho + dk - 1
    return np.concatenate(
        [im2col(xb[:, :, q * (n_oct - 1 - j) : q * (n_oct - 1 - j) + span], dt, dk) for j in range(n_oct)], axis=1
    )


def spiral_conv(x, weight, bias, bins_per_octave: int = 12, return_cols=False):
    """Convolution on the pitch spiral.

    ``weight`` has shape ``(dt, dk, J, Cin, Cout)``; octave tap ``j`` reads the
    input ``j * bins_per_octave`` bins below the current position::

        y[t, k, c] = b[c] + sum W[tau, kappa, j, cin, c] x[t - tau, k - kappa - Q j, cin]

    evaluated where every tap is inside the input.
    """
    xb, squeeze = _batched(x)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    if weight.ndim != 5:
        raise DimensionError(f"spiral kernel must be (dt, dk, J, Cin, Cout), got shape {weight.shape}")
    dt, dk, n_oct, cin, cout = weight.shape
    if n_oct < 1:
        raise DimensionError("spiral kernel needs at least one octave tap")
    height = xb.shape[2]
    ho = spiral_output_height(height, dk, n_oct, bins_per_octave)
    if ho < 1:
        raise DimensionError(
            f"frequency axis: height {height} too small for {n_oct} octave taps of "
            f"{bins_per_octave} bins and kernel height {dk}"
        )
    _conv_checks(xb[:, :, : ho + dk - 1], weight[:, :, 0], bias)
    n, t = xb.shape[:2]
    cols = _spiral_cols(xb, dt, dk, n_oct, bins_per_octave, ho)
    y = (cols @ _spiral_kernel_matrix(weight)).reshape(n, t - dt + 1, ho, cout)
    y += bias
    _check_finite(y, "spiral_conv")
    y = y[0] if squeeze else y
    return (y, cols) if return_cols else y


def spiral_conv_backward(dy, x, weight, bins_per_octave=12, need_input_grad=True, cols=None):
    dt, dk, n_oct, cin, cout = weight.shape
    ho = dy.shape[2]
    q = bins_per_octave
    if cols is None:
        cols = _spiral_cols(x, dt, dk, n_oct, q, ho)
    dy2 = dy.reshape(-1, cout)
    g = (cols.T @ dy2).reshape(n_oct, dt, dk, cin, cout).transpose(1, 2, 0, 3, 4)[::-1, ::-1]
    dx = None
    if need_input_grad:
        dcols = dy2 @ _spiral_kernel_matrix(weight).T
        width = dt * dk * cin
        span = ho + dk - 1
        dx = np.zeros(x.shape, dtype=dcols.dtype)
        sub = (x.shape[0], x.shape[1], span, cin)
        for j in range(n_oct):
            lo = q * (n_oct - 1 - j)
            dx[:, :, lo : lo + span] += col2im(dcols[:, j * width : (j + 1) * width], sub, dt, dk)
    return np.ascontiguousarray(g), dy2.sum(axis=0), dx


def relu_leaky(x, alpha: float = 0.3):
    """Leaky rectifier: ``alpha * x`` for negative inputs, ``x`` otherwise."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    x = np.asarray(x)
    # max(x, alpha x) equals the two-branch definition for alpha <= 1
    return np.maximum(x, x * x.dtype.type(alpha)) if x.dtype.kind == "f" else np.where(x < 0, alpha * x, x)


def relu_leaky_backward(dy, x, alpha: float = 0.3):
    # slope alpha at exactly zero
    slope = np.where(x > 0, dy.dtype.type(1), dy.dtype.type(alpha))
    slope *= dy
    return slope


def maxpool(x, pt: int, pk: int):
    """Max over non-overlapping ``pt x pk`` windows; trailing remainders are dropped."""
    xb, squeeze = _batched(x)
    y = _maxpool(xb, pt, pk)
    return y[0] if squeeze else y


def _pool_views(x, pt, pk):
    """Strided views, one per window offset, in row-major window order."""
    n, t, k, c = x.shape
    if pt < 1 or pk < 1:
        raise DimensionError("pooling extents must be positive")
    if pt > t:
        raise DimensionError(f"time axis: pool width {pt} exceeds length {t}")
    if pk > k:
        raise DimensionError(f"frequency axis: pool height {pk} exceeds height {k}")
    to, ko = t // pt, k // pk
    return [x[:, a : to * pt : pt, b : ko * pk : pk] for a in range(pt) for b in range(pk)]


def _maxpool(x, pt, pk):
    views = _pool_views(x, pt, pk)
    y = views[0].copy()
    for v in views[1:]:
        np.maximum(y, v, out=y)
    return y


def maxpool_backward(dy, x, pt, pk):
    """Route each pooled gradient to the first maximal element of its window."""
    y = _maxpool(x, pt, pk)
    dx = np.zeros(x.shape, dtype=dy.dtype)
    taken = np.zeros(y.shape, dtype=bool)
    to, ko = y.shape[1:3]
    for idx, v in enumerate(_pool_views(x, pt, pk)):
        a, b = divmod(idx, pk)
        hit = v == y
        hit &= ~taken
        taken |= hit
        dx[:, a : to * pt : pt, b : ko * pk : pk] = np.where(hit, dy, 0)
    return dx


def dense(x, weight, bias=None):
    """Affine map of a flattened input: ``y[o] = bias[o] + sum_i w[i, o] x[i]``."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.size == weight.shape[0]:
        y = x.reshape(-1) @ weight
    else:
        xb = x.reshape(x.shape[0], -1)
        if xb.shape[1] != weight.shape[0]:
            raise DimensionError(f"dense input length {xb.shape[1]} does not match weight rows {weight.shape[0]}")
        y = xb @ weight
    if bias is not None:
        y = y + bias
    return _check_finite(y, "dense")


def softmax(y, axis: int = -1):
    y = np.asarray(y)
    z = np.exp(y - y.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def cross_entropy(probs, k):
    """Negative log-probability of class ``k``, floored at ``PROB_FLOOR``.

    Accepts a single probability vector and integer label, or a batch
    ``(N, K)`` with a label array, in which case the mean loss is returned.
    """
    probs = np.asarray(probs)
    if probs.ndim == 1:
        if not 0 <= int(k) < probs.shape[0]:
            raise IndexError(f"class index {k} out of range for {probs.shape[0]} classes")
        return float(-np.log(probs[int(k)] + PROB_FLOOR))
    k = np.asarray(k)
    if np.any((k < 0) | (k >= probs.shape[1])):
        raise IndexError("class index out of range")
    picked = probs[np.arange(len(k)), k]
    return float(-np.mean(np.log(picked.astype(np.float64) + PROB_FLOOR)))


def softmax_cross_entropy_backward(probs, k):
    """Gradient of ``-log softmax(y)[k]`` w.r.t. the logits ``y``: ``probs - onehot(k)``."""
    g = np.array(probs, copy=True)
    if g.ndim == 1:
        g[int(k)] -= 1
    else:
        g[np.arange(len(k)), k] -= 1
    return g


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(y, mask)``; the mask is ``None`` when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x)
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask
