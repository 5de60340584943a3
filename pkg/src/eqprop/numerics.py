"""Tensor primitives used by the dynamics and the learning rules.

Every spatial operation accepts either a single example ``(C, H, W)`` or a
batch ``(B, C, H, W)`` and returns the matching rank. Arithmetic is float64.

The hot kernels come from the compiled ``_kernels`` extension when it is
importable and from the numpy ``_fallback`` otherwise. Set the environment
variable ``EQPROP_PURE_PYTHON=1`` to force the fallback, or call
:func:`set_backend` at runtime.
"""
import os

import numpy as np

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


class ShapeError(ValueError):
    pass


_BACKENDS = {"python": _fallback}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

if os.environ.get("EQPROP_PURE_PYTHON", "") not in ("", "0") or _compiled is None:
    _impl = _fallback
else:
    _impl = _compiled


def available_backends():
    return sorted(_BACKENDS)


def backend():
    """Name of the active kernel backend (``"compiled"`` or ``"python"``)."""
    return _impl.NAME


def set_backend(name):
    global _impl
    try:
        _impl = _BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"unknown or unavailable backend {name!r}; have {available_backends()}"
        ) from None


def _as4d(x, what):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{what} must have shape (C,H,W) or (B,C,H,W), got {x.shape}")


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(w, x, bias=None, pad=0):
    """Stride-one 2-D cross-correlation ``y[c,h,w] = B[c] + sum w[c,i,j,k] x[i,j+h,k+w]``.

    ``x`` is zero-padded by ``pad`` on each spatial side first.
    """
    w = np.ascontiguousarray(w, dtype=np.float64)
    x4, single = _as4d(x, "x")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"kernel must have shape (C_out,C_in,F,F), got {w.shape}")
    if w.shape[1] != x4.shape[1]:
        raise ShapeError(
            f"kernel C_in={w.shape[1]} does not match input channels C_in={x4.shape[1]}"
        )
    f = w.shape[2]
    hp, wp = x4.shape[2] + 2 * pad, x4.shape[3] + 2 * pad
    if hp < f or wp < f:
        raise ShapeError(f"kernel F={f} larger than padded input H={hp}, W={wp}")
    y = _impl.conv_valid(_pad(x4, pad), w)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != (C_out={w.shape[0]},)")
        y += bias[None, :, None, None]
    return y[0] if single else y


def conv2d_transpose(w, y, pad=0):
    """Gradient of ``conv2d(w, ., pad=pad)`` with respect to its input, applied to ``y``.

    Satisfies ``<conv2d(w, x, 0, pad), y> == <x, conv2d_transpose(w, y, pad)>``.
    """
    w = np.ascontiguousarray(w, dtype=np.float64)
    y4, single = _as4d(y, "y")
    if w.ndim != 4 or w.shape[0] != y4.shape[1]:
        raise ShapeError(
            f"y channels C_out={y4.shape[1]} do not match kernel C_out="
            f"{w.shape[0] if w.ndim == 4 else w.shape}"
        )
    xp = _impl.conv_input_grad(w, y4)
    if pad:
        if xp.shape[2] <= 2 * pad or xp.shape[3] <= 2 * pad:
            raise ShapeError(f"padding {pad} too large for output shape {y4.shape}")
        xp = np.ascontiguousarray(xp[:, :, pad:-pad, pad:-pad])
    return xp[0] if single else xp


def conv2d_weight_grad(x, g, pad=0):
    """Gradient of ``gdot(g, conv2d(w, x, pad=pad))`` with respect to ``w``.

    In the notation of the learning rules this is ``g ⋆ x``. A batch is summed.
    """
    x4, single_x = _as4d(x, "x")
    g4, single_g = _as4d(g, "g")
    if x4.shape[0] != g4.shape[0]:
        raise ShapeError(f"batch sizes differ: x {x4.shape[0]} vs g {g4.shape[0]}")
    xp = _pad(x4, pad)
    if xp.shape[2] < g4.shape[2] or xp.shape[3] < g4.shape[3]:
        raise ShapeError(f"g spatial shape {g4.shape[2:]} exceeds padded x {xp.shape[2:]}")
    return _impl.conv_weight_grad(xp, g4)


def maxpool(x, f):
    """Non-overlapping ``f`` x ``f`` max-pooling with argmax capture.

    Returns ``(y, ind)``. ``ind`` holds the flat offset ``i * f + j`` of the
    maximum inside each window (int8); ties keep the first occurrence in
    row-major window order. Trailing rows/columns that do not fill a whole
    window are ignored.
    """
    x4, single = _as4d(x, "x")
    if f < 1 or x4.shape[2] < f or x4.shape[3] < f:
        raise ShapeError(f"pool size {f} does not fit spatial shape {x4.shape[2:]}")
    if f == 1:
        y, ind = x4.copy(), np.zeros(x4.shape, dtype=np.int8)
    else:
        y, ind = _impl.maxpool(x4, int(f))
    return (y[0], ind[0]) if single else (y, ind)


def index_offsets(ind, f):
    """Split flat pooling offsets into ``(row, col)`` offsets within the window."""
    ind = np.asarray(ind)
    return ind // f, ind % f


def _check_ind(y4, ind4, f):
    if ind4.shape != y4.shape:
        raise ShapeError(f"index grid {ind4.shape} does not match pooled shape {y4.shape}")
    if ind4.size and (ind4.min() < 0 or ind4.max() >= f * f):
        raise IndexError(f"pooling offsets outside window range [0, {f * f - 1}]")


def unpool(y, ind, out_shape, f):
    """Place ``y`` at the recorded window offsets of a zero tensor of ``out_shape``.

    ``out_shape`` is the spatial ``(H, W)`` or full shape of the pre-pooling tensor.
    """
    y4, single = _as4d(y, "y")
    ind4 = np.ascontiguousarray(ind, dtype=np.int8)
    if single:
        ind4 = ind4[None]
    _check_ind(y4, ind4, f)
    h, w = tuple(out_shape)[-2:]
    if h // f != y4.shape[2] or w // f != y4.shape[3]:
        raise ShapeError(f"out_shape {tuple(out_shape)} does not pool to {y4.shape[2:]}")
    if f == 1:
        out = y4.copy()
    else:
        out = _impl.unpool(y4, ind4, int(f), int(h), int(w))
    return out[0] if single else out


def pool_gather(x, ind, f):
    """Read ``x`` at recorded window offsets; the adjoint of :func:`unpool`."""
    x4, single = _as4d(x, "x")
    ind4 = np.ascontiguousarray(ind, dtype=np.int8)
    if single:
        ind4 = ind4[None]
    if f == 1:
        out = x4.copy()
    else:
        out = _impl.pool_gather(x4, ind4, int(f))
    return out[0] if single else out


def flatten(x):
    """Reshape ``(B, C, H, W)`` to ``(B, C*H*W)``."""
    x = np.asarray(x)
    return x.reshape(x.shape[0], -1)


def unflatten(x, shape):
    x = np.asarray(x)
    return x.reshape((x.shape[0],) + tuple(shape))


def hard_sigmoid(x):
    """``max(0, min(x/2, 1))``, elementwise."""
    return np.clip(0.5 * np.asarray(x, dtype=np.float64), 0.0, 1.0)


def hard_sigmoid_grad(x):
    """Slope 1/2 on the open interval (0, 2), zero at and beyond the kinks."""
    x = np.asarray(x, dtype=np.float64)
    return np.where((x > 0.0) & (x < 2.0), 0.5, 0.0)


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    zs = z - z.max(axis=axis, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=axis, keepdims=True))


def gdot(a, b):
    """Sum over all coordinates of the elementwise product of same-shape tensors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"gdot operands differ in shape: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))
