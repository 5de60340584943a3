"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_kernels.pyx``.
All arrays are batched float64 in NCHW layout; pooling indices are flat
offsets ``i * F + j`` into each F x F window, stored as int8.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "python"


def conv_valid(xp, w):
    """Stride-one valid cross-correlation of padded input ``xp`` with ``w``."""
    f = w.shape[2]
    win = sliding_window_view(xp, (f, f), axis=(2, 3))
    out = np.tensordot(win, w, axes=((1, 4, 5), (1, 2, 3)))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv_input_grad(w, g):
    """Adjoint of ``conv_valid`` with respect to its (padded) input."""
    f = w.shape[2]
    gp = np.pad(g, ((0, 0), (0, 0), (f - 1, f - 1), (f - 1, f - 1)))
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv_valid(gp, wt)


def conv_weight_grad(xp, g):
    """Adjoint of ``conv_valid`` with respect to the kernel, summed over batch."""
    f = xp.shape[2] - g.shape[2] + 1
    win = sliding_window_view(xp, (f, f), axis=(2, 3))
    return np.ascontiguousarray(np.tensordot(g, win, axes=((0, 2, 3), (0, 2, 3))))


def _windows(x, f):
    b, c, h, w = x.shape
    ho, wo = h // f, w // f
    xr = x[:, :, : ho * f, : wo * f].reshape(b, c, ho, f, wo, f)
    return xr.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, f * f)


def maxpool(x, f):
    win = _windows(x, f)
    idx = np.argmax(win, axis=-1).astype(np.int8)
    vals = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(vals), idx


def pool_gather(x, idx, f):
    """Values of ``x`` at recorded window offsets (adjoint of ``unpool``)."""
    win = _windows(x, f)
    return np.ascontiguousarray(
        np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    )


def unpool(y, idx, f, h, w):
    b, c, ho, wo = y.shape
    win = np.zeros((b, c, ho, wo, f * f))
    np.put_along_axis(win, idx[..., None].astype(np.intp), y[..., None], axis=-1)
    full = win.reshape(b, c, ho, wo, f, f).transpose(0, 1, 2, 4, 3, 5)
    full = full.reshape(b, c, ho * f, wo * f)
    if ho * f == h and wo * f == w:
        return np.ascontiguousarray(full)
    out = np.zeros((b, c, h, w))
    out[:, :, : ho * f, : wo * f] = full
    return out
