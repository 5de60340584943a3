"""Reference gradients: truncated BPTT, finite differences, bias-order fits, alignment angles.

Nothing here shares code with the EP estimators beyond the forward dynamics,
so the two routes can check each other.
"""
from dataclasses import dataclass
import math

import numpy as np

from . import model
from . import numerics as nm
from .estimators import EstimatorKind, GradEstimate, one_sided, symmetric
from .model import Head, Nudge
from .phases import free_phase

CONVERGENCE_TOL = 1e-8


class PreconditionError(RuntimeError):
    pass


class TooManyParametersError(RuntimeError):
    pass


@dataclass
class BpttGrad:
    """Truncated BPTT gradients of ``L = mean_batch l(s_T, y)``.

    ``per_step[t-1]`` is ``dL/dtheta_{T-t}`` (the parameter copy used by step
    ``T-t``); ``cumulative[t-1]`` is ``sum_{k=T-t}^{T-1} dL/dtheta_k``.
    ``readout`` holds the direct ``dL/dw_out`` (softmax head only).
    """

    per_step: list
    cumulative: list
    readout: dict
    loss: float
    residual: float

    def at(self, t):
        if t == 0:
            return {k: np.zeros_like(v) for k, v in self.cumulative[0].items()}
        return self.cumulative[t - 1]

    def full(self, t=None):
        """Cumulative gradient at depth ``t`` (default deepest) plus the readout term."""
        g = dict(self.at(len(self.cumulative) if t is None else t))
        g.update(self.readout)
        return g


def _adjoint_step(x, s_k, lam_next, params):
    """Back-propagate ``lam_next = dL/ds_{k+1}`` through one step of free dynamics."""
    top = params.topology
    L = top.n_layers
    pre, ind = model.preactivations(x, s_k, params)
    mu = [lam_next[n] * nm.hard_sigmoid_grad(pre[n]) for n in range(L)]
    lam = [np.zeros_like(s) for s in s_k.layers]
    g = {name: np.zeros(shape) for name, shape in top.param_shapes().items() if name != "w_out"}
    for n in range(1, L + 1):
        src = x if n == 1 else s_k.layers[n - 2]
        back_name = f"wb{n}" if top.has_backward(n) else f"w{n}"
        wt = params.wb(n)
        if top.is_conv(n):
            spec = top.conv[n - 1]
            p = spec.padding
            zshape = (src.shape[0],) + top.conv_shapes[n - 1]
            dz = nm.unpool(mu[n - 1], ind[n - 1], zshape, spec.pool)
            g[f"w{n}"] += nm.conv2d_weight_grad(src, dz, pad=p)
            g[f"b{n}"] += mu[n - 1].sum(axis=(0, 2, 3))
            if n >= 2:
                lam[n - 2] += nm.conv2d_transpose(params.w(n), dz, pad=p)
                # top-down term into layer n-1 with offsets of the top-down weights
                if top.has_backward(n):
                    tz = nm.conv2d(wt, src, pad=p)
                    _, tind = nm.maxpool(tz, spec.pool)
                else:
                    tind = ind[n - 1]
                u = nm.unpool(s_k.layers[n - 1], tind, zshape, spec.pool)
                g[back_name] += nm.conv2d_weight_grad(mu[n - 2], u, pad=p)
                lam[n - 1] += nm.pool_gather(nm.conv2d(wt, mu[n - 2], pad=p), tind, spec.pool)
        else:
            fsrc = nm.flatten(src)
            g[f"w{n}"] += mu[n - 1].T @ fsrc
            g[f"b{n}"] += mu[n - 1].sum(axis=0)
            if n >= 2:
                lam[n - 2] += (mu[n - 1] @ params.w(n)).reshape(lam[n - 2].shape)
                fmu = nm.flatten(mu[n - 2])
                g[back_name] += s_k.layers[n - 1].T @ fmu
                lam[n - 1] += fmu @ wt.T
    return lam, g


def bptt(x, y, params, T, K, require_convergence=True, tol=CONVERGENCE_TOL):
    """Reverse-mode gradients through the last ``K`` steps of a ``T``-step free phase."""
    if not 0 <= K <= T:
        raise ValueError(f"need 0 <= K <= T, got K={K}, T={T}")
    run = free_phase(x, params, T, record=True)
    states = [model.zero_state(params.topology, x.shape[0])] + run.snapshots
    res = model.residual(states[T - K], states[T - K - 1]) if T - K >= 1 else math.inf
    if require_convergence and K < T and res > tol:
        raise PreconditionError(
            f"free phase not converged at step T-K={T - K}: residual {res:.3e} > {tol:.1e}"
        )
    bsz = x.shape[0]
    s_T = states[T]
    loss = float(np.mean(model.state_loss(params, s_T, y)))
    lam = [np.zeros_like(s) for s in s_T.layers]
    lam[-1] = model.loss_grad_state(params, s_T, y) / bsz
    readout = {}
    if params.topology.head is Head.SOFTMAX:
        s = nm.flatten(s_T.layers[-1])
        readout["w_out"] = (nm.softmax(s @ params.w_out.T) - y).T @ s / bsz
    per_step, cumulative = [], []
    acc = None
    for k in range(T - 1, T - K - 1, -1):
        lam, g = _adjoint_step(x, states[k], lam, params)
        per_step.append(g)
        acc = {n: v.copy() for n, v in g.items()} if acc is None else {n: acc[n] + g[n] for n in acc}
        cumulative.append(acc)
    if K == 0:
        zero = {n: np.zeros(sh) for n, sh in params.topology.param_shapes().items() if n != "w_out"}
        cumulative = [zero]
    return BpttGrad(per_step, cumulative, readout, loss, res)


def steady_loss(x, y, params, T):
    """``L* = mean_batch l(s_T, y)`` after a ``T``-step free phase."""
    run = free_phase(x, params, T)
    return float(np.mean(model.state_loss(params, run.state, y)))


def finite_diff(x, y, params, T, eps=1e-5, max_params=2000, names=None, loss_fn=None):
    """Central differences of the steady-state loss, returned as ``-dL*/dtheta``.

    ``loss_fn(params) -> float`` overrides the steady-state loss (used for
    calibration on toy functions).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    names = params.names() if names is None else list(names)
    count = sum(params.tensors[k].size for k in names)
    if count > max_params:
        raise TooManyParametersError(
            f"{count} parameters exceed the finite-difference cap of {max_params}"
        )
    if loss_fn is None:
        def loss_fn(p):
            return steady_loss(x, y, p, T)
    work = params.copy()
    grads = {}
    for name in names:
        theta = work.tensors[name]
        g = np.zeros_like(theta)
        flat, gflat = theta.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn(work)
            flat[i] = orig - eps
            down = loss_fn(work)
            flat[i] = orig
            gflat[i] = -(up - down) / (2.0 * eps)
        grads[name] = g
    return GradEstimate(grads, EstimatorKind.FINITE_DIFF, 0.0)


def loglog_slope(betas, errors, floor=1e2 * np.finfo(float).eps):
    """Least-squares slope of ``log(error)`` against ``log(beta)``; tiny errors are dropped."""
    b = np.asarray(betas, dtype=float)
    e = np.asarray(errors, dtype=float)
    keep = e > floor
    if keep.sum() < 2:
        raise ValueError("fewer than two errors above the noise floor")
    return float(np.polyfit(np.log(b[keep]), np.log(e[keep]), 1)[0])


@dataclass
class BiasOrderFit:
    slope_one_sided: float
    slope_symmetric: float
    betas: list
    err_one_sided: list
    err_symmetric: list


def bias_order_fit(x, y, params, T, K, betas, eps=1e-5, reference=None, nudge=Nudge.INSIDE):
    """Error-vs-beta slopes of the one-sided and symmetric estimators.

    ``reference`` is the oracle ``-dL*/dtheta`` (computed by :func:`finite_diff`
    when omitted).
    """
    betas = sorted(float(b) for b in betas)
    if len(betas) < 4 or math.log10(betas[-1] / betas[0]) < 1.5:
        raise ValueError("need >= 4 beta values spanning >= 1.5 decades")
    if reference is None:
        reference = finite_diff(x, y, params, T, eps)
    names = params.names()
    ref = reference.flat(names)
    free = free_phase(x, params, T)
    e1, e2 = [], []
    for b in betas:
        e1.append(float(np.linalg.norm(one_sided(x, y, params, T, K, b, free=free, nudge=nudge).flat(names) - ref)))
        e2.append(float(np.linalg.norm(symmetric(x, y, params, T, K, b, free=free, nudge=nudge).flat(names) - ref)))
    return BiasOrderFit(loglog_slope(betas, e1), loglog_slope(betas, e2), betas, e1, e2)


def alignment_angle(wf, wb):
    """Angle in degrees between two same-shape weight tensors."""
    wf = np.asarray(wf, dtype=np.float64)
    wb = np.asarray(wb, dtype=np.float64)
    if wf.shape != wb.shape:
        raise nm.ShapeError(f"weight shapes differ: {wf.shape} vs {wb.shape}")
    nf, nb = np.linalg.norm(wf), np.linalg.norm(wb)
    if nf == 0.0 or nb == 0.0:
        raise ValueError("alignment angle undefined for a zero-norm tensor")
    # same angle as acos of the cosine, without its loss of precision near 0 and 180 degrees
    uf, ub = wf / nf, wb / nb
    return math.degrees(2.0 * math.atan2(np.linalg.norm(uf - ub), np.linalg.norm(uf + ub)))


def alignment_angles(params):
    """Per-layer angles ``{n: degrees}`` for every forward/backward weight pair."""
    return {
        int(k[2:]): alignment_angle(params.tensors[f"w{k[2:]}"], v)
        for k, v in params.tensors.items()
        if k.startswith("wb")
    }
