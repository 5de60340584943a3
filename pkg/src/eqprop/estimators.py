"""Gradient estimators and parameter updates.

All estimates follow the sign convention of the update ``theta += lr * est``:
they approximate ``-dL*/dtheta``. Batches are averaged.

- ``one_sided``:   (dPhi/dtheta(s_*^beta) - dPhi/dtheta(s_*)) / beta
- ``random_sign``: ``one_sided`` with beta's sign drawn per example
- ``symmetric``:   (dPhi/dtheta(s_*^beta) - dPhi/dtheta(s_*^-beta)) / (2 beta)
- ``vf_sym``:      vector-field rule for asymmetric weights
- ``kp_vf_sym``:   shared forward/backward estimate for Kolen-Pollack updates
"""
import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import model
from .model import Head, Nudge, Scheme
from .phases import free_phase, nudged_phase

BETA_MIN = 1e-12


class EstimatorKind(str, Enum):
    ONE_SIDED = "one_sided"
    RANDOM_SIGN = "random_sign"
    SYMMETRIC = "symmetric"
    VF_SYM = "vf_sym"
    KPVF_SYM = "kp_vf_sym"
    BPTT = "bptt"
    FINITE_DIFF = "finite_diff"


@dataclass
class GradEstimate:
    grads: dict
    kind: EstimatorKind
    beta: float
    sign: np.ndarray = None
    parts: dict = field(default_factory=dict)
    free: object = None

    def flat(self, names=None):
        names = list(self.grads) if names is None else names
        return np.concatenate([self.grads[k].ravel() for k in names])


def _check_beta(beta):
    if abs(beta) < BETA_MIN:
        raise ValueError(f"|beta| must be >= {BETA_MIN}, got {beta}")


def _free(x, params, T, masks, free):
    return free if free is not None else free_phase(x, params, T, masks)


def _readout(params, states, y, weights):
    if params.topology.head is not Head.SOFTMAX:
        return {}
    total = None
    for st, wt in zip(states, weights):
        u = wt * model.readout_update(params, st, y)
        total = u if total is None else total + u
    return {"w_out": total}


def one_sided(x, y, params, T, K, beta, masks=None, free=None, nudge=Nudge.INSIDE):
    """Two-phase estimate. ``beta`` may be a per-example array."""
    if params.topology.scheme is not Scheme.SYMMETRIC:
        raise model.UnsupportedSchemeError("one-sided EP requires symmetric connections")
    betas = np.broadcast_to(np.asarray(beta, dtype=np.float64), (x.shape[0],))
    for b in np.unique(betas):
        _check_beta(b)
    fr = _free(x, params, T, masks, free)
    nb = nudged_phase(x, y, params, fr.state, beta, K, masks, nudge=nudge)
    coef = 1.0 / (x.shape[0] * betas)
    hi = model.dphi_dtheta(x, nb.state, params, coef, masks)
    lo = model.dphi_dtheta(x, fr.state, params, coef, masks)
    grads = {k: hi[k] - lo[k] for k in hi}
    grads.update(_readout(params, [nb.state], y, [1.0]))
    kind = EstimatorKind.ONE_SIDED
    scalar = float(betas[0]) if np.all(betas == betas[0]) else float(np.abs(betas[0]))
    return GradEstimate(grads, kind, scalar, free=fr, parts={"nudged": nb})


def draw_signs(rng, n):
    """Independent +/-1 draws with equal probability."""
    return np.where(rng.random(n) < 0.5, -1.0, 1.0)


def random_sign(x, y, params, T, K, beta, rng, masks=None, free=None, nudge=Nudge.INSIDE):
    """One-sided estimate with the sign of beta drawn independently per example."""
    _check_beta(beta)
    signs = draw_signs(rng, x.shape[0])
    est = one_sided(x, y, params, T, K, beta * signs, masks, free, nudge)
    est.kind = EstimatorKind.RANDOM_SIGN
    est.beta = abs(beta)
    est.sign = signs
    return est


def _three_phase(x, y, params, T, K, beta, masks, free, nudge):
    _check_beta(beta)
    fr = _free(x, params, T, masks, free)
    pos = nudged_phase(x, y, params, fr.state, beta, K, masks, nudge=nudge)
    neg = nudged_phase(x, y, params, fr.state, -beta, K, masks, nudge=nudge)
    return fr, pos, neg


def symmetric(x, y, params, T, K, beta, masks=None, free=None, nudge=Nudge.INSIDE):
    """Three-phase symmetric-difference estimate."""
    if params.topology.scheme is not Scheme.SYMMETRIC:
        raise model.UnsupportedSchemeError("symmetric EP requires symmetric connections")
    fr, pos, neg = _three_phase(x, y, params, T, K, beta, masks, free, nudge)
    coef = np.full(x.shape[0], 1.0 / (2.0 * beta * x.shape[0]))
    hi = model.dphi_dtheta(x, pos.state, params, coef, masks)
    lo = model.dphi_dtheta(x, neg.state, params, coef, masks)
    grads = {k: hi[k] - lo[k] for k in hi}
    grads.update(_readout(params, [pos.state, neg.state], y, [0.5, 0.5]))
    return GradEstimate(grads, EstimatorKind.SYMMETRIC, float(beta), free=fr,
                        parts={"pos": pos, "neg": neg})


def _require_asym(params):
    if params.topology.scheme is not Scheme.ASYMMETRIC:
        raise model.UnsupportedSchemeError("vector-field rules require asymmetric connections")


def vf_sym(x, y, params, T, K, beta, masks=None, free=None, nudge=Nudge.INSIDE):
    """Symmetric vector-field estimate; forward and backward updates differ."""
    _require_asym(params)
    fr, pos, neg = _three_phase(x, y, params, T, K, beta, masks, free, nudge)
    s0, sp, sn = (model._masked(r.state, masks) for r in (fr, pos, neg))
    coef = np.full(x.shape[0], 1.0 / (2.0 * beta * x.shape[0]))
    diff = [a - b for a, b in zip(sp, sn)]
    grads = {}
    top = params.topology
    for n in range(1, top.n_layers + 1):
        grads[f"w{n}"] = model.layer_grad(x, diff[n - 1], s0, params, n, params.w(n), coef)
        grads[f"b{n}"] = model.bias_grad(diff[n - 1], coef)
        if top.has_backward(n):
            # post = free state, pre = difference; offsets from w^b ⋆ s_*
            grads[f"wb{n}"] = model.layer_grad(
                x, s0[n - 1], diff, params, n, params.wb(n), coef, ind_layers=s0
            )
    grads.update(_readout(params, [pos.state, neg.state], y, [0.5, 0.5]))
    grads = {k: grads[k] for k in params.names()}
    return GradEstimate(grads, EstimatorKind.VF_SYM, float(beta), free=fr,
                        parts={"pos": pos, "neg": neg})


def kp_vf_components(x, params, pos_state, neg_state, beta, masks=None):
    """Per-weight-set estimates ``(bar_f, bar_b)`` from the +/-beta steady states."""
    sp = model._masked(pos_state, masks)
    sn = model._masked(neg_state, masks)
    coef = np.full(x.shape[0], 1.0 / (2.0 * beta * x.shape[0]))
    top = params.topology
    bar_f, bar_b = {}, {}
    for n in range(1, top.n_layers + 1):
        for out, w in ((bar_f, params.w(n)), (bar_b, params.wb(n) if top.has_backward(n) else None)):
            if w is None:
                continue
            out[n] = (model.layer_grad(x, sp[n - 1], sp, params, n, w, coef)
                      - model.layer_grad(x, sn[n - 1], sn, params, n, w, coef))
    return bar_f, bar_b


def kp_vf_sym(x, y, params, T, K, beta, masks=None, free=None, nudge=Nudge.INSIDE):
    """Kolen-Pollack vector-field estimate: both weight sets get ``(bar_f + bar_b) / 2``."""
    _require_asym(params)
    fr, pos, neg = _three_phase(x, y, params, T, K, beta, masks, free, nudge)
    bar_f, bar_b = kp_vf_components(x, params, pos.state, neg.state, beta, masks)
    sp = model._masked(pos.state, masks)
    sn = model._masked(neg.state, masks)
    coef = np.full(x.shape[0], 1.0 / (2.0 * beta * x.shape[0]))
    top = params.topology
    grads = {}
    for n in range(1, top.n_layers + 1):
        if n in bar_b:
            common = 0.5 * (bar_f[n] + bar_b[n])
            grads[f"w{n}"] = common
            grads[f"wb{n}"] = common.copy()
        else:
            grads[f"w{n}"] = bar_f[n]
        grads[f"b{n}"] = model.bias_grad(sp[n - 1], coef) - model.bias_grad(sn[n - 1], coef)
    grads.update(_readout(params, [pos.state, neg.state], y, [0.5, 0.5]))
    grads = {k: grads[k] for k in params.names()}
    return GradEstimate(grads, EstimatorKind.KPVF_SYM, float(beta), free=fr,
                        parts={"pos": pos, "neg": neg, "bar_f": bar_f, "bar_b": bar_b})


def estimate(kind, x, y, params, T, K, beta, rng=None, masks=None, free=None, nudge=Nudge.INSIDE):
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.ONE_SIDED:
        return one_sided(x, y, params, T, K, beta, masks, free, nudge)
    if kind is EstimatorKind.RANDOM_SIGN:
        if rng is None:
            raise ValueError("random_sign needs an rng")
        return random_sign(x, y, params, T, K, beta, rng, masks, free, nudge)
    if kind is EstimatorKind.SYMMETRIC:
        return symmetric(x, y, params, T, K, beta, masks, free, nudge)
    if kind is EstimatorKind.VF_SYM:
        return vf_sym(x, y, params, T, K, beta, masks, free, nudge)
    if kind is EstimatorKind.KPVF_SYM:
        return kp_vf_sym(x, y, params, T, K, beta, masks, free, nudge)
    raise ValueError(f"{kind.value} is an oracle, not a trainable estimator")


def _lr_for(lr, name):
    return lr[name] if isinstance(lr, dict) else lr


def leak_pairs(params):
    """Names of forward/backward weight pairs subject to Kolen-Pollack leakage."""
    return [(f"w{k[2:]}", k) for k in params.tensors if k.startswith("wb")]


def apply_update(params, est, lr, lam=0.0):
    """In-place SGD step ``theta += lr * est``.

    For Kolen-Pollack estimates every forward/backward weight pair also
    leaks: ``theta_i += lr * (est - lam * theta_i)``. ``lr`` is a scalar or a
    per-tensor dict.
    """
    if set(est.grads) != set(params.tensors):
        raise ValueError("estimate and parameters have different tensors")
    leaky = set()
    if est.kind is EstimatorKind.KPVF_SYM and lam:
        for f, b in leak_pairs(params):
            leaky.update((f, b))
    for name, theta in params.tensors.items():
        g = est.grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"{name}: estimate shape {g.shape} != parameter {theta.shape}")
        eta = _lr_for(lr, name)
        if name in leaky:
            theta += eta * (g - lam * theta)
        else:
            theta += eta * g
    return params


def apply_dropout(topology, p, batch_size, rng, layer=None):
    """Per-example dropout masks ``{layer: m / (1 - p)}`` for one training iteration.

    Keep the returned masks fixed across all phases of the iteration. The
    default layer is the last convolutional layer (the last state layer for
    dense nets). ``p = 0`` returns no masks.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return {}
    if layer is None:
        layer = topology.n_conv if topology.n_conv else topology.n_layers
    shape = (batch_size,) + tuple(topology.state_shapes[layer - 1])
    keep = rng.random(shape) >= p
    return {layer: keep / (1.0 - p)}


def write_gradient_csv(path, estimates):
    """Rows ``estimator, layer, flat_index, value`` for cross-run diffing."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["estimator", "layer", "flat_index", "value"])
        for est in estimates:
            for name, g in est.grads.items():
                for i, v in enumerate(g.ravel()):
                    wr.writerow([est.kind.value, name, i, repr(float(v))])
