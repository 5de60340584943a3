"""Free and nudged relaxation phases.

Every nudged phase restarts from the stored free steady state; callers pass
the same ``s_star`` to the +beta and -beta runs.
"""
import csv
from dataclasses import dataclass

import numpy as np

from . import model
from .model import Nudge, Scheme


class DivergenceError(FloatingPointError):
    def __init__(self, step, layer):
        super().__init__(f"non-finite state at step {step} (layer {layer})")
        self.step = step
        self.layer = layer


@dataclass
class PhaseResult:
    state: model.NetState
    residual: float
    y_hat: np.ndarray
    snapshots: list = None
    steps: int = 0


def _check_finite(state, t):
    for n, s in enumerate(state.layers, start=1):
        if not np.all(np.isfinite(s)):
            raise DivergenceError(t, n)


def _run(x, params, state, steps, beta, y, masks, record, nudge):
    snaps = [] if record else None
    res = 0.0
    for t in range(1, steps + 1):
        new, _ = model.step(x, state, params, beta, y, masks, nudge)
        _check_finite(new, t)
        res = model.residual(new, state)
        state = new
        if record:
            snaps.append(state.copy())
    return PhaseResult(state, res, model.readout(params, state), snaps, steps)


def free_phase(x, params, T, masks=None, record=False, s0=None):
    """Iterate the beta = 0 dynamics ``T`` times from ``s0`` (zeros by default)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    state = model.zero_state(params.topology, x.shape[0]) if s0 is None else s0.copy()
    return _run(x, params, state, T, 0.0, None, masks, record, Nudge.INSIDE)


def nudged_phase(x, y, params, s_start, beta, K, masks=None, record=False, nudge=Nudge.INSIDE):
    """``K`` steps of nudged dynamics with strength ``beta`` (scalar or per example)."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    return _run(x, params, s_start.copy(), K, beta, y, masks, record, nudge)


def transient_record(x, y, params, s_star, beta, K, masks=None, nudge=Nudge.INSIDE):
    """Truncated estimates ``(dPhi/dtheta(s_t^beta) - dPhi/dtheta(s_*)) / beta`` for t = 1..K.

    Returns a list of ``name -> array`` dicts, one per step (``w_out`` excluded).
    """
    if params.topology.scheme is not Scheme.SYMMETRIC:
        raise model.UnsupportedSchemeError("transients are defined for symmetric connections")
    if beta == 0.0:
        raise ValueError("beta must be non-zero")
    ref = model.dphi_dtheta(x, s_star, params, masks=masks)
    run = nudged_phase(x, y, params, s_star, beta, K, masks, record=True, nudge=nudge)
    out = []
    for snap in run.snapshots:
        cur = model.dphi_dtheta(x, snap, params, masks=masks)
        out.append({k: (cur[k] - ref[k]) / beta for k in ref})
    return out


def write_transient_csv(path, transients, bptt_grads, index=None):
    """Dump ``layer, t, estimator_value, bptt_value`` rows for curve plotting.

    ``bptt_grads[t-1]`` is the truncated BPTT gradient after ``t`` steps; its
    negation is written so both columns estimate the descent direction.
    ``index`` maps tensor name to the flat coordinate to dump (default 0).
    """
    index = index or {}
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["layer", "t", "estimator_value", "bptt_value"])
        for t, (est, bp) in enumerate(zip(transients, bptt_grads), start=1):
            for name in est:
                i = index.get(name, 0)
                wr.writerow([name, t, repr(float(est[name].ravel()[i])),
                             repr(float(-bp[name].ravel()[i]))])
