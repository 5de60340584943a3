"""Self-contained verification checks on small seeded networks.

Each check returns a :class:`Check` with the expected value, the observed
value, the tolerance and a verdict. ``run_checks`` drives them and
``write_report`` emits a text summary plus a CSV.
"""
from dataclasses import dataclass
import csv
import time

import numpy as np

from . import estimators as est
from . import numerics as nm
from . import oracle
from .estimators import EstimatorKind, GradEstimate
from .model import Head, Scheme, Topology, init_params
from .phases import free_phase, transient_record


@dataclass
class Check:
    name: str
    expected: str
    observed: float
    tolerance: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self, timing=True):
        verdict = "PASS" if self.passed else "FAIL"
        secs = f"[{self.seconds:.1f}s] " if timing else ""
        return (f"{verdict}  {self.name:<20} observed={self.observed:.3e}  "
                f"expected {self.expected} ({self.tolerance})  {secs}{self.detail}").rstrip()


def dense_net(seed=0, sizes=(8, 10, 8, 4), head=Head.SQUARED_ERROR, scheme=Scheme.SYMMETRIC,
              scale=1.5, batch=3):
    """Seeded dense network with inputs and one-hot targets (3 layers, 210 parameters by default)."""
    rng = np.random.default_rng(seed)
    top = Topology((sizes[0],), (), sizes[1:], head, scheme)
    params = init_params(top, rng, scale)
    x = rng.uniform(0, 1, (batch, sizes[0]))
    y = np.eye(sizes[-1])[rng.integers(0, sizes[-1], batch)]
    return params, x, y


def conv_net(seed=0, scheme=Scheme.SYMMETRIC, batch=2):
    rng = np.random.default_rng(seed)
    top = Topology((1, 8, 8), ((3, 3, 1, 2), (4, 2, 0, 2)), (6, 4), Head.SOFTMAX, scheme)
    params = init_params(top, rng)
    x = rng.uniform(0, 1, (batch, 1, 8, 8))
    y = np.eye(4)[rng.integers(0, 4, batch)]
    return params, x, y


def _max_abs(a, b):
    return max(float(np.max(np.abs(a[k] - b[k]))) for k in a)


def check_estimator_identity(beta=0.5, T=200, K=30):
    """Half-sum of the two signed one-sided estimates equals the symmetric estimate."""
    params, x, y = dense_net()
    fr = free_phase(x, params, T)
    plus = est.one_sided(x, y, params, T, K, beta, free=fr)
    minus = est.one_sided(x, y, params, T, K, -beta, free=fr)
    sym = est.symmetric(x, y, params, T, K, beta, free=fr)
    avg = {k: 0.5 * (plus.grads[k] + minus.grads[k]) for k in plus.grads}
    err = _max_abs(avg, sym.grads)
    return Check("estimator_identity", "0", err, "<= 1e-12", err <= 1e-12, f"beta={beta}")


BIAS_BETAS = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)


def check_bias_order(T=150, K=150):
    """Error-vs-beta slopes against finite differences: ~1 one-sided, ~2 symmetric."""
    params, x, y = dense_net()
    fit = oracle.bias_order_fit(x, y, params, T, K, BIAS_BETAS)
    ok1 = 0.7 <= fit.slope_one_sided <= 1.3
    ok2 = 1.7 <= fit.slope_symmetric <= 2.3
    detail = (f"one_sided={fit.slope_one_sided:.3f} symmetric={fit.slope_symmetric:.3f} "
              f"params={params.n_params()}")
    return Check("bias_order", "slope 2", fit.slope_symmetric,
                 "one-sided in [0.7,1.3], symmetric in [1.7,2.3]", ok1 and ok2, detail)


def check_transients(beta=1e-4, T=400, K=60):
    """Per-step EP estimates track truncated BPTT gradients (relative deviation < 1e-3)."""
    params, x, y = dense_net()
    bp = oracle.bptt(x, y, params, T, K)  # raises if not converged at T-K
    fr = free_phase(x, params, T)
    tr = transient_record(x, y, params, fr.state, beta, K)
    names = list(tr[0])
    worst = 0.0
    for t in range(1, K + 1):
        ep = np.concatenate([tr[t - 1][k].ravel() for k in names])
        ref = -np.concatenate([bp.at(t)[k].ravel() for k in names])
        worst = max(worst, float(np.linalg.norm(ep - ref) / np.linalg.norm(ref)))
    return Check("transients", "0", worst, "< 1e-3", worst < 1e-3,
                 f"beta={beta} K={K} residual(T-K)={bp.residual:.1e}")


def check_kp_recursion(eta=0.1, lam=0.1, steps=100):
    """Equal estimates + leakage contract the forward/backward gap by (1 - eta*lam) per step."""
    params, _, _ = conv_net(scheme=Scheme.ASYMMETRIC)
    pairs = est.leak_pairs(params)

    def gap():
        return np.sqrt(sum(np.sum((params.tensors[f] - params.tensors[b]) ** 2) for f, b in pairs))

    rng = np.random.default_rng(0)
    g0 = gap()
    worst = 0.0
    for t in range(1, steps + 1):
        grads = {k: rng.standard_normal(v.shape) for k, v in params.tensors.items()}
        for f, b in pairs:
            grads[b] = grads[f].copy()
        est.apply_update(params, GradEstimate(grads, EstimatorKind.KPVF_SYM, 1.0), eta, lam)
        worst = max(worst, abs(gap() - (1 - eta * lam) ** t * g0) / g0)
    return Check("kp_recursion", "0", worst, "<= 1e-12 relative", worst <= 1e-12,
                 f"eta={eta} lam={lam} t<={steps}")


def check_kp_fc_identity():
    """KP-VF forward and backward estimates coincide bit-for-bit on fully connected layers."""
    params, x, y = conv_net(scheme=Scheme.ASYMMETRIC)
    g = est.kp_vf_sym(x, y, params, 100, 20, 0.5)
    fc = [n for n in g.parts["bar_b"] if not params.topology.is_conv(n)]
    same = all(g.parts["bar_f"][n].tobytes() == g.parts["bar_b"][n].tobytes() for n in fc)
    worst = max(_max_abs({0: g.parts["bar_f"][n]}, {0: g.parts["bar_b"][n]}) for n in fc)
    return Check("kp_fc_identity", "0", worst, "bit-identical", same and bool(fc),
                 f"fc layers {fc}")


def check_oracle_agreement(T=150):
    """Full-depth BPTT against central finite differences of the steady-state loss."""
    worst, parts = 0.0, []
    nets = [("dense_se", dense_net()), ("dense_ce", dense_net(1, head=Head.SOFTMAX)),
            ("conv_ce", conv_net(4, batch=1))]
    for label, (params, x, y) in nets:
        g = oracle.bptt(x, y, params, T, T - 60, require_convergence=label != "conv_ce")
        fd = oracle.finite_diff(x, y, params, T)
        names = params.names()
        bp = -np.concatenate([g.full()[k].ravel() for k in names])
        ref = fd.flat(names)
        rel = float(np.linalg.norm(bp - ref) / np.linalg.norm(ref))
        parts.append(f"{label}={rel:.1e}")
        worst = max(worst, rel)
    return Check("oracle_agreement", "0", worst, "< 1e-5 relative", worst < 1e-5, " ".join(parts))


def check_adjoint():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10):
        w = rng.standard_normal((4, 3, 3, 3))
        x = rng.standard_normal((2, 3, 7, 6))
        y = rng.standard_normal(nm.conv2d(w, x, pad=1).shape)
        lhs = nm.gdot(nm.conv2d(w, x, pad=1), y)
        rhs = nm.gdot(x, nm.conv2d_transpose(w, y, pad=1))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    return Check("adjoint", "0", worst, "< 1e-10 relative", worst < 1e-10, f"backend={nm.backend()}")


CHECKS = {
    "estimator_identity": check_estimator_identity,
    "bias_order": check_bias_order,
    "transients": check_transients,
    "kp_recursion": check_kp_recursion,
    "kp_fc_identity": check_kp_fc_identity,
    "oracle_agreement": check_oracle_agreement,
    "adjoint": check_adjoint,
}


def run_checks(only=None, on_result=None):
    names = list(CHECKS) if not only else list(only)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks {unknown}; available: {list(CHECKS)}")
    results = []
    for name in names:
        t0 = time.perf_counter()
        try:
            c = CHECKS[name]()
        except Exception as exc:  # a crashing check is a failing check
            c = Check(name, "-", float("nan"), "-", False, f"error: {type(exc).__name__}: {exc}")
        c.seconds = time.perf_counter() - t0
        results.append(c)
        if on_result:
            on_result(c)
    return results


def write_report(results, text_path, csv_path):
    with open(text_path, "w") as fh:
        for c in results:
            fh.write(c.line(timing=False) + "\n")  # report files stay reproducible
        n = sum(c.passed for c in results)
        fh.write(f"{n}/{len(results)} checks passed\n")
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["check", "expected", "observed", "tolerance", "pass"])
        for c in results:
            wr.writerow([c.name, c.expected, repr(c.observed), c.tolerance, "pass" if c.passed else "fail"])
