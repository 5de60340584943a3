"""Network topology, parameters, state, the primitive function and one-step dynamics.

Layers are numbered ``1..L`` as in the learning rules: ``s^0 = x`` is the
static input and ``w_n`` maps ``s^{n-1}`` to ``s^n``. The first ``n_conv``
layers are convolutional (conv -> bias -> max-pool), the rest fully connected.
With the squared-error head the last fully-connected layer is the output
``s^L = y_hat`` and is part of the state; with the softmax head the last entry
of ``Topology.fc`` is a readout ``w_out`` applied to ``s^L`` outside the dynamics.

All arrays carry a leading batch dimension.
"""
from dataclasses import dataclass, field
from enum import Enum
import math

import numpy as np

from . import numerics as nm


class Scheme(str, Enum):
    SYMMETRIC = "symmetric"
    ASYMMETRIC = "asymmetric"


class Head(str, Enum):
    SQUARED_ERROR = "squared_error"
    SOFTMAX = "softmax"


class Nudge(str, Enum):
    # INSIDE: s = sigma(dPhi/ds - beta dl/ds); OUTSIDE: s = sigma(dPhi/ds) - beta dl/ds
    INSIDE = "inside"
    OUTSIDE = "outside"


class UnsupportedSchemeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int
    padding: int = 0
    pool: int = 2


@dataclass(frozen=True)
class Topology:
    input_shape: tuple
    conv: tuple = ()
    fc: tuple = (10,)
    head: Head = Head.SOFTMAX
    scheme: Scheme = Scheme.SYMMETRIC
    state_shapes: tuple = field(init=False, repr=False, compare=False)
    conv_shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("input_shape", tuple(int(d) for d in self.input_shape))
        set_("conv", tuple(c if isinstance(c, ConvSpec) else ConvSpec(*c) for c in self.conv))
        set_("fc", tuple(int(d) for d in self.fc))
        set_("head", Head(self.head))
        set_("scheme", Scheme(self.scheme))
        if not self.fc:
            raise ValueError("at least one fully-connected layer (the output) is required")
        if self.conv and len(self.input_shape) != 3:
            raise ValueError(f"conv layers need a (C,H,W) input, got {self.input_shape}")
        if self.head is Head.SOFTMAX and self.n_layers < 1:
            raise ValueError("softmax head needs at least one state layer before the readout")

        shapes, conv_shapes = [], []
        prev = self.input_shape
        for spec in self.conv:
            c, h, w = prev
            hc = h + 2 * spec.padding - spec.kernel + 1
            wc = w + 2 * spec.padding - spec.kernel + 1
            if hc < 1 or wc < 1 or hc < spec.pool or wc < spec.pool:
                raise ValueError(f"conv layer {spec} does not fit input {prev}")
            conv_shapes.append((spec.channels, hc, wc))
            prev = (spec.channels, hc // spec.pool, wc // spec.pool)
            shapes.append(prev)
        n_state_fc = len(self.fc) if self.head is Head.SQUARED_ERROR else len(self.fc) - 1
        for d in self.fc[:n_state_fc]:
            shapes.append((d,))
        set_("state_shapes", tuple(shapes))
        set_("conv_shapes", tuple(conv_shapes))

    @property
    def n_conv(self):
        return len(self.conv)

    @property
    def n_fc(self):
        return len(self.fc)

    @property
    def n_tot(self):
        return self.n_conv + self.n_fc

    @property
    def n_layers(self):
        """Number of state layers L (``n_tot`` or ``n_tot - 1`` with a readout)."""
        return self.n_tot if self.head is Head.SQUARED_ERROR else self.n_tot - 1

    @property
    def n_classes(self):
        return self.fc[-1]

    def is_conv(self, n):
        return n <= self.n_conv

    def prev_shape(self, n):
        return self.input_shape if n == 1 else self.state_shapes[n - 2]

    def weight_shape(self, n):
        prev = self.prev_shape(n)
        if self.is_conv(n):
            spec = self.conv[n - 1]
            return (spec.channels, prev[0], spec.kernel, spec.kernel)
        return (self.state_shapes[n - 1][0], math.prod(prev))

    def bias_shape(self, n):
        return (self.state_shapes[n - 1][0],)

    @property
    def w_out_shape(self):
        return (self.n_classes, math.prod(self.state_shapes[-1]))

    def has_backward(self, n):
        return self.scheme is Scheme.ASYMMETRIC and n >= 2

    def param_shapes(self):
        """Ordered ``name -> shape`` for every parameter tensor."""
        out = {}
        for n in range(1, self.n_layers + 1):
            out[f"w{n}"] = self.weight_shape(n)
            out[f"b{n}"] = self.bias_shape(n)
            if self.has_backward(n):
                out[f"wb{n}"] = self.weight_shape(n)
        if self.head is Head.SOFTMAX:
            out["w_out"] = self.w_out_shape
        return out

    def layer_of(self, name):
        """Parameterized-layer index (1-based) a tensor belongs to; w_out is last."""
        if name == "w_out":
            return self.n_tot
        return int(name.lstrip("wb"))

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "conv": [[c.channels, c.kernel, c.padding, c.pool] for c in self.conv],
            "fc": list(self.fc),
            "head": self.head.value,
            "scheme": self.scheme.value,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_shape=tuple(d["input_shape"]),
            conv=tuple(ConvSpec(*c) for c in d.get("conv", ())),
            fc=tuple(d["fc"]),
            head=d.get("head", Head.SOFTMAX),
            scheme=d.get("scheme", Scheme.SYMMETRIC),
        )


@dataclass
class Params:
    """Parameter tensors keyed ``w{n}``, ``b{n}``, ``wb{n}`` (backward) and ``w_out``."""

    topology: Topology
    tensors: dict

    def __post_init__(self):
        expected = self.topology.param_shapes()
        if set(expected) != set(self.tensors):
            raise ValueError(
                f"parameter names {sorted(self.tensors)} do not match topology {sorted(expected)}"
            )
        for k, shape in expected.items():
            arr = np.ascontiguousarray(self.tensors[k], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ValueError(f"{k}: shape {arr.shape} != expected {tuple(shape)}")
            self.tensors[k] = arr
        self.tensors = {k: self.tensors[k] for k in expected}

    def w(self, n):
        return self.tensors[f"w{n}"]

    def b(self, n):
        return self.tensors[f"b{n}"]

    def wb(self, n):
        """Weights used by the top-down pass out of layer n."""
        return self.tensors.get(f"wb{n}", self.tensors[f"w{n}"])

    @property
    def w_out(self):
        return self.tensors.get("w_out")

    def names(self):
        return list(self.tensors)

    def copy(self):
        return Params(self.topology, {k: v.copy() for k, v in self.tensors.items()})

    def n_params(self):
        return sum(v.size for v in self.tensors.values())


def init_params(topology, rng, scale=1.0):
    """PyTorch-default uniform Kaiming init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Forward and backward weights are drawn independently.
    """
    tensors = {}
    for name, shape in topology.param_shapes().items():
        if name.startswith("b"):
            fan_in = math.prod(topology.weight_shape(int(name[1:]))[1:])
        else:
            fan_in = math.prod(shape[1:])
        bound = scale / math.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return Params(topology, tensors)


@dataclass
class NetState:
    """State layers ``s^1..s^L`` (batched) and the pooling indices of the last step."""

    layers: list
    indices: list = None

    def __post_init__(self):
        if self.indices is None:
            self.indices = [None] * len(self.layers)

    @property
    def batch_size(self):
        return self.layers[0].shape[0]

    def copy(self):
        return NetState(
            [s.copy() for s in self.layers],
            [None if i is None else i.copy() for i in self.indices],
        )

    def flat(self):
        """All layers concatenated per example, shape (B, total)."""
        return np.concatenate([s.reshape(s.shape[0], -1) for s in self.layers], axis=1)


def zero_state(topology, batch_size):
    return NetState([np.zeros((batch_size,) + tuple(s)) for s in topology.state_shapes])


def residual(a, b):
    """Max-abs difference between two states."""
    return max(float(np.max(np.abs(u - v))) if u.size else 0.0 for u, v in zip(a.layers, b.layers))


# ----------------------------------------------------------------------------
# internals shared by dynamics, Phi and learning rules


def _masked(state, masks):
    if not masks:
        return list(state.layers)
    return [s * masks[n] if n in masks else s for n, s in enumerate(state.layers, start=1)]


def _below(x, eff, n):
    return x if n == 1 else eff[n - 2]


def _conv_forward(topology, w, src, n):
    """Bias-free ``w_n ⋆ src`` and its pooled values + argmax offsets."""
    spec = topology.conv[n - 1]
    z = nm.conv2d(w, src, pad=spec.padding)
    v, ind = nm.maxpool(z, spec.pool)
    return z.shape, v, ind


def _as_batch_beta(beta, batch, ndim):
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim == 0:
        return float(beta)
    if beta.shape != (batch,):
        raise ValueError(f"per-example beta must have shape ({batch},), got {beta.shape}")
    return beta.reshape((batch,) + (1,) * (ndim - 1))


def readout_logits(params, state):
    return nm.flatten(state.layers[-1]) @ params.w_out.T


def readout(params, state):
    """Softmax prediction ``softmax(w_out . s^L)``; ``s^L`` itself for squared error."""
    if params.topology.head is Head.SOFTMAX:
        return nm.softmax(readout_logits(params, state))
    return nm.flatten(state.layers[-1])


def loss(output, y, head):
    """Per-example cost.

    Squared error: ``0.5 * ||output - y||^2``. Softmax head: ``output`` are the
    logits ``w_out . s`` and the cost is the cross-entropy of their softmax.
    """
    output = np.asarray(output, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if output.shape != y.shape:
        raise nm.ShapeError(f"output shape {output.shape} != target shape {y.shape}")
    if Head(head) is Head.SQUARED_ERROR:
        return 0.5 * np.sum((output - y) ** 2, axis=-1)
    return -np.sum(y * nm.log_softmax(output), axis=-1)


def state_loss(params, state, y):
    if params.topology.head is Head.SOFTMAX:
        return loss(readout_logits(params, state), y, Head.SOFTMAX)
    return loss(nm.flatten(state.layers[-1]), y, Head.SQUARED_ERROR)


def loss_grad_state(params, state, y):
    """``dl/ds^L`` for the configured head, shaped like ``s^L``."""
    top = state.layers[-1]
    if params.topology.head is Head.SOFTMAX:
        err = nm.softmax(readout_logits(params, state)) - y
        return (err @ params.w_out).reshape(top.shape)
    return top - np.asarray(y).reshape(top.shape)


def preactivations(x, state, params, masks=None):
    """Per-layer input to sigma, i.e. ``dPhi/ds^n`` in the symmetric scheme.

    Returns ``(pre, indices)`` where ``indices[n-1]`` are the forward pooling
    offsets of conv layer n computed from this state.
    """
    top = params.topology
    L = top.n_layers
    eff = _masked(state, masks)
    pre = [None] * L
    fwd_ind = [None] * L
    for n in range(1, L + 1):
        src = _below(x, eff, n)
        if top.is_conv(n):
            zshape, v, ind = _conv_forward(top, params.w(n), src, n)
            pre[n - 1] = v + params.b(n)[None, :, None, None]
            fwd_ind[n - 1] = ind
            if n >= 2:
                if top.has_backward(n):
                    _, _, tind = _conv_forward(top, params.wb(n), src, n)
                else:
                    tind = ind
                u = nm.unpool(eff[n - 1], tind, zshape, top.conv[n - 1].pool)
                td = nm.conv2d_transpose(params.wb(n), u, pad=top.conv[n - 1].padding)
                pre[n - 2] = pre[n - 2] + td
        else:
            flat_src = nm.flatten(src)
            pre[n - 1] = flat_src @ params.w(n).T + params.b(n)
            if n >= 2:
                td = eff[n - 1] @ params.wb(n)
                pre[n - 2] = pre[n - 2] + td.reshape(pre[n - 2].shape)
    if masks:
        for n, m in masks.items():
            pre[n - 1] = pre[n - 1] * m
    return pre, fwd_ind


def step(x, state, params, beta=0.0, y=None, masks=None, nudge=Nudge.INSIDE):
    """One synchronous update of every layer from the state at time t.

    Returns ``(new_state, y_hat_t)`` where ``y_hat_t`` is the prediction read
    from the incoming state (the one that drives the nudge).
    """
    top = params.topology
    pre, ind = preactivations(x, state, params, masks)
    y_hat = readout(params, state)
    nudging = not (np.isscalar(beta) and beta == 0.0)
    if nudging:
        if y is None:
            raise ValueError("a target y is required when beta != 0")
        grad = loss_grad_state(params, state, y)
        b = _as_batch_beta(beta, grad.shape[0], grad.ndim)
        push = -b * grad
    new = []
    for n in range(1, top.n_layers + 1):
        p = pre[n - 1]
        if nudging and n == top.n_layers:
            if Nudge(nudge) is Nudge.INSIDE:
                s = nm.hard_sigmoid(p + push)
            else:
                s = nm.hard_sigmoid(p) + push
        else:
            s = nm.hard_sigmoid(p)
        new.append(s)
    return NetState(new, ind), y_hat


def _require(params, scheme=None, head=None):
    top = params.topology
    if scheme is not None and top.scheme is not scheme:
        raise UnsupportedSchemeError(f"expected {scheme.value} scheme, topology is {top.scheme.value}")
    if head is not None and top.head is not head:
        raise ValueError(f"expected {head.value} head, topology is {top.head.value}")


def step_sym_sq(x, state, params, beta=0.0, y=None, masks=None, nudge=Nudge.INSIDE):
    _require(params, Scheme.SYMMETRIC, Head.SQUARED_ERROR)
    return step(x, state, params, beta, y, masks, nudge)[0]


def step_sym_ce(x, state, params, beta=0.0, y=None, masks=None, nudge=Nudge.INSIDE):
    _require(params, Scheme.SYMMETRIC, Head.SOFTMAX)
    return step(x, state, params, beta, y, masks, nudge)


def step_asym_ce(x, state, params, beta=0.0, y=None, masks=None, nudge=Nudge.INSIDE):
    _require(params, Scheme.ASYMMETRIC, Head.SOFTMAX)
    return step(x, state, params, beta, y, masks, nudge)


def phi(x, state, params, masks=None):
    """Primitive function per example, shape (B,). Symmetric scheme only."""
    top = params.topology
    if top.scheme is not Scheme.SYMMETRIC:
        raise UnsupportedSchemeError("phi is only defined for symmetric connections")
    eff = _masked(state, masks)
    total = np.zeros(state.batch_size)
    for n in range(1, top.n_layers + 1):
        src = _below(x, eff, n)
        if top.is_conv(n):
            _, v, _ = _conv_forward(top, params.w(n), src, n)
            v = v + params.b(n)[None, :, None, None]
        else:
            v = nm.flatten(src) @ params.w(n).T + params.b(n)
        total += np.sum((eff[n - 1] * v).reshape(v.shape[0], -1), axis=1)
    return total


def pseudo_phi(n, x, state, params, beta=0.0, y=None):
    """Per-layer pseudo-primitive whose ``s^n``-gradient gives the asymmetric dynamics.

    ``s^n . (w^f_n ⋆ s^{n-1}) + s^{n+1} . (w^b_{n+1} ⋆ s^n)`` (pooled for conv
    layers, with forward bias), plus ``beta * loss`` on the last layer. Summed
    over the batch.
    """
    top = params.topology
    L = top.n_layers
    layers = state.layers

    def pair(k, w, bias):
        src = _below(x, layers, k)
        if top.is_conv(k):
            _, v, _ = _conv_forward(top, w, src, k)
            if bias is not None:
                v = v + bias[None, :, None, None]
        else:
            v = nm.flatten(src) @ w.T
            if bias is not None:
                v = v + bias
        return float(np.sum(layers[k - 1] * v.reshape(layers[k - 1].shape)))

    total = pair(n, params.w(n), params.b(n))
    if n < L:
        total += pair(n + 1, params.wb(n + 1), None)
    elif beta != 0.0:
        total += beta * float(np.sum(state_loss(params, state, y)))
    return total


def _weights_for(coef, batch, ndim):
    if coef is None:
        return 1.0 / batch
    return np.asarray(coef, dtype=np.float64).reshape((batch,) + (1,) * (ndim - 1))


def layer_grad(x, post, src_layers, params, n, weight, coef=None, ind_layers=None):
    """Gradient of ``post . P(weight ⋆ s^{n-1})`` w.r.t. ``weight``, weighted per example.

    ``s^{n-1}`` is read from ``src_layers``. Pooling offsets come from
    ``weight ⋆ s^{n-1}`` evaluated on ``ind_layers`` (default ``src_layers``).
    """
    top = params.topology
    src = _below(x, src_layers, n)
    wpost = post * _weights_for(coef, post.shape[0], post.ndim)
    if top.is_conv(n):
        spec = top.conv[n - 1]
        isrc = src if ind_layers is None else _below(x, ind_layers, n)
        zshape, _, ind = _conv_forward(top, weight, isrc, n)
        u = nm.unpool(wpost, ind, zshape, spec.pool)
        return nm.conv2d_weight_grad(src, u, pad=spec.padding)
    return wpost.T @ nm.flatten(src)


def bias_grad(post, coef=None):
    wpost = post * _weights_for(coef, post.shape[0], post.ndim)
    if wpost.ndim == 4:
        return wpost.sum(axis=(0, 2, 3))
    return wpost.sum(axis=0)


def dphi_dtheta(x, state, params, coef=None, masks=None):
    """``dPhi/dtheta`` at ``state`` for every weight and bias (not ``w_out``).

    Contributions are weighted per example by ``coef`` (default: batch mean).
    """
    top = params.topology
    eff = _masked(state, masks)
    out = {}
    for n in range(1, top.n_layers + 1):
        out[f"w{n}"] = layer_grad(x, eff[n - 1], eff, params, n, params.w(n), coef)
        out[f"b{n}"] = bias_grad(eff[n - 1], coef)
    return out


def readout_update(params, state, y, coef=None):
    """``-(y_hat - y) . s^L^T`` for the softmax readout, weighted per example."""
    s = nm.flatten(state.layers[-1])
    err = nm.softmax(s @ params.w_out.T) - y
    w = _weights_for(coef, s.shape[0], 2)
    return -((err * w).T @ s)
