import math

import numpy as np
import pytest

from eqprop import model
from eqprop import numerics as nm
from eqprop.model import (Head, NetState, Nudge, Params, Scheme, Topology,
                          UnsupportedSchemeError, init_params)
from tests.nets import make_conv, make_dense


def fd_state_grad(fn, state, layer, eps=1e-6):
    """Central differences of ``fn(state)`` w.r.t. every entry of one layer."""
    s = state.copy()
    arr = s.layers[layer]
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        up = fn(s)
        flat[i] = o - eps
        down = fn(s)
        flat[i] = o
        gf[i] = (up - down) / (2 * eps)
    return g


def random_state(top, batch, rng):
    return NetState([rng.uniform(0.05, 0.95, (batch,) + s) for s in top.state_shapes])


# ---------------------------------------------------------------- topology / params

def test_topology_shapes():
    top = Topology((3, 32, 32), ((64, 3, 1, 2), (128, 3, 1, 2), (256, 3, 1, 2), (512, 3, 0, 2)), (10,))
    assert top.state_shapes == ((64, 16, 16), (128, 8, 8), (256, 4, 4), (512, 1, 1))
    assert top.n_tot == 5 and top.n_layers == 4
    assert top.w_out_shape == (10, 512)
    assert "w_out" in top.param_shapes() and "w5" not in top.param_shapes()


def test_topology_squared_error_output_in_state():
    top = Topology((4,), (), (5, 3), Head.SQUARED_ERROR)
    assert top.state_shapes == ((5,), (3,))
    assert set(top.param_shapes()) == {"w1", "b1", "w2", "b2"}


def test_asymmetric_backward_weights():
    top, params, _, _ = make_conv(scheme=Scheme.ASYMMETRIC)
    names = set(top.param_shapes())
    assert "wb1" not in names and {"wb2", "wb3"} <= names
    assert {k for k in names if k.startswith("b")} == {"b1", "b2", "b3"}
    assert top.param_shapes()["wb2"] == top.param_shapes()["w2"]


def test_topology_round_trip():
    top, _, _, _ = make_conv(scheme=Scheme.ASYMMETRIC)
    assert Topology.from_dict(top.to_dict()) == top


def test_topology_rejects_bad_config():
    with pytest.raises(ValueError):
        Topology((4,), (), ())
    with pytest.raises(ValueError):
        Topology((1, 4, 4), ((2, 5, 0, 2),), (3,))
    with pytest.raises(ValueError):
        Topology((1, 4, 4), (), (3,), Head.SOFTMAX).param_shapes()  # no state layer


def test_params_validation():
    top = Topology((2,), (), (3,), Head.SQUARED_ERROR)
    with pytest.raises(ValueError, match="shape"):
        Params(top, {"w1": np.zeros((2, 3)), "b1": np.zeros(3)})
    with pytest.raises(ValueError, match="names"):
        Params(top, {"w1": np.zeros((3, 2))})


def test_init_bounds_and_independence():
    top, params, _, _ = make_conv(scheme=Scheme.ASYMMETRIC)
    for name, t in params.tensors.items():
        n = top.layer_of(name)
        fan_in = math.prod(top.weight_shape(n)[1:]) if name != "w_out" else top.w_out_shape[1]
        assert np.abs(t).max() <= 1 / math.sqrt(fan_in)
    assert not np.array_equal(params.w(2), params.wb(2))
    a = init_params(top, np.random.default_rng(5))
    b = init_params(top, np.random.default_rng(5))
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.names())


# ---------------------------------------------------------------- phi

def test_phi_zero_state(conv_net):
    top, params, x, _ = conv_net
    assert np.all(model.phi(x, model.zero_state(top, 2), params) == 0.0)


def test_phi_single_linear_layer():
    top = Topology((1,), (), (1,), Head.SQUARED_ERROR)
    params = Params(top, {"w1": np.array([[2.0]]), "b1": np.array([0.0])})
    assert model.phi(np.array([[3.0]]), NetState([np.array([[1.0]])]), params)[0] == 6.0


def test_phi_rejects_asymmetric():
    _, params, x, _ = make_conv(scheme=Scheme.ASYMMETRIC)
    with pytest.raises(UnsupportedSchemeError):
        model.phi(x, model.zero_state(params.topology, 2), params)


@pytest.mark.parametrize("maker", [
    lambda: make_dense(),
    lambda: make_dense(head=Head.SOFTMAX),
    lambda: make_conv(),
    lambda: make_conv(head=Head.SQUARED_ERROR),
])
def test_preactivation_is_phi_gradient(maker):
    top, params, x, _ = maker()
    state = random_state(top, x.shape[0], np.random.default_rng(11))
    pre, _ = model.preactivations(x, state, params)
    for n in range(top.n_layers):
        fd = fd_state_grad(lambda s: model.phi(x, s, params).sum(), state, n)
        np.testing.assert_allclose(pre[n], fd, rtol=1e-6, atol=1e-8)


# ---------------------------------------------------------------- step_sym_sq

def zero_params(top):
    return Params(top, {k: np.zeros(s) for k, s in top.param_shapes().items()})


def test_zero_weights_outside_nudge():
    top = Topology((3,), (), (4, 2), Head.SQUARED_ERROR)
    params = zero_params(top)
    x = np.ones((1, 3))
    y = np.array([[1.0, 0.0]])
    out = model.step_sym_sq(x, model.zero_state(top, 1), params, 0.3, y, nudge=Nudge.OUTSIDE)
    assert not out.layers[0].any()
    np.testing.assert_array_equal(out.layers[1], 0.3 * y)


def test_zero_weights_inside_nudge():
    top = Topology((3,), (), (4, 2), Head.SQUARED_ERROR)
    params = zero_params(top)
    y = np.array([[1.0, 0.0]])
    out = model.step_sym_sq(np.ones((1, 3)), model.zero_state(top, 1), params, 0.3, y)
    np.testing.assert_array_equal(out.layers[1], nm.hard_sigmoid(0.3 * y))


def test_fixed_point_unchanged(dense):
    top, params, x, _ = dense
    s = model.zero_state(top, x.shape[0])
    for _ in range(2000):
        s = model.step_sym_sq(x, s, params)
    assert model.residual(model.step_sym_sq(x, s, params), s) < 1e-12


def hand_net():
    top = Topology((2,), (), (2, 2), Head.SQUARED_ERROR)
    params = Params(top, {
        "w1": np.array([[0.5, 0.0], [0.0, 0.25]]), "b1": np.array([0.0, 0.5]),
        "w2": np.array([[1.0, 0.0], [0.5, 1.0]]), "b2": np.array([0.2, 0.0]),
    })
    x = np.array([[1.0, 2.0]])
    s = NetState([np.array([[0.2, 0.4]]), np.array([[0.6, 0.1]])])
    return top, params, x, s


def test_hand_computed_2_2_2():
    _, params, x, s = hand_net()
    # pre1 = w1 x + b1 + w2^T s2 = [1.15, 1.1]; pre2 = w2 s1 + b2 = [0.4, 0.5]
    out = model.step_sym_sq(x, s, params)
    np.testing.assert_allclose(out.layers[0], [[0.575, 0.55]], rtol=1e-15)
    np.testing.assert_allclose(out.layers[1], [[0.2, 0.25]], rtol=1e-15)
    y = np.array([[1.0, 0.0]])
    # nudge -beta (s2 - y) = [0.2, -0.05]
    out = model.step_sym_sq(x, s, params, 0.5, y, nudge=Nudge.OUTSIDE)
    np.testing.assert_allclose(out.layers[1], [[0.4, 0.2]], rtol=1e-15)
    out = model.step_sym_sq(x, s, params, 0.5, y)
    np.testing.assert_allclose(out.layers[1], [[0.3, 0.225]], rtol=1e-15)
    np.testing.assert_allclose(out.layers[0], [[0.575, 0.55]], rtol=1e-15)


def test_nudge_requires_target(dense):
    top, params, x, _ = dense
    with pytest.raises(ValueError, match="target"):
        model.step_sym_sq(x, model.zero_state(top, 3), params, 0.5)


def test_step_wrappers_check_configuration(dense, conv_net):
    _, dparams, dx, _ = dense
    with pytest.raises(ValueError):
        model.step_sym_ce(dx, model.zero_state(dparams.topology, 3), dparams)
    _, cparams, cx, _ = conv_net
    with pytest.raises(UnsupportedSchemeError):
        model.step_asym_ce(cx, model.zero_state(cparams.topology, 2), cparams)


@pytest.mark.parametrize("nudge", list(Nudge))
def test_activations_in_range(nudge):
    top, params, x, y = make_dense(scale=3.0)
    beta = 0.7
    s = model.zero_state(top, x.shape[0])
    for _ in range(60):
        prev = s
        s = model.step_sym_sq(x, s, params, beta, y, nudge=nudge)
        for layer in s.layers[:-1]:
            assert layer.min() >= 0.0 and layer.max() <= 1.0
        out = s.layers[-1]
        bound = abs(beta) * np.max(np.abs(y - prev.layers[-1])) if nudge is Nudge.OUTSIDE else 0.0
        assert out.min() >= -bound and out.max() <= 1.0 + bound


# ---------------------------------------------------------------- softmax head

def test_ce_free_step_independent_of_target(conv_net):
    top, params, x, y = conv_net
    s = random_state(top, 2, np.random.default_rng(1))
    a, ya = model.step_sym_ce(x, s, params, 0.0, y)
    b, yb = model.step_sym_ce(x, s, params, 0.0, 1.0 - y)
    assert all(np.array_equal(u, v) for u, v in zip(a.layers, b.layers))
    np.testing.assert_array_equal(ya, model.readout(params, s))
    np.testing.assert_array_equal(ya, yb)


def test_ce_zero_nudge_when_target_matches(conv_net):
    top, params, x, _ = conv_net
    s = random_state(top, 2, np.random.default_rng(2))
    y_hat = model.readout(params, s)
    free, _ = model.step_sym_ce(x, s, params)
    for nudge in Nudge:
        nudged, _ = model.step_sym_ce(x, s, params, 0.8, y_hat, nudge=nudge)
        for u, v in zip(free.layers, nudged.layers):
            np.testing.assert_allclose(u, v, atol=1e-15)


def test_ce_nudge_is_loss_gradient(conv_net):
    top, params, x, y = conv_net
    s = random_state(top, 2, np.random.default_rng(3))
    fd = fd_state_grad(lambda st: model.state_loss(params, st, y).sum(), s, top.n_layers - 1)
    np.testing.assert_allclose(model.loss_grad_state(params, s, y), fd, rtol=1e-7, atol=1e-10)
    beta = 0.4
    free, _ = model.step_sym_ce(x, s, params)
    nudged, _ = model.step_sym_ce(x, s, params, beta, y, nudge=Nudge.OUTSIDE)
    np.testing.assert_allclose(nudged.layers[-1] - free.layers[-1], -beta * fd, rtol=1e-6, atol=1e-10)


# ---------------------------------------------------------------- asymmetric

def as_asymmetric(params, backward=None):
    top = params.topology
    atop = Topology(top.input_shape, top.conv, top.fc, top.head, Scheme.ASYMMETRIC)
    t = {k: v.copy() for k, v in params.tensors.items()}
    for n in range(2, top.n_layers + 1):
        t[f"wb{n}"] = params.w(n).copy() if backward is None else backward(params.w(n))
    return Params(atop, t)


def test_asymmetric_equal_weights_bit_identical(conv_net):
    top, params, x, y = conv_net
    aparams = as_asymmetric(params)
    s = model.zero_state(top, 2)
    a = model.zero_state(aparams.topology, 2)
    for t in range(30):
        beta = 0.0 if t < 20 else 0.5
        s, ys = model.step_sym_ce(x, s, params, beta, y)
        a, ya = model.step_asym_ce(x, a, aparams, beta, y)
        for u, v in zip(s.layers, a.layers):
            assert u.tobytes() == v.tobytes()
        assert ys.tobytes() == ya.tobytes()


def test_zero_backward_weights_feedforward(conv_net):
    top, params, x, _ = conv_net
    aparams = as_asymmetric(params, np.zeros_like)
    state = random_state(top, 2, np.random.default_rng(4))
    pre, _ = model.preactivations(x, state, aparams)
    # feedforward: each layer depends only on the one below it
    below = x
    for n in range(1, top.n_layers + 1):
        if top.is_conv(n):
            _, v, _ = model._conv_forward(top, aparams.w(n), below, n)
            ref = v + aparams.b(n)[None, :, None, None]
        else:
            ref = nm.flatten(below) @ aparams.w(n).T + aparams.b(n)
        np.testing.assert_allclose(pre[n - 1], ref, rtol=1e-14)
        below = state.layers[n - 1]


@pytest.mark.parametrize("head", list(Head))
def test_asymmetric_matches_pseudo_phi(head):
    top, params, x, y = make_conv(head=head, scheme=Scheme.ASYMMETRIC, seed=7)
    state = random_state(top, 2, np.random.default_rng(5))
    pre, _ = model.preactivations(x, state, params)
    for n in range(1, top.n_layers + 1):
        fd = fd_state_grad(lambda s: model.pseudo_phi(n, x, s, params), state, n - 1)
        np.testing.assert_allclose(pre[n - 1], fd, rtol=1e-6, atol=1e-8)


def test_pseudo_phi_nudge_term():
    top, params, x, y = make_conv(scheme=Scheme.ASYMMETRIC, seed=8)
    state = random_state(top, 2, np.random.default_rng(6))
    L = top.n_layers
    beta = 0.3
    fd = fd_state_grad(lambda s: model.pseudo_phi(L, x, s, params, -beta, y), state, L - 1)
    pre, _ = model.preactivations(x, state, params)
    push = -beta * model.loss_grad_state(params, state, y)
    np.testing.assert_allclose(pre[L - 1] + push, fd, rtol=1e-6, atol=1e-8)
    new, _ = model.step_asym_ce(x, state, params, beta, y)
    np.testing.assert_allclose(new.layers[-1], nm.hard_sigmoid(fd), atol=1e-7)


# ---------------------------------------------------------------- loss

def test_loss_examples():
    y = np.array([0.0, 1.0, 0.0])
    assert model.loss(y, y, Head.SQUARED_ERROR) == 0.0
    assert np.isclose(model.loss(np.zeros(4), np.eye(4)[1], Head.SOFTMAX), math.log(4), rtol=1e-15)
    rng = np.random.default_rng(0)
    z, t = rng.standard_normal(5), np.eye(5)[2]
    assert np.isclose(model.loss(z, t, Head.SQUARED_ERROR), 0.5 * sum((z - t) ** 2))
    assert np.isclose(model.loss(z, t, Head.SOFTMAX), -math.log(math.exp(z[2]) / sum(np.exp(z))))
    assert model.loss(z, t, Head.SOFTMAX) >= 0
    with pytest.raises(nm.ShapeError):
        model.loss(z, t[:3], Head.SOFTMAX)


def test_dphi_dtheta_matches_finite_differences(conv_net):
    top, params, x, _ = conv_net
    state = random_state(top, 2, np.random.default_rng(9))
    g = model.dphi_dtheta(x, state, params)
    eps = 1e-6
    for name in ("w1", "b1", "w2", "w3", "b3"):
        theta = params.tensors[name].reshape(-1)
        for i in range(0, theta.size, max(1, theta.size // 7)):
            o = theta[i]
            theta[i] = o + eps
            up = model.phi(x, state, params).mean()
            theta[i] = o - eps
            down = model.phi(x, state, params).mean()
            theta[i] = o
            assert np.isclose(g[name].reshape(-1)[i], (up - down) / (2 * eps), rtol=1e-6, atol=1e-9)
