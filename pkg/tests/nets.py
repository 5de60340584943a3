"""Seeded test networks shared across test modules."""
import numpy as np

from eqprop.model import ConvSpec, Head, Scheme, Topology, init_params


def make_dense(seed=0, sizes=(8, 10, 8, 4), head=Head.SQUARED_ERROR, scheme=Scheme.SYMMETRIC,
               scale=1.5, batch=3):
    """Seeded dense net with inputs and one-hot targets."""
    rng = np.random.default_rng(seed)
    top = Topology((sizes[0],), (), sizes[1:], head, scheme)
    params = init_params(top, rng, scale)
    x = rng.uniform(0, 1, (batch, sizes[0]))
    y = np.eye(sizes[-1])[rng.integers(0, sizes[-1], batch)]
    return top, params, x, y


def make_conv(seed=0, head=Head.SOFTMAX, scheme=Scheme.SYMMETRIC, batch=2, scale=1.0):
    """Two conv layers (one padded) plus a small fc stack on 1x8x8 inputs."""
    rng = np.random.default_rng(seed)
    fc = (6, 4) if head is Head.SOFTMAX else (4,)
    top = Topology((1, 8, 8), (ConvSpec(3, 3, 1, 2), ConvSpec(4, 2, 0, 2)), fc, head, scheme)
    params = init_params(top, rng, scale)
    x = rng.uniform(0, 1, (batch, 1, 8, 8))
    y = np.eye(4)[rng.integers(0, 4, batch)]
    return top, params, x, y
