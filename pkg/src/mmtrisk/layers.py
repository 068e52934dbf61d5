"""Parameter initialisation and the small MLP used throughout the model."""

import numpy as np

from . import numcore as nc

INIT_STD = 0.02


def trunc_normal(rng, shape, std=INIT_STD):
    """Normal(0, std) resampled until every entry lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param(data):
    return nc.Tensor(data, requires_grad=True)


def init_mlp(rng, d_in, d_hidden, d_out):
    return {
        "w1": param(trunc_normal(rng, (d_in, d_hidden))),
        "b1": param(np.zeros(d_hidden)),
        "w2": param(trunc_normal(rng, (d_hidden, d_out))),
        "b2": param(np.zeros(d_out)),
    }


def mlp(x, p):
    """Two-layer perceptron with a ReLU between the layers; linear output."""
    h = nc.relu(nc.add(nc.matmul(x, p["w1"]), p["b1"]))
    return nc.add(nc.matmul(h, p["w2"]), p["b2"])


def mlp_shapes(p):
    return p["w1"].shape[0], p["w1"].shape[1], p["w2"].shape[1]
