"""Pre-norm transformer encoder with an appended CLS token.

There are no positional encodings, so the CLS output does not depend on the
order of the input tokens; time enters only through the date embedding.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .layers import param, trunc_normal


class EncoderError(ValueError):
    pass


def _init_layer(rng, d):
    p = {"ln1_g": param(np.ones(d)), "ln1_b": param(np.zeros(d))}
    for name in ("q", "k", "v", "o"):
        p[f"w{name}"] = param(trunc_normal(rng, (d, d)))
        # A key bias adds q.b_k to every score of a query, which the softmax
        # cancels; it would be a parameter with an identically zero gradient.
        if name != "k":
            p[f"b{name}"] = param(np.zeros(d))
    p["ln2_g"] = param(np.ones(d))
    p["ln2_b"] = param(np.zeros(d))
    p["ff_w1"] = param(trunc_normal(rng, (d, 4 * d)))
    p["ff_b1"] = param(np.zeros(4 * d))
    p["ff_w2"] = param(trunc_normal(rng, (4 * d, d)))
    p["ff_b2"] = param(np.zeros(d))
    return p


@dataclass
class EncoderParams:
    d: int
    n_heads: int
    layers: list
    cls: nc.Tensor
    final_ln: dict  # empty when there are no layers

    @classmethod
    def init(cls, rng, d, n_layers=2, n_heads=4):
        if n_heads < 1 or d % n_heads:
            raise EncoderError(f"width {d} is not divisible by {n_heads} heads")
        layers = [_init_layer(rng, d) for _ in range(n_layers)]
        cls_vec = param(trunc_normal(rng, (d,)))
        final = {}
        if n_layers:
            final = {"g": param(np.ones(d)), "b": param(np.zeros(d))}
        return cls(d, n_heads, layers, cls_vec, final)

    @property
    def n_layers(self):
        return len(self.layers)

    def named_tensors(self):
        out = {"encoder.cls": self.cls}
        for i, layer in enumerate(self.layers):
            for k, t in layer.items():
                out[f"encoder.layers.{i}.{k}"] = t
        for k, t in self.final_ln.items():
            out[f"encoder.final_ln.{k}"] = t
        return out


def _linear(x, p, name):
    y = nc.matmul(x, p[f"w{name}"])
    bias = p.get(f"b{name}")
    return y if bias is None else nc.add(y, bias)


def _split_heads(x, n_heads):
    n, d = x.shape
    return nc.transpose(nc.reshape(x, (n, n_heads, d // n_heads)), (1, 0, 2))


def _attention(a, q_rows, p, n_heads):
    """Multi-head attention of ``q_rows`` over all rows of ``a``; returns (out, probs)."""
    d = a.shape[1]
    dh = d // n_heads
    q = _split_heads(_linear(q_rows, p, "q"), n_heads)  # (h, nq, dh)
    k = _split_heads(_linear(a, p, "k"), n_heads)  # (h, n, dh)
    v = _split_heads(_linear(a, p, "v"), n_heads)
    scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    probs = nc.softmax_rows(scores)  # (h, nq, n)
    o = nc.transpose(nc.matmul(probs, v), (1, 0, 2))  # (nq, h, dh)
    o = nc.reshape(o, (q_rows.shape[0], d))
    return _linear(o, p, "o"), probs


def _block(h, p, n_heads, cls_only, dropout, rng):
    """One pre-norm block. With ``cls_only`` only the last (CLS) row is updated."""
    a = nc.layer_norm(h, p["ln1_g"], p["ln1_b"])
    if cls_only:
        last = [h.shape[0] - 1]
        h = nc.embedding_lookup(h, last)
        q_rows = nc.embedding_lookup(a, last)
    else:
        q_rows = a
    attn, probs = _attention(a, q_rows, p, n_heads)
    h = nc.add(h, nc.dropout(attn, dropout, rng))
    b = nc.layer_norm(h, p["ln2_g"], p["ln2_b"])
    ff = nc.relu(nc.add(nc.matmul(b, p["ff_w1"]), p["ff_b1"]))
    ff = nc.add(nc.matmul(ff, p["ff_w2"]), p["ff_b2"])
    return nc.add(h, nc.dropout(ff, dropout, rng)), probs


def _with_cls(tokens, params):
    x = tokens.tokens if hasattr(tokens, "tokens") else tokens
    if x.ndim != 2 or x.shape[0] < 1:
        raise EncoderError(f"need a non-empty (n_tokens, d) matrix, got shape {x.shape}")
    if x.shape[1] != params.d:
        raise EncoderError(f"token width {x.shape[1]} does not match encoder width {params.d}")
    return nc.concat_rows([x, nc.reshape(params.cls, (1, params.d))])


def encode(tokens, params, dropout=0.0, rng=None):
    """CLS output of the final layer for a TokenMatrix (or raw token Tensor).

    Attention is unmasked over [tokens; CLS]. The last layer only computes
    the CLS row, which is all the head consumes.
    """
    h = _with_cls(tokens, params)
    if params.n_layers == 0:
        return params.cls
    for i, layer in enumerate(params.layers):
        h, _ = _block(h, layer, params.n_heads, i == params.n_layers - 1, dropout, rng)
    h = nc.layer_norm(h, params.final_ln["g"], params.final_ln["b"])
    return nc.reshape(h, (params.d,))


def attention_probe(tokens, params, layer, head):
    """CLS-query attention distribution over [tokens; CLS] at ``layer``/``head``."""
    if not 0 <= layer < params.n_layers:
        raise EncoderError(f"layer {layer} out of range for {params.n_layers} layers")
    if not 0 <= head < params.n_heads:
        raise EncoderError(f"head {head} out of range for {params.n_heads} heads")
    with nc.no_grad():
        h = _with_cls(tokens, params)
        for i in range(layer):
            h, _ = _block(h, params.layers[i], params.n_heads, False, 0.0, None)
        _, probs = _block(h, params.layers[layer], params.n_heads, True, 0.0, None)
    return probs.data[head, 0].copy()
