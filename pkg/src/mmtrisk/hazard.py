"""Risk head: non-negative interval scores and the additive-hazard transform.

``head_forward`` maps the CLS output to six scores L0..L5 through an MLP
followed by ReLU. The cumulative probability at horizon j is the sigmoid of
the running sum L0 + ... + Lj, so predictions never decrease with horizon.
The training loss works on those running sums (logits) directly.
"""

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .cohort import N_HORIZONS
from .layers import init_mlp, mlp, param

# prefix_sum(L) == L @ _UPPER
_UPPER = np.triu(np.ones((N_HORIZONS, N_HORIZONS)))

# Output bias of the score MLP starts positive. At init the CLS output barely
# depends on the input, so a zero-centred pre-activation would leave roughly
# half of the six ReLUs dead for every patient, with no gradient to revive them.
SCORE_BIAS_INIT = 0.1


class HazardError(ValueError):
    pass


@dataclass
class HeadParams:
    z: dict  # MLP d -> d -> 6
    offset: nc.Tensor  # shared baseline log-odds added to every running sum

    @classmethod
    def init(cls, rng, d, offset=-3.0):
        z = init_mlp(rng, d, d, N_HORIZONS)
        z["b2"].data[:] = SCORE_BIAS_INIT
        return cls(z, param(np.array([float(offset)])))

    def named_tensors(self):
        out = {f"head.z.{k}": t for k, t in self.z.items()}
        out["head.offset"] = self.offset
        return out


def head_forward(cls_out, params):
    """Six non-negative interval scores from a CLS vector (Tensor of shape (d,))."""
    d = params.z["w1"].shape[0]
    if cls_out.shape != (d,):
        raise HazardError(f"CLS vector has shape {cls_out.shape}, head expects ({d},)")
    pre = mlp(nc.reshape(cls_out, (1, d)), params.z)
    return nc.reshape(nc.relu(pre), (N_HORIZONS,))


def hazard_logits(interval_scores, offset=None):
    """Running sums of the interval scores (plus the optional baseline offset)."""
    s = nc.reshape(nc.matmul(nc.reshape(interval_scores, (1, N_HORIZONS)), nc.Tensor(_UPPER)),
                   (N_HORIZONS,))
    if offset is None:
        return s
    spread = nc.matmul(nc.reshape(offset, (1, 1)), nc.Tensor(np.ones((1, N_HORIZONS))))
    return nc.add(s, nc.reshape(spread, (N_HORIZONS,)))


def additive_hazard(interval_scores, offset=0.0):
    """Cumulative probabilities sigmoid(offset + L0 + sum_{k=1..j} Lk) for j = 0..5."""
    scores = np.asarray(interval_scores, dtype=np.float64)
    if scores.shape != (N_HORIZONS,):
        raise HazardError(f"expected {N_HORIZONS} interval scores, got shape {scores.shape}")
    if np.any(scores < 0):
        raise HazardError(f"interval scores must be non-negative, got {scores.tolist()}")
    return nc.sigmoid(nc.Tensor(np.cumsum(scores) + offset)).data


def masked_bce(logits, targets, mask):
    """Mean binary cross-entropy over unmasked horizons, computed from logits.

    ``logits`` are the running sums whose sigmoid is the cumulative
    probability. Uses softplus(s) - y*s, which is exact for any s.
    """
    m = np.asarray(mask, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    n = m.sum()
    if n == 0:
        raise HazardError("fully censored example: every horizon is masked")
    s = logits if isinstance(logits, nc.Tensor) else nc.Tensor(logits)
    per = nc.sub(nc.softplus(s), nc.mul(s, nc.Tensor(y)))
    return nc.scale(nc.sum_all(nc.mul(per, nc.Tensor(m))), 1.0 / n)


def probs_to_logits(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)
