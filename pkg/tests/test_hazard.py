import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmtrisk import numcore as nc
from mmtrisk.hazard import (
    HazardError,
    HeadParams,
    additive_hazard,
    hazard_logits,
    head_forward,
    masked_bce,
    probs_to_logits,
)


def sigma(x):
    return 1.0 / (1.0 + math.exp(-x))


@pytest.fixture
def head():
    return HeadParams.init(np.random.default_rng(0), 4)


class TestHeadForward:
    def test_zero_params_give_zero(self, head):
        for p in head.z.values():
            p.data[...] = 0.0
        assert head_forward(nc.Tensor(np.ones(4)), head).data.tolist() == [0.0] * 6

    def test_relu_clamp(self, head):
        # identity hidden layer on a positive input, output layer picks the pattern
        head.z["w1"].data = np.eye(4)
        head.z["b1"].data = np.zeros(4)
        head.z["w2"].data = np.zeros((4, 6))
        head.z["b2"].data = np.array([-1.0, 2.0, -3.0, 0.0, 1.0, 5.0])
        out = head_forward(nc.Tensor(np.ones(4)), head).data
        assert out.tolist() == [0.0, 2.0, 0.0, 0.0, 1.0, 5.0]

    def test_width_mismatch(self, head):
        with pytest.raises(HazardError, match="shape"):
            head_forward(nc.Tensor(np.ones(5)), head)

    def test_non_negative_random(self, rng):
        for _ in range(200):
            h = HeadParams.init(rng, 4)
            for p in h.z.values():
                p.data = rng.normal(size=p.shape)
            assert head_forward(nc.Tensor(rng.normal(size=4) * 3), h).data.min() >= 0.0


class TestAdditiveHazard:
    def test_zeros(self):
        assert additive_hazard(np.zeros(6)).tolist() == [0.5] * 6

    def test_first_interval_only(self):
        np.testing.assert_allclose(additive_hazard([1, 0, 0, 0, 0, 0]), [sigma(1.0)] * 6,
                                   rtol=0, atol=1e-15)
        assert abs(sigma(1.0) - 0.7310586) < 1e-7

    def test_prefix_sums(self):
        out = additive_hazard([0.2, 0.1, 0.1, 0.1, 0.1, 0.1])
        np.testing.assert_allclose(out, [sigma(x) for x in (0.2, 0.3, 0.4, 0.5, 0.6, 0.7)],
                                   rtol=0, atol=1e-15)

    def test_negative_rejected(self):
        with pytest.raises(HazardError, match="non-negative"):
            additive_hazard([0.1, -0.1, 0, 0, 0, 0])

    def test_wrong_length(self):
        with pytest.raises(HazardError):
            additive_hazard(np.zeros(5))

    @given(st.lists(st.floats(0.0, 5.0), min_size=6, max_size=6))
    def test_monotone_and_strict_where_positive(self, scores):
        out = additive_hazard(scores)
        assert np.all(np.diff(out) >= 0)
        for j in range(1, 6):
            if scores[j] > 1e-6 and out[j - 1] < 1 - 1e-9:
                assert out[j] > out[j - 1]

    def test_logits_match_numpy(self, rng):
        L = rng.random(6)
        off = nc.Tensor(np.array([-2.0]))
        np.testing.assert_allclose(hazard_logits(nc.Tensor(L), off).data, np.cumsum(L) - 2.0,
                                   rtol=1e-15)


class TestMaskedBce:
    def test_uniform_prediction(self):
        loss = masked_bce(probs_to_logits([0.5] * 6), [1] * 6, [1] * 6).item()
        assert abs(loss - math.log(2)) < 1e-12

    def test_mask_normalisation(self):
        logits = nc.Tensor(np.array([0.0, 0.0, 9.0, -4.0, 3.0, 1.0]))
        loss = masked_bce(logits, [0, 0, 1, 1, 1, 1], [1, 1, 0, 0, 0, 0]).item()
        assert abs(loss - math.log(2)) < 1e-12

    def test_near_perfect_prediction(self):
        y = np.array([0, 0, 1, 1, 1, 1])
        p = np.where(y == 1, 1 - 1e-6, 1e-6)
        assert masked_bce(probs_to_logits(p), y, [1] * 6).item() < 1e-5

    def test_fully_censored(self):
        with pytest.raises(HazardError, match="fully censored example"):
            masked_bce(np.zeros(6), [0] * 6, [0] * 6)

    def test_matches_probability_form(self, rng):
        s = rng.normal(size=6) * 3
        y = np.array([0, 1, 1, 1, 1, 1])
        m = np.array([1, 1, 1, 0, 1, 0])
        p = 1 / (1 + np.exp(-s))
        ref = -np.sum(m * (y * np.log(p) + (1 - y) * np.log(1 - p))) / m.sum()
        assert abs(masked_bce(s, y, m).item() - ref) < 1e-12

    def test_extreme_logits_stay_finite(self):
        loss = masked_bce(np.array([800.0, -800.0, 0, 0, 0, 0]), [0, 1, 0, 0, 0, 0], [1] * 6)
        assert math.isfinite(loss.item())

    def test_masked_horizons_get_zero_gradient(self, rng):
        s = nc.Tensor(rng.normal(size=6), requires_grad=True)
        nc.backward(masked_bce(s, [0, 0, 1, 1, 1, 1], [1, 1, 0, 1, 0, 0]))
        assert s.grad[2] == 0 and s.grad[4] == 0 and s.grad[5] == 0
        assert np.all(s.grad[[0, 1, 3]] != 0)

    def test_gradcheck_through_head(self, rng):
        h = HeadParams.init(rng, 4)
        for p in h.z.values():
            p.data = p.data + rng.normal(0, 0.5, size=p.shape)
        x = nc.Tensor(rng.normal(size=4))
        ps = list(h.named_tensors().values())

        def f():
            return masked_bce(hazard_logits(head_forward(x, h), h.offset),
                              [0, 0, 1, 1, 1, 1], [1, 1, 1, 1, 0, 0])

        assert nc.finite_diff_check(f, ps) < 1e-4
