import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from specbound.exit_policy import ActConfig, anneal_temperature, should_exit, top1_confidence

logit_vectors = arrays(np.float64, st.integers(2, 40),
                       elements=st.floats(-30, 30, allow_nan=False, allow_infinity=False))


class TestAnnealTemperature:
    def test_last_layer_is_one(self):
        assert anneal_temperature(12, 12, 0.2) == 1.0

    def test_no_annealing(self):
        assert all(anneal_temperature(l, 12, 0.0) == 1.0 for l in range(1, 13))

    def test_midpoint(self):
        assert anneal_temperature(16, 32, 0.2) == pytest.approx(1.1, abs=1e-15)

    def test_strictly_decreasing(self):
        temps = [anneal_temperature(l, 12, 0.5) for l in range(1, 13)]
        assert all(a > b for a, b in zip(temps, temps[1:]))

    @pytest.mark.parametrize("layer,alpha", [(0, 0.2), (13, 0.2), (3, -0.1)])
    def test_out_of_range(self, layer, alpha):
        with pytest.raises(ValueError):
            anneal_temperature(layer, 12, alpha)


class TestTop1:
    def test_uniform(self):
        token, p = top1_confidence(np.zeros(64))
        assert token == 0 and p == pytest.approx(1 / 64)

    def test_two_logits(self):
        token, p = top1_confidence(np.array([math.log(3), 0.0]), 1.0)
        assert token == 0 and p == pytest.approx(0.75, abs=1e-15)

    def test_two_logits_hot(self):
        token, p = top1_confidence(np.array([math.log(3), 0.0]), 2.0)
        assert token == 0 and p == pytest.approx(math.sqrt(3) / (math.sqrt(3) + 1), abs=1e-15)

    def test_huge_logits_are_stable(self):
        token, p = top1_confidence(np.array([1e300, 1e300 - 1e290, -1e300]))
        assert token == 0 and 0 < p <= 1

    @pytest.mark.parametrize("bad", [[np.nan, 0.0], [np.inf, 0.0], []])
    def test_rejects_bad_logits(self, bad):
        with pytest.raises(ValueError):
            top1_confidence(np.array(bad))

    def test_rejects_cold_temperature(self):
        with pytest.raises(ValueError):
            top1_confidence(np.ones(3), 0.5)


class TestShouldExit:
    def test_confident_exits(self):
        z = np.array([math.log(9), 0.0])  # p = 0.9 at T = 1
        d = should_exit(z, 12, ActConfig(0.2, 0.55, 12))
        assert d.exited and d.confidence == pytest.approx(0.9) and d.temperature == 1.0

    def test_annealing_only_suppresses(self):
        z = np.array([0.1, 0.0, -0.2])
        cold_p = top1_confidence(z)[1]
        d = should_exit(z, 1, ActConfig(1.0, cold_p + 0.01, 12))
        assert not d.exited

    def test_threshold_equality_exits(self):
        d = should_exit(np.zeros(4), 12, ActConfig(0.0, 0.25, 12))
        assert d.exited

    @pytest.mark.parametrize("kwargs", [{"threshold": 0.0}, {"threshold": 1.0}, {"anneal_alpha": -1.0},
                                        {"num_layers": 0}, {"anneal_alpha": math.inf}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            ActConfig(**kwargs)


@settings(max_examples=200, deadline=None)
@given(z=logit_vectors, t=st.floats(1.0, 50.0))
def test_temperature_never_changes_the_token(z, t):
    assert top1_confidence(z, t)[0] == int(np.argmax(z))


@settings(max_examples=200, deadline=None)
@given(z=logit_vectors, t1=st.floats(1.0, 10.0), t2=st.floats(1.0, 10.0))
def test_confidence_nonincreasing_in_temperature(z, t1, t2):
    lo, hi = sorted((t1, t2))
    assert top1_confidence(z, hi)[1] <= top1_confidence(z, lo)[1]


# Bounded logits keep the drop above float64 resolution.
@settings(max_examples=200, deadline=None)
@given(z=arrays(np.float64, st.integers(2, 40), elements=st.floats(-5, 5)), t=st.floats(1.01, 10.0))
def test_confidence_strictly_drops_for_nonconstant_logits(z, t):
    if np.ptp(z) > 1e-3:
        assert top1_confidence(z, t)[1] < top1_confidence(z)[1]


@settings(max_examples=200, deadline=None)
@given(z=logit_vectors, L=st.integers(2, 48), data=st.data(), a1=st.floats(0, 5), a2=st.floats(0, 5),
       tau=st.floats(0.01, 0.99))
def test_more_annealing_never_exits_where_less_refuses(z, L, data, a1, a2, tau):
    layer = data.draw(st.integers(1, L - 1))
    lo, hi = sorted((a1, a2))
    if should_exit(z, layer, ActConfig(hi, tau, L)).exited:
        assert should_exit(z, layer, ActConfig(lo, tau, L)).exited


@settings(max_examples=100, deadline=None)
@given(z=logit_vectors, L=st.integers(1, 64), alpha=st.floats(0, 100), tau=st.floats(0.01, 0.99))
def test_last_layer_is_plain_threshold(z, L, alpha, tau):
    d = should_exit(z, L, ActConfig(alpha, tau, L))
    assert d.temperature == 1.0
    assert d.exited == (top1_confidence(z, 1.0)[1] >= tau)
