import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import holm_closed_testing, normal_sf_mp, pooled_z_pvalue_mp
from provtest.errors import ConfigurationError
from provtest.stats import (
    ProportionPair,
    PValueRecord,
    bai_confidence_radius,
    holm_bonferroni,
    normal_sf,
    z_test,
    z_test_one_sided,
)

# frozen from a 50-digit mpmath evaluation (see tests/oracles.py)
P_06_05_1000 = 3.483965536424916e-06
RADIUS_T1_A005 = 1.4802071873007984


def recs(ps):
    return [PValueRecord(f"m{i}", p) for i, p in enumerate(ps)]


class TestZTest:
    def test_equal_proportions_give_half(self):
        assert z_test(0.5, 0.5, 1000) == 0.5

    def test_zero_variance_is_conservative(self):
        assert z_test(1.0, 1.0, 100) == 1.0
        assert z_test(0.0, 0.0, 100) == 1.0

    def test_frozen_oracle_value(self):
        assert abs(z_test(0.6, 0.5, 1000) - P_06_05_1000) <= 1e-10
        assert abs(P_06_05_1000 - pooled_z_pvalue_mp(0.6, 0.5, 1000)) < 1e-15

    @pytest.mark.parametrize("pair", [(0.5, 0.5, 0), (1.2, 0.5, 10), (0.5, -0.1, 10)])
    def test_invalid_arguments(self, pair):
        with pytest.raises(ConfigurationError):
            z_test_one_sided(ProportionPair(*pair))

    def test_normal_tail_accuracy(self):
        for z in np.linspace(-8, 8, 161):
            assert abs(normal_sf(z) - normal_sf_mp(z)) <= 1e-12

    @given(st.floats(0.01, 0.99), st.integers(1, 10000))
    def test_equal_inputs_half(self, x, n):
        assert z_test(x, x, n) == 0.5

    @given(st.integers(1, 2000), st.data())
    def test_antitone_in_gap(self, n, data):
        b = data.draw(st.integers(0, n))
        a1 = data.draw(st.integers(0, n))
        a2 = data.draw(st.integers(a1, n))
        p_small = z_test(a1 / n, b / n, n)
        p_large = z_test(a2 / n, b / n, n)
        if a1 >= b:
            assert p_large <= p_small + 1e-15


class TestHolm:
    def test_all_rejected(self):
        ok, out = holm_bonferroni(recs([0.001, 0.01, 0.03]), 0.05)
        assert ok
        assert [r.threshold for r in out] == pytest.approx([0.05 / 3, 0.05 / 2, 0.05])

    def test_not_all_rejected(self):
        ok, _ = holm_bonferroni(recs([0.03, 0.04]), 0.05)
        assert not ok

    def test_single_unit_pvalue(self):
        ok, out = holm_bonferroni(recs([1.0]), 0.05)
        assert not ok and out[0].threshold == 0.05

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError):
            holm_bonferroni([], 0.05)

    def test_thresholds_keep_input_order(self):
        _, out = holm_bonferroni(recs([0.03, 0.001, 0.01]), 0.05)
        assert [r.model_id for r in out] == ["m0", "m1", "m2"]
        assert [r.threshold for r in out] == pytest.approx([0.05, 0.05 / 3, 0.05 / 2])

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.randoms())
    def test_permutation_invariant(self, ps, rnd):
        shuffled = list(ps)
        rnd.shuffle(shuffled)
        assert holm_bonferroni(recs(ps), 0.05)[0] == holm_bonferroni(recs(shuffled), 0.05)[0]

    @given(st.floats(0, 1), st.floats(0.001, 0.5))
    def test_single_reduces_to_alpha(self, p, alpha):
        assert holm_bonferroni(recs([p]), alpha)[0] == (p <= alpha)

    @settings(max_examples=300)
    @given(st.lists(st.floats(0, 0.2), min_size=1, max_size=8), st.sampled_from([0.01, 0.05, 0.1]))
    def test_matches_closed_testing(self, ps, alpha):
        assert holm_bonferroni(recs(ps), alpha)[0] == holm_closed_testing(ps, alpha)


class TestRadius:
    def test_frozen_value(self):
        assert abs(bai_confidence_radius(1, 0.05) - RADIUS_T1_A005) <= 1e-12
        assert RADIUS_T1_A005 == pytest.approx(math.sqrt(math.log(80) / 2), abs=1e-15)

    def test_rejects_bad_domain(self):
        with pytest.raises(ConfigurationError):
            bai_confidence_radius(0, 0.05)
        with pytest.raises(ConfigurationError):
            bai_confidence_radius(1, 4.0)

    @given(st.integers(1, 10**6), st.floats(0.001, 0.5))
    def test_decreasing_in_t(self, t, alpha):
        assert bai_confidence_radius(4 * t, alpha) < bai_confidence_radius(t, alpha)
        assert bai_confidence_radius(t + 1, alpha) < bai_confidence_radius(t, alpha)

    @given(st.integers(1, 10**6), st.floats(0.001, 0.4))
    def test_increasing_in_inverse_alpha(self, t, alpha):
        assert bai_confidence_radius(t, alpha / 2) > bai_confidence_radius(t, alpha)
