import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ntklab.activations import ActivationKind
from ntklab.meanfield import (
    CorrelationDomainError,
    InitHyper,
    Phase,
    SignalOverflowError,
    avg_dphi_prod,
    avg_dphi_sq,
    avg_phi_prod,
    avg_phi_sq,
    backward_covariance_step,
    backward_step,
    classify_phase,
    edge_of_chaos_sigma_w_sq,
    forward_covariance_step,
    forward_variance_step,
    run_trace,
    variance_fixed_point,
)

RELU = ActivationKind.RELU
ERF = ActivationKind.ERF
TANH = ActivationKind.TANH

# Values pinned by the independent adaptive-quadrature oracle (tests/oracles.py)
# at authoring time.
ERF_AVG_PHI_SQ_Q1 = 0.4645590543975401          # E[erf(z)^2]
ERF_CHI1_SW1_Q1 = 0.5694100347337416            # (2/pi)/sqrt(5/4)
ERF_EOC_BORDER_SB1 = 2.7183813523354585         # chi1(q*) = 1 crossing at sigma_b^2 = 1

# erf (3,1) trace at depth 20, q0 = 1, q0_sr = 0.5 (oracle recursion).
ERF31_L20 = dict(
    q1=2.39367716319262,
    q20=2.9605538852200315,
    q_sr1=1.6490406878163564,
    q_sr20=2.7404219726585892,
    p1=3.774380633934982,
    p_sr1=0.035704450774069064,
)


def hyper(sw, sb, kind=RELU):
    return InitHyper(sw, sb, kind)


class TestInitHyper:
    def test_rejects_nonpositive_weight_variance(self):
        with pytest.raises(ValueError):
            InitHyper(0.0, 1.0, RELU)
        with pytest.raises(ValueError):
            InitHyper(-1.0, 1.0, RELU)

    def test_rejects_negative_bias_variance(self):
        with pytest.raises(ValueError):
            InitHyper(1.0, -0.1, RELU)


class TestForwardVarianceStep:
    def test_relu_eoc_identity(self):
        # q = (sigma_w^2 / 2) q_prev + sigma_b^2; at (2, 0) the map is the identity
        q, q_hat = forward_variance_step(hyper(2.0, 0.0), 1.0)
        assert q == 1.0
        assert q_hat == 0.5

    def test_relu_eoc_fixed_point_iterates(self):
        q = 1.0
        for _ in range(50):
            q, _ = forward_variance_step(hyper(2.0, 0.0), q)
        assert q == 1.0

    def test_erf_value_against_quadrature_oracle(self):
        q, q_hat = forward_variance_step(hyper(1.0, 1.0, ERF), 1.0)
        assert q_hat == pytest.approx(ERF_AVG_PHI_SQ_Q1, rel=1e-12)
        assert q == pytest.approx(1.0 + ERF_AVG_PHI_SQ_Q1, rel=1e-12)
        # equals the arctan closed form
        assert q == pytest.approx(2.0 / math.pi * math.atan(1.0 / math.sqrt(1.25)) + 1.0,
                                  rel=1e-14)

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            forward_variance_step(hyper(1.0, 0.0), 0.0)


class TestForwardCovarianceStep:
    def test_relu_full_correlation_collapses_to_variance_map(self):
        for q_prev in (0.25, 1.0, 4.0):
            q, _ = forward_variance_step(hyper(1.7, 0.3), q_prev)
            q_sr, _ = forward_covariance_step(hyper(1.7, 0.3), q_prev, q_prev, q_prev)
            assert q_sr == pytest.approx(q, abs=1e-12)

    def test_relu_orthogonal_inputs(self):
        # (2/2pi) * 1 * (1 + 0 + 0) = 1/pi, cross-checked by the 2-D quadrature oracle
        q_sr, q_hat_sr = forward_covariance_step(hyper(2.0, 0.0), 1.0, 1.0, 0.0)
        assert q_sr == pytest.approx(1.0 / math.pi, rel=1e-14)
        assert q_hat_sr == pytest.approx(1.0 / (2.0 * math.pi), rel=1e-14)

    def test_erf_full_correlation_collapses(self):
        q, _ = forward_variance_step(hyper(1.0, 1.0, ERF), 1.0)
        q_sr, _ = forward_covariance_step(hyper(1.0, 1.0, ERF), 1.0, 1.0, 1.0)
        assert q_sr == pytest.approx(q, abs=1e-12)

    def test_correlation_domain_error(self):
        with pytest.raises(CorrelationDomainError):
            forward_covariance_step(hyper(1.0, 0.0), 1.0, 1.0, 1.5)

    def test_clamps_tiny_violation(self):
        q_sr, _ = forward_covariance_step(hyper(1.0, 0.0), 1.0, 1.0, 1.0 + 1e-12)
        q, _ = forward_variance_step(hyper(1.0, 0.0), 1.0)
        assert q_sr == pytest.approx(q, abs=1e-12)


class TestBackwardStep:
    def test_relu_chi1_is_half_weight_variance(self):
        for q in (0.1, 1.0, 7.0):
            _, chi1 = backward_step(hyper(2.0, 0.0), q, 1.0)
            assert chi1 == 1.0  # EOC independent of sigma_b^2 and q
            _, chi1 = backward_step(hyper(3.0, 1.0), q, 1.0)
            assert chi1 == 1.5

    def test_erf_chi1_value(self):
        _, chi1 = backward_step(hyper(1.0, 0.0, ERF), 1.0, 1.0)
        assert chi1 == pytest.approx(ERF_CHI1_SW1_Q1, rel=1e-12)

    def test_width_ratio_multiplies_p_not_chi1(self):
        p, chi1 = backward_step(hyper(2.0, 0.0), 1.0, 1.0, width_ratio=0.5)
        assert chi1 == 1.0
        assert p == 0.5


class TestBackwardCovarianceStep:
    def test_relu_full_correlation_matches_backward_step(self):
        p, _ = backward_step(hyper(1.3, 0.7), 2.0, 1.0)
        p_sr = backward_covariance_step(hyper(1.3, 0.7), 2.0, 2.0, 1.0, 1.0)
        assert p_sr == pytest.approx(p, abs=1e-12)

    def test_relu_orthogonal(self):
        # (2/2pi)(pi/2) = 1/2
        p_sr = backward_covariance_step(hyper(2.0, 0.0), 1.0, 1.0, 0.0, 1.0)
        assert p_sr == pytest.approx(0.5, rel=1e-14)

    def test_erf_full_correlation_matches_backward_step(self):
        p, _ = backward_step(hyper(1.0, 1.0, ERF), 1.5, 1.0)
        p_sr = backward_covariance_step(hyper(1.0, 1.0, ERF), 1.5, 1.5, 1.0, 1.0)
        assert p_sr == pytest.approx(p, abs=1e-12)


# Collapse of the covariance channel onto the variance channel at c = 1,
# over random hyperparameters and scales (all activation kinds).
@settings(max_examples=60, deadline=None)
@given(
    kind=st.sampled_from([RELU, ERF, TANH]),
    sw=st.floats(0.2, 4.0),
    sb=st.floats(0.0, 2.0),
    q=st.floats(1e-3, 16.0),
)
def test_covariance_collapse_property(kind, sw, sb, q):
    h = InitHyper(sw, sb, kind)
    q_next, q_hat = forward_variance_step(h, q)
    q_sr, q_hat_sr = forward_covariance_step(h, q, q, q)
    assert q_sr == pytest.approx(q_next, rel=1e-12, abs=1e-12)
    assert q_hat_sr == pytest.approx(q_hat, rel=1e-12, abs=1e-12)
    p, _ = backward_step(h, q, 1.0)
    p_sr = backward_covariance_step(h, q, q, 1.0, 1.0)
    assert p_sr == pytest.approx(p, rel=1e-12, abs=1e-12)


class TestRunTrace:
    def test_relu_eoc_all_ones(self):
        trace = run_trace(hyper(2.0, 0.0), 10)
        assert np.allclose(trace.q, 1.0)
        assert np.allclose(trace.chi1[:10], 1.0)
        assert np.allclose(trace.p[1:], 1.0)
        assert math.isnan(trace.p[0]) and math.isnan(trace.chi1[10])

    def test_relu_ordered_backward_decay(self):
        # chi1 = 1/2 everywhere, so p^l = 2^{-(L-l)}
        L = 8
        trace = run_trace(hyper(1.0, 1.0), L)
        for l in range(1, L + 1):
            assert trace.p[l] == pytest.approx(0.5 ** (L - l), rel=1e-12)

    def test_chain_rule_between_p_and_chi1(self):
        trace = run_trace(hyper(1.4, 0.6, ERF), 12)
        for l in range(1, 12):
            assert trace.p[l] == pytest.approx(trace.p[l + 1] * trace.chi1[l], rel=1e-12)

    def test_erf_chaotic_regression_fixture(self):
        trace = run_trace(hyper(3.0, 1.0, ERF), 20, q0=1.0, q0_sr=0.5)
        assert trace.q[1] == pytest.approx(ERF31_L20["q1"], rel=1e-12)
        assert trace.q[20] == pytest.approx(ERF31_L20["q20"], rel=1e-12)
        assert trace.q_sr[1] == pytest.approx(ERF31_L20["q_sr1"], rel=1e-12)
        assert trace.q_sr[20] == pytest.approx(ERF31_L20["q_sr20"], rel=1e-12)
        assert trace.p[1] == pytest.approx(ERF31_L20["p1"], rel=1e-12)
        assert trace.p_sr[1] == pytest.approx(ERF31_L20["p_sr1"], rel=1e-12)

    def test_rejects_bad_initial_covariance(self):
        with pytest.raises(ValueError):
            run_trace(hyper(1.0, 1.0), 3, q0=1.0, q0_sr=1.5)

    def test_overflow_identifies_layer(self):
        with pytest.raises(SignalOverflowError) as err:
            run_trace(hyper(9.0, 0.0), 800)
        assert err.value.layer is not None

    def test_tanh_trace_finite(self):
        trace = run_trace(hyper(1.5, 0.5, TANH), 15, q0=1.0, q0_sr=0.3)
        assert np.all(np.isfinite(trace.q))
        assert np.all(np.isfinite(trace.p[1:]))


@settings(max_examples=40, deadline=None)
@given(
    kind=st.sampled_from([RELU, ERF, TANH]),
    sw=st.floats(0.3, 3.0),
    sb=st.floats(0.0, 1.5),
    c0=st.floats(-1.0, 1.0),
    depth=st.integers(1, 12),
)
def test_correlation_boundedness_property(kind, sw, sb, c0, depth):
    trace = run_trace(InitHyper(sw, sb, kind), depth, q0=1.0, q0_sr=c0)
    assert np.all(np.abs(trace.c) <= 1.0 + 1e-9)
    assert np.all(np.abs(trace.q_sr[1:]) <= trace.q[1:] * (1.0 + 1e-9))


class TestClassifyPhase:
    def test_relu_phases(self):
        assert classify_phase(hyper(2.0, 0.0)).tag is Phase.EOC
        assert classify_phase(hyper(2.0, 1.3)).tag is Phase.EOC
        assert classify_phase(hyper(3.0, 1.0)).tag is Phase.CHAOTIC
        assert classify_phase(hyper(1.0, 1.0)).tag is Phase.ORDERED

    def test_relu_eoc_independent_of_bias(self):
        for sb in np.linspace(0.0, 2.0, 9):
            label = classify_phase(hyper(2.0, float(sb)))
            assert label.tag is Phase.EOC
            assert label.chi1_fixed_point == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("kind", [RELU, ERF, TANH])
    def test_monotone_phase_transition(self, kind):
        order = {Phase.ORDERED: 0, Phase.EOC: 1, Phase.CHAOTIC: 2}
        codes = [order[classify_phase(InitHyper(sw, 1.0, kind)).tag]
                 for sw in np.linspace(0.4, 6.0, 57)]
        assert codes == sorted(codes)
        assert codes[0] == 0 and codes[-1] == 2

    def test_erf_border_matches_oracle_bisection(self):
        border = edge_of_chaos_sigma_w_sq(ERF, 1.0, bracket=(0.5, 3.0))
        assert border == pytest.approx(ERF_EOC_BORDER_SB1, abs=1e-8)
        assert classify_phase(hyper(border - 0.01, 1.0, ERF)).tag is Phase.ORDERED
        assert classify_phase(hyper(border + 0.01, 1.0, ERF)).tag is Phase.CHAOTIC

    def test_relu_border_is_two(self):
        assert edge_of_chaos_sigma_w_sq(RELU, 0.7) == pytest.approx(2.0, rel=1e-9)

    def test_fixed_point_value_erf(self):
        q_star, chi = variance_fixed_point(hyper(1.0, 1.0, ERF))
        q_mapped, _ = forward_variance_step(hyper(1.0, 1.0, ERF), q_star)
        assert q_mapped == pytest.approx(q_star, rel=1e-10)
        assert chi < 1.0
