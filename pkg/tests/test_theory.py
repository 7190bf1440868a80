import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnlab.attention import AttentionParams, att_forward
from attnlab.errors import InfeasibleSpec, InvalidParam
from attnlab.experiments import compute_eta, simplex_cos_convergence
from attnlab.jacobian import frobenius_norm_exact
from attnlab.theory import (
    Regime,
    almost_simplex_eta_bound,
    classify_three_phase,
    classify_two_phase,
    cluster_restricted_attention,
    critical_gamma,
    partition_masses,
    simplex_case,
    simplex_cos_limit,
    simplex_eta_finite_n,
    simplex_eta_limit,
    simplex_finite_n,
    simplex_frobenius_sums_numeric,
    simplex_length_limit,
    simplex_rr_trace_sum,
    simplex_uru_sum,
    simplex_uu_sum,
    simplex_z_ratio,
    three_phase_thresholds,
    z_partition_prediction,
)
from attnlab.tokens import (
    GaussianFactorSpec,
    GeometrySummary,
    SimplexSpec,
    ThreePhaseSpec,
    TokenConfig,
    make_simplex,
    make_three_phase,
    sample_gaussian_factor,
    summarize_geometry,
)

SPEC = ThreePhaseSpec(n=4096, tau=0.9, rho1=0.1, rho2=0.2, rho3=0.8, rho4=0.9, kappa3=0.05, kappa4=0.1)


@pytest.mark.parametrize("gamma,want", [(1.0, 1.0), (2.0, 0.8), (4.0, 0.5)])
def test_cos_limit_without_residual(gamma, want):
    assert simplex_cos_limit(0.5, 1.0, 0.0, gamma) == pytest.approx(want, rel=1e-15)


def test_cos_limit_with_residual():
    assert simplex_cos_limit(0.5, 1.0, 1.0, 1.0) == pytest.approx(0.8)
    # supercritical: residual and identity point the same way, so angles are kept
    assert simplex_cos_limit(0.3, 2.0, 0.7, 10.0) == pytest.approx(0.3)


def test_critical_is_exact_comparison():
    rho = 0.3
    assert simplex_case(rho, critical_gamma(rho)) is Regime.CRITICAL
    assert simplex_case(rho, np.nextafter(critical_gamma(rho), 0)) is Regime.SUBCRITICAL
    assert simplex_case(rho, np.nextafter(critical_gamma(rho), 9)) is Regime.SUPERCRITICAL


@pytest.mark.parametrize("args", [(0.0, 1.0, 0.0, 1.0), (1.0, 1.0, 0.0, 1.0), (0.5, 0.0, 0.0, 1.0), (0.5, 1.0, -1.0, 1.0), (0.5, 1.0, 0.0, 0.0)])
def test_cos_limit_domain(args):
    with pytest.raises(InvalidParam):
        simplex_cos_limit(*args)


@given(rho=st.floats(0.01, 0.99), q=st.floats(0.01, 100.0), c=st.sampled_from([0.3, 0.9, 1.0]))
@settings(max_examples=60, deadline=None)
def test_cos_limit_continuous_at_zero_alpha(rho, q, c):
    gamma = critical_gamma(rho) if c == 1.0 else c * critical_gamma(rho)
    a = simplex_cos_limit(rho, q, 0.0, gamma)
    b = simplex_cos_limit(rho, q, 1e-8, gamma)
    assert abs(a - b) <= 1e-6


@given(rho=st.floats(0.01, 0.99), q=st.floats(0.01, 100.0), alpha=st.floats(0.0, 5.0), c=st.sampled_from([0.2, 0.7, 1.0]))
@settings(max_examples=80, deadline=None)
def test_contracting_limits_exceed_rho(rho, q, alpha, c):
    gamma = critical_gamma(rho) if c == 1.0 else c * critical_gamma(rho)
    lim = simplex_cos_limit(rho, q, alpha, gamma)
    assert rho + 1e-12 < lim <= 1.0 + 1e-15


def test_length_limit_supercritical():
    assert simplex_length_limit(0.5, 4.0, 0.5, 5.0) == pytest.approx((0.5 * 2 + 1) ** 2)


@pytest.mark.parametrize("n,rho,q,alpha,beta", [(16, 0.5, 1.0, 0.0, 3.0), (16, 0.25, 4.0, 0.5, 2.0)])
def test_finite_n_matches_forward(n, rho, q, alpha, beta):
    cfg = make_simplex(SimplexSpec(n=n, d=n + 1, q=q, rho=rho))
    out = att_forward(cfg, AttentionParams.from_beta(beta, alpha))
    pred = simplex_finite_n(rho, q, alpha, beta, n)
    y = TokenConfig(out.x_next).y
    assert abs(y[0] @ y[1] - pred.finite_n_cos) <= 1e-10
    assert abs(out.x_next[2] @ out.x_next[2] - pred.finite_n_length) <= 1e-10
    assert pred.finite_n_Z == pytest.approx(math.exp(beta) + (n - 1) * math.exp(rho * beta), rel=1e-13)


@given(
    n=st.integers(2, 40),
    rho=st.floats(0.05, 0.95),
    q=st.floats(0.1, 10.0),
    alpha=st.floats(0.0, 2.0),
    beta=st.floats(0.0, 30.0),
)
@settings(max_examples=60, deadline=None)
def test_finite_n_matches_forward_property(n, rho, q, alpha, beta):
    cfg = make_simplex(SimplexSpec(n=n, d=n + 1, q=q, rho=rho))
    X = att_forward(cfg, AttentionParams.from_beta(beta, alpha)).x_next
    pred = simplex_finite_n(rho, q, alpha, beta, n)
    scale = max(1.0, pred.finite_n_length)
    assert abs(X[0] @ X[0] - pred.finite_n_length) <= 1e-10 * scale
    assert abs(X[0] @ X[1] - pred.finite_n_inner) <= 1e-10 * scale


def test_two_tokens_uniform_attention_coincide():
    pred = simplex_finite_n(0.4, 1.0, 0.0, 0.0, 2)
    assert pred.finite_n_cos == pytest.approx(1.0, abs=1e-15)


def test_finite_n_converges_monotonically():
    ns = [256 * 2**k for k in range(6)]
    for rho in (0.25, 0.5, 0.75):
        for c in (0.5, 1.0, 2.0):
            gamma = c * critical_gamma(rho) if c != 1.0 else critical_gamma(rho)
            for alpha in (0.0, 1.0):
                errs = [r.error for r in simplex_cos_convergence(rho, gamma, ns, alpha=alpha)]
                assert all(a > b for a, b in zip(errs, errs[1:]))


@pytest.mark.parametrize("gamma,want", [(1.0, 0.0), (2.0, 0.25 * (1 - 1 / 513)), (4.0, 1 - 1 / 513)])
def test_eta_limit_cases(gamma, want):
    assert simplex_eta_limit(0.5, 1.0, 513, gamma) == pytest.approx(want, abs=1e-15)


def test_eta_limit_scales_with_q():
    assert simplex_eta_limit(0.5, 2.0, 10, 8.0) == pytest.approx(0.5 * 0.9)


@pytest.mark.parametrize("n,rho,beta", [(8, 0.25, 1.0), (8, 0.5, 3.0), (16, 0.25, 3.0), (16, 0.5, 1.0), (5, 0.9, 0.0), (6, 0.1, 20.0)])
def test_frobenius_sums_match_numeric(n, rho, beta):
    rr, uru, uu = simplex_frobenius_sums_numeric(n, n + 1, rho, beta)
    assert simplex_rr_trace_sum(n, n + 1, rho, beta) == pytest.approx(rr, rel=1e-10)
    assert simplex_uru_sum(n, rho, beta) == pytest.approx(uru, rel=1e-10)
    assert simplex_uu_sum(n, rho, beta) == pytest.approx(uu, rel=1e-10)


def test_rr_sum_needs_doubled_cross_term():
    rr, _, _ = simplex_frobenius_sums_numeric(8, 9, 0.5, 1.0)
    single = simplex_rr_trace_sum(8, 9, 0.5, 1.0, cross_coeff=1.0)
    assert abs(single - rr) / rr > 1e-3


@pytest.mark.parametrize("n,gamma", [(64, 1.0), (64, 2.0), (200, 4.0), (33, 0.0)])
def test_eta_finite_n_matches_jacobian(n, gamma):
    cfg = make_simplex(SimplexSpec(n=n, d=n + 3, q=1.0, rho=0.5))
    p = AttentionParams.from_gamma(gamma)
    got = frobenius_norm_exact(cfg, p).eta_exact
    assert got == pytest.approx(simplex_eta_finite_n(n, n + 3, 0.5, p.beta_for(n)), rel=1e-10)


def test_two_phase_examples():
    simplex = summarize_geometry(make_simplex(SimplexSpec(n=8, d=9, rho=0.5)))
    assert classify_two_phase(simplex, 1.9).regime is Regime.SUBCRITICAL
    wide = GeometrySummary(q1=1, q2=1, rho1=0.4, rho2=0.6, all_pairs_positive=True)
    v = classify_two_phase(wide, 1.8)
    assert v.regime is Regime.INDETERMINATE
    assert v.thresholds["subcritical_below"] == pytest.approx(1 / 0.6)
    assert v.thresholds["supercritical_above"] == pytest.approx(2.5)
    flat = GeometrySummary(q1=1, q2=1, rho1=0.5, rho2=0.5, all_pairs_positive=True)
    assert classify_two_phase(flat, 2.0).regime is Regime.CRITICAL
    assert classify_two_phase(flat, 2.1).regime is Regime.SUPERCRITICAL
    assert str(Regime.MIDDLE) == "Middle"


def test_two_phase_needs_positive_cosines():
    neg = GeometrySummary(q1=1, q2=1, rho1=-0.1, rho2=0.5, all_pairs_positive=False)
    with pytest.raises(InvalidParam):
        classify_two_phase(neg, 1.0)


@pytest.mark.parametrize("gamma,want", [(0.1, Regime.SUBCRITICAL), (2.0, Regime.MIDDLE), (10.0, Regime.SUPERCRITICAL), (0.15, Regime.INDETERMINATE), (6.0, Regime.INDETERMINATE)])
def test_three_phase_examples(gamma, want):
    assert classify_three_phase(SPEC, gamma).regime is want


def test_three_phase_thresholds_values():
    th = three_phase_thresholds(SPEC)
    assert th["subcritical_below"] == pytest.approx(0.125)
    assert th["middle_above"] == pytest.approx(1 / 6)
    assert th["middle_below"] == pytest.approx(4.5)
    assert th["supercritical_above"] == pytest.approx(9.0)


def test_three_phase_infeasible():
    bad = ThreePhaseSpec(n=100, tau=0.5, rho1=0.1, rho2=0.5, rho3=0.6, rho4=0.9, kappa3=0.1, kappa4=0.2)
    with pytest.raises(InfeasibleSpec):
        classify_three_phase(bad, 1.0)


def test_partition_prediction_simplex():
    assert z_partition_prediction(1.0, rho=0.5).dominant == "bulk"
    crit = z_partition_prediction(2.0, rho=0.5)
    assert crit.dominant == "self+bulk" and crit.prefactor == 2.0
    assert z_partition_prediction(3.0, rho=0.5).dominant == "self"
    with pytest.raises(InvalidParam):
        z_partition_prediction(1.0)


def test_partition_prediction_three_phase():
    assert z_partition_prediction(2.0, spec=SPEC).dominant == "cluster"
    assert z_partition_prediction(0.1, spec=SPEC).dominant == "bulk"
    with pytest.raises(InvalidParam):
        z_partition_prediction(6.0, spec=SPEC)


def test_simplex_z_ratio_limits():
    n = 10**4
    assert simplex_z_ratio(n, 1.0, 0.5) == pytest.approx(1.0, abs=0.02)
    assert simplex_z_ratio(n, 2.0, 0.5) == pytest.approx(2.0, abs=0.05)
    assert simplex_z_ratio(n, 4.0, 0.5) == pytest.approx(1.0, abs=0.01)


def test_z_ratio_matches_forward():
    n = 300
    cfg = make_simplex(SimplexSpec(n=n, d=n + 1, rho=0.5))
    logz = att_forward(cfg, AttentionParams.from_gamma(2.0)).log_z[0]
    assert math.exp(logz - 2.0 * math.log(n)) == pytest.approx(simplex_z_ratio(n, 2.0, 0.5), rel=1e-12)


@pytest.fixture(scope="module")
def three_phase_cfg():
    return make_three_phase(SPEC, d=4129, seed=0)


def test_masses_sum_to_one(three_phase_cfg):
    m = partition_masses(three_phase_cfg, AttentionParams.from_gamma(2.0), SPEC)
    np.testing.assert_allclose(m.self_mass + m.cluster_mass + m.bulk_mass, 1.0, atol=1e-12)
    assert m.cluster_mass.min() >= 0.9


def test_middle_regime_attends_within_cluster(three_phase_cfg):
    p = AttentionParams.from_gamma(2.0)
    att = att_forward(three_phase_cfg, p).att
    restricted = cluster_restricted_attention(three_phase_cfg, p, SPEC)
    assert np.max(np.linalg.norm(att - restricted, axis=1)) <= 0.05


def test_subcritical_bound_direction():
    n, d, rho = 256, 512, 0.5
    cfg = sample_gaussian_factor(GaussianFactorSpec(n=n, d=d, rho=rho, seed=0))
    unit = TokenConfig(cfg.y)
    for gamma in (0.5, 1.0, 1.5):
        eta, _ = compute_eta(unit, AttentionParams.from_gamma(gamma))
        assert eta <= almost_simplex_eta_bound(gamma, n, 1.0, d)
