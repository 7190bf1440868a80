"""Closed-form predictions: simplex limits and exact finite-n values,
regime classifiers, partition-function dominance and the exact simplex
Frobenius sums used to cross-check the Jacobian.

All exponentials are evaluated relative to e^beta (beta = gamma ln n), so
only e^{-beta (1 - rho)} <= 1 ever appears.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, softmax_rows
from .errors import InfeasibleSpec, InvalidParam
from .tokens import GeometrySummary, ThreePhaseSpec, TokenConfig, cluster_sets

CRITICAL_TOL = 1e-12


class Regime(str, enum.Enum):
    SUBCRITICAL = "Subcritical"
    CRITICAL = "Critical"
    MIDDLE = "Middle"
    SUPERCRITICAL = "Supercritical"
    INDETERMINATE = "Indeterminate"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class RegimeVerdict:
    regime: Regime
    thresholds: dict = field(default_factory=dict)
    gamma: float = float("nan")


@dataclass(frozen=True)
class SimplexPrediction:
    cos_limit: float
    length_limit: float
    finite_n_cos: float
    finite_n_length: float
    finite_n_inner: float
    finite_n_log_z: float

    @property
    def finite_n_Z(self) -> float:
        return math.exp(self.finite_n_log_z)


def critical_gamma(rho: float) -> float:
    return 1.0 / (1.0 - rho)


def _check_simplex_args(rho, q, alpha):
    if not 0.0 < rho < 1.0:
        raise InvalidParam(f"rho must lie in (0, 1), got {rho}")
    if not q > 0.0:
        raise InvalidParam(f"q must be positive, got {q}")
    if alpha < 0.0:
        raise InvalidParam(f"alpha must be >= 0, got {alpha}")


def simplex_case(rho: float, gamma: float) -> Regime:
    """Exact comparison against 1/(1 - rho); build gamma from rho to hit the
    critical point."""
    if not gamma > 0.0:
        raise InvalidParam(f"gamma must be positive, got {gamma}")
    thr = critical_gamma(rho)
    if gamma == thr:
        return Regime.CRITICAL
    return Regime.SUBCRITICAL if gamma < thr else Regime.SUPERCRITICAL


def simplex_length_limit(rho: float, q: float, alpha: float, gamma: float) -> float:
    """Limit of |x'_i|^2 as n grows."""
    _check_simplex_args(rho, q, alpha)
    s = alpha * math.sqrt(q)
    case = simplex_case(rho, gamma)
    if case is Regime.SUBCRITICAL:
        return s * s + 2.0 * s * rho + rho
    if case is Regime.CRITICAL:
        return s * s + s * (1.0 + rho) + (1.0 + 3.0 * rho) / 4.0
    return (s + 1.0) ** 2


def simplex_inner_limit(rho: float, q: float, alpha: float) -> float:
    """Limit of <x'_i, x'_j>, the same in every regime."""
    return rho * (alpha * math.sqrt(q) + 1.0) ** 2


def simplex_cos_limit(rho: float, q: float, alpha: float, gamma: float) -> float:
    """Limit of <y'_i, y'_j> for an exact simplex."""
    return simplex_inner_limit(rho, q, alpha) / simplex_length_limit(rho, q, alpha, gamma)


def simplex_finite_n(rho: float, q: float, alpha: float, beta: float, n: int) -> SimplexPrediction:
    """Exact one-layer inner products for an n-token simplex at inverse temperature beta."""
    _check_simplex_args(rho, q, alpha)
    if n < 2:
        raise InvalidParam("need n >= 2")
    er = math.exp(-beta * (1.0 - rho))
    zt = 1.0 + (n - 1) * er
    a, b = 1.0 / zt, er / zt  # self weight, off-diagonal weight
    s = alpha * math.sqrt(q)
    row = 1.0 + (n - 2) * rho  # sum_{k != i} <y_j, y_k>
    length = (
        s * s
        + 2.0 * s * (a + (n - 1) * rho * b)
        + a * a
        + 2.0 * a * b * (n - 1) * rho
        + b * b * ((n - 1) + (n - 1) * (n - 2) * rho)
    )
    inner = (
        s * s * rho
        + 2.0 * s * (a * rho + b * row)
        + a * a * rho
        + 2.0 * a * b * row
        + b * b * ((n - 2) + (n * n - 3 * n + 3) * rho)
    )
    gamma = beta / math.log(n)
    if gamma > 0:
        cos_lim = simplex_cos_limit(rho, q, alpha, gamma)
        len_lim = simplex_length_limit(rho, q, alpha, gamma)
    else:
        cos_lim = len_lim = float("nan")
    return SimplexPrediction(
        cos_limit=cos_lim,
        length_limit=len_lim,
        finite_n_cos=inner / length,
        finite_n_length=length,
        finite_n_inner=inner,
        finite_n_log_z=beta + math.log(zt),
    )


def simplex_eta_limit(rho: float, q: float, d: int, gamma: float) -> float:
    """Large-n value of (1/nd)|grad X'|^2 for the simplex with alpha = 0."""
    _check_simplex_args(rho, q, 0.0)
    if d < 1:
        raise InvalidParam("d must be >= 1")
    case = simplex_case(rho, gamma)
    if case is Regime.SUBCRITICAL:
        return 0.0
    factor = 0.25 if case is Regime.CRITICAL else 1.0
    return factor / q * (1.0 - 1.0 / d)


def almost_simplex_eta_bound(gamma: float, n: int, q1: float, d: int) -> float:
    """Subcritical upper bound 4 gamma^2 (ln n)^2 / (q1 d), leading order only."""
    return 4.0 * gamma**2 * math.log(n) ** 2 / (q1 * d)


# exact simplex Frobenius sums, each divided by the matching power of e^beta


def simplex_rr_trace_sum(n: int, d: int, rho: float, beta: float, cross_coeff: float = 2.0) -> float:
    """sum_{i,j} tr[(R1 + R2)^T (R1 + R2)] / e^{2 beta}.

    ``cross_coeff`` multiplies the R1^T R2 cross term; expanding the square
    gives 2, and 1 reproduces the expression with that term counted once.
    """
    r = rho
    er = math.exp(-beta * (1.0 - r))
    t1 = beta**2 * er**2 * n * (n * n * r * r * (1 - r) + n * (1 - r) * (1 + r - 3 * r * r) - (1 + 2 * r) * (1 - r) ** 2)
    t2 = beta * er * n * (n - 1) * (1 - r * r)
    t3 = (d - 1) * n + er**2 * (beta**2 * (1 - r * r) + d - 1) * n * (n - 1)
    return t1 + cross_coeff * t2 + t3


def simplex_uru_sum(n: int, rho: float, beta: float) -> float:
    """sum_{i,j} (U1 + U2)^T (R1 + R2) (U3 + U4) / e^{3 beta}."""
    r = rho
    er = math.exp(-beta * (1.0 - r))
    m = n * r + (1 - r)
    nn = n * (n - 1)
    return (
        r * beta**2 * er**2 * (1 - er) * nn * m * (1 - r)
        + beta**2 * er**3 * nn * m * m * (1 - r)
        + beta * er**2 * nn * m * (1 - r)
        + beta * er**2 * (1 - er) * (beta * r + 1) * nn * (1 - r * r)
        + beta * er**3 * nn * m * (beta * (1 - r * r) + (1 - r))
    )


def simplex_uu_sum(n: int, rho: float, beta: float) -> float:
    """sum_{i,j} |U1 + U2|^2 |U3 + U4|^2 / e^{4 beta}."""
    r = rho
    er = math.exp(-beta * (1.0 - r))
    m = n * r + (1 - r)
    bracket = (1 - er) ** 2 + 2 * er * (1 - er) * m + er**2 * n * m
    return beta**2 * er**2 * n * (n - 1) * (n * r + 2) * (1 - r) * bracket


def simplex_frobenius_sums_numeric(n: int, d: int, rho: float, beta: float) -> tuple[float, float, float]:
    """Brute-force the three sums over all (i, j) on an explicit simplex,
    with the same e^beta normalizations as the closed forms."""
    from .tokens import SimplexSpec, make_simplex

    y = make_simplex(SimplexSpec(n=n, d=d, q=1.0, rho=rho)).y
    er = math.exp(-beta * (1.0 - rho))
    V = y.sum(axis=0)
    W = y.T @ y
    I = np.eye(d)
    rr = uru = uu = 0.0
    for i in range(n):
        yi = y[i]
        P = I - np.outer(yi, yi)
        for j in range(n):
            yj = y[j]
            e_ij = math.exp(beta * (float(yi @ yj) - 1.0))
            R = e_ij * (np.outer(-yi + beta * (P @ yj), yi) + I)
            U = beta * e_ij * (P @ yj)
            if i == j:
                R = R + beta * er * (W - np.outer(yi, W @ yi))
                U = U + beta * er * (P @ V)
            U34 = (1.0 - er) * yj + er * V
            rr += float(np.sum(R * R))
            uru += float(U @ R @ U34)
            uu += float(U @ U) * float(U34 @ U34)
    return rr, uru, uu


def simplex_eta_finite_n(n: int, d: int, rho: float, beta: float, q: float = 1.0) -> float:
    """Exact (1/nd)|grad X'|^2 for the simplex with alpha = 0 from the three sums."""
    er = math.exp(-beta * (1.0 - rho))
    Z = 1.0 + (n - 1) * er
    s1 = simplex_rr_trace_sum(n, d, rho, beta)
    s2 = simplex_uru_sum(n, rho, beta)
    s3 = simplex_uu_sum(n, rho, beta)
    return (Z * Z * s1 - 2.0 * Z * s2 + s3) / Z**4 / (n * d * q)


# regime classification


def classify_two_phase(summary: GeometrySummary, gamma: float) -> RegimeVerdict:
    rho1, rho2 = summary.rho1, summary.rho2
    if not rho1 > 0.0:
        raise InvalidParam(f"need rho1 > 0 for the two-phase picture, got {rho1}")
    if not rho2 < 1.0:
        raise InvalidParam(f"need rho2 < 1, got {rho2}")
    lo, hi = critical_gamma(rho1), critical_gamma(rho2)
    thresholds = {"subcritical_below": lo, "supercritical_above": hi}
    if abs(rho2 - rho1) <= CRITICAL_TOL and abs(gamma - lo) <= CRITICAL_TOL:
        regime = Regime.CRITICAL
    elif gamma < lo:
        regime = Regime.SUBCRITICAL
    elif gamma > hi:
        regime = Regime.SUPERCRITICAL
    else:
        regime = Regime.INDETERMINATE
    return RegimeVerdict(regime, thresholds, gamma)


def three_phase_thresholds(spec: ThreePhaseSpec) -> dict:
    t = spec.tau
    r1, r2, r3, r4 = spec.rho1, spec.rho2, spec.rho3, spec.rho4
    return {
        "subcritical_below": min(1.0 / (1.0 - r1), (1.0 - t) / (r4 - r1)),
        "middle_above": (1.0 - t) / (r3 - r2),
        "middle_below": t / (1.0 - r3),
        "supercritical_above": max(1.0 / (1.0 - r2), t / (1.0 - r4)),
    }


def classify_three_phase(spec: ThreePhaseSpec, gamma: float) -> RegimeVerdict:
    if not spec.technical_condition():
        raise InfeasibleSpec("(1 - tau)(1 - rho2) + rho2 < rho3 fails")
    th = three_phase_thresholds(spec)
    if gamma < th["subcritical_below"]:
        regime = Regime.SUBCRITICAL
    elif th["middle_above"] < gamma < th["middle_below"]:
        regime = Regime.MIDDLE
    elif gamma > th["supercritical_above"]:
        regime = Regime.SUPERCRITICAL
    else:
        regime = Regime.INDETERMINATE
    return RegimeVerdict(regime, th, gamma)


# partition-function dominance


@dataclass(frozen=True)
class PartitionPrediction:
    regime: Regime
    dominant: str  # "bulk", "cluster", "self" or "self+bulk"
    prefactor: float
    reference: str  # the quantity Z is asymptotically prefactor times


def z_partition_prediction(
    gamma: float, rho: float | None = None, spec: ThreePhaseSpec | None = None
) -> PartitionPrediction:
    """Which term dominates Z_i, for a simplex (``rho``) or a clustered layout (``spec``)."""
    if (rho is None) == (spec is None):
        raise InvalidParam("give exactly one of rho or spec")
    if rho is not None:
        case = simplex_case(rho, gamma)
        if case is Regime.SUBCRITICAL:
            return PartitionPrediction(case, "bulk", 1.0, "n e^{rho beta}")
        if case is Regime.CRITICAL:
            return PartitionPrediction(case, "self+bulk", 2.0, "e^beta")
        return PartitionPrediction(case, "self", 1.0, "e^beta")
    verdict = classify_three_phase(spec, gamma)
    dominant = {
        Regime.SUBCRITICAL: ("bulk", "sum over m outside K_i and i"),
        Regime.MIDDLE: ("cluster", "sum over m in K_i"),
        Regime.SUPERCRITICAL: ("self", "e^beta"),
    }.get(verdict.regime)
    if dominant is None:
        raise InvalidParam(f"gamma={gamma} falls between the covered regimes")
    return PartitionPrediction(verdict.regime, dominant[0], 1.0, dominant[1])


def simplex_z_ratio(n: int, gamma: float, rho: float) -> float:
    """Exact Z divided by its predicted reference (n e^{rho beta} or e^beta)."""
    beta = gamma * math.log(n)
    case = simplex_case(rho, gamma)
    er = math.exp(-beta * (1.0 - rho))
    z_over_eb = 1.0 + (n - 1) * er
    if case is Regime.SUBCRITICAL:
        # Z / (n e^{rho beta}) = (e^{beta(1 - rho)} + n - 1) / n
        return (math.exp(beta * (1.0 - rho)) + n - 1) / n
    return z_over_eb


@dataclass(frozen=True)
class PartitionMasses:
    self_mass: np.ndarray
    cluster_mass: np.ndarray
    bulk_mass: np.ndarray


def partition_masses(cfg: TokenConfig, params: AttentionParams, spec: ThreePhaseSpec) -> PartitionMasses:
    """Split each softmax row into self, cluster (K_i) and bulk shares."""
    G = cfg.gram()
    A, _, _ = softmax_rows(params.beta_for(cfg.n) * G)
    mask = cluster_sets(cfg, spec, G)
    selfm = np.diag(A).copy()
    cluster = np.where(mask, A, 0.0).sum(axis=1)
    return PartitionMasses(selfm, cluster, 1.0 - selfm - cluster)


def cluster_restricted_attention(cfg: TokenConfig, params: AttentionParams, spec: ThreePhaseSpec) -> np.ndarray:
    """Softmax average of y_m over m in K_i only (rows with empty K_i are NaN)."""
    G = cfg.gram()
    A, _, _ = softmax_rows(params.beta_for(cfg.n) * G)
    W = np.where(cluster_sets(cfg, spec, G), A, 0.0)
    tot = W.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (W @ cfg.y) / tot
