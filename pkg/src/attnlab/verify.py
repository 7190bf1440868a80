"""Fast self-check suites run by ``attn verify``."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import AttentionParams, att_forward
from .tokens import GaussianFactorSpec, SimplexSpec, TokenConfig, make_simplex, sample_gaussian_factor

SUITES = ("all", "jacobian", "theory", "simplex")


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.suite}/{self.name}: value={self.value:.3e} tol={self.tolerance:.1e} {self.detail}".rstrip()


def _check(suite, name, value, tol, detail="", upper=True) -> Check:
    ok = bool(np.isfinite(value)) and (value <= tol if upper else value >= tol)
    return Check(suite, name, ok, float(value), tol, detail)


def _rel(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


def jacobian_suite() -> list[Check]:
    from .jacobian import (
        finite_difference_block,
        frobenius_norm_exact,
        frobenius_norm_hutchinson,
        jacobian_block,
        jvp,
        simplex_jacobian_block,
    )

    out = []
    worst = 0.0
    for seed in range(3):
        cfg = sample_gaussian_factor(GaussianFactorSpec(n=8, d=4, rho=0.5, seed=seed))
        p = AttentionParams.from_gamma(1.0)
        for i, j in [(0, 0), (1, 3), (5, 2)]:
            worst = max(worst, _rel(jacobian_block(cfg, p, i, j).M, finite_difference_block(cfg, p, i, j)))
    out.append(_check("jacobian", "blocks_vs_finite_differences", worst, 1e-6, "gaussian n=8 d=4"))

    cfg = sample_gaussian_factor(GaussianFactorSpec(n=12, d=6, rho=0.4, seed=7))
    p = AttentionParams.from_gamma(1.5, alpha=0.5)
    for alpha_on in (False, True):
        g = frobenius_norm_exact(cfg, p, "gram", include_alpha=alpha_on).eta_exact
        b = frobenius_norm_exact(cfg, p, "blocks", include_alpha=alpha_on).eta_exact
        out.append(_check("jacobian", f"gram_vs_blocks_alpha={alpha_on}", abs(g - b) / b, 1e-10))

    rng = np.random.default_rng(3)
    V = rng.standard_normal((1, cfg.n, cfg.d))
    h = 1e-6
    from .attention import layer_map

    beta = p.beta_for(cfg.n)
    fd = (layer_map(cfg.x + h * V[0], beta) - layer_map(cfg.x - h * V[0], beta)) / (2 * h)
    out.append(_check("jacobian", "jvp_vs_directional_difference", _rel(jvp(cfg, p, V)[0], fd), 1e-6))

    cfg = sample_gaussian_factor(GaussianFactorSpec(n=16, d=8, rho=0.5, seed=1))
    p = AttentionParams.from_gamma(2.0)
    exact = frobenius_norm_exact(cfg, p).eta_exact
    rep = frobenius_norm_hutchinson(cfg, p, probes=2048, seed=0)
    z = abs(rep.eta_hutchinson - exact) / rep.eta_hutchinson_se
    out.append(_check("jacobian", "hutchinson_within_3se", z, 3.0, "units of standard error"))

    cfg = make_simplex(SimplexSpec(n=6, d=8, q=2.0, rho=0.4))
    p = AttentionParams.from_beta(2.5)
    worst = max(_rel(simplex_jacobian_block(cfg, p, i, j).M, jacobian_block(cfg, p, i, j).M) for i, j in [(0, 0), (0, 3), (4, 1)])
    out.append(_check("jacobian", "simplex_fast_path_vs_generic", worst, 1e-12))
    return out


def theory_suite() -> list[Check]:
    from .theory import (
        Regime,
        classify_three_phase,
        simplex_finite_n,
        simplex_frobenius_sums_numeric,
        simplex_rr_trace_sum,
        simplex_uru_sum,
        simplex_uu_sum,
    )
    from .tokens import ThreePhaseSpec

    out = []
    worst = 0.0
    for n in (4, 16):
        for rho in (0.25, 0.75):
            for alpha in (0.0, 1.0):
                for beta in (0.0, 5.0):
                    cfg = make_simplex(SimplexSpec(n=n, d=n + 1, q=1.5, rho=rho))
                    X = att_forward(cfg, AttentionParams.from_beta(beta, alpha)).x_next
                    pred = simplex_finite_n(rho, 1.5, alpha, beta, n)
                    worst = max(worst, abs(X[0] @ X[0] - pred.finite_n_length), abs(X[0] @ X[1] - pred.finite_n_inner))
    out.append(_check("theory", "finite_n_inner_products_vs_forward", worst, 1e-10))

    for n, rho, beta in [(8, 0.25, 1.0), (16, 0.5, 3.0)]:
        rr, uru, uu = simplex_frobenius_sums_numeric(n, n + 1, rho, beta)
        for name, num, closed in [
            ("rr_trace_sum", rr, simplex_rr_trace_sum(n, n + 1, rho, beta)),
            ("uru_sum", uru, simplex_uru_sum(n, rho, beta)),
            ("uu_sum", uu, simplex_uu_sum(n, rho, beta)),
        ]:
            out.append(_check("theory", f"{name}_n={n}_rho={rho}_beta={beta}", abs(num - closed) / abs(num), 1e-8))

    spec = ThreePhaseSpec(n=4096, tau=0.9, rho1=0.1, rho2=0.2, rho3=0.8, rho4=0.9, kappa3=0.05, kappa4=0.1)
    got = [classify_three_phase(spec, g).regime for g in (0.1, 2.0, 10.0)]
    want = [Regime.SUBCRITICAL, Regime.MIDDLE, Regime.SUPERCRITICAL]
    out.append(_check("theory", "three_phase_classifier_examples", float(sum(a != b for a, b in zip(got, want))), 0.0))
    return out


def simplex_suite() -> list[Check]:
    from .jacobian import frobenius_norm_exact
    from .theory import simplex_eta_finite_n

    out = []
    n, rho = 1024, 0.5
    cfg = make_simplex(SimplexSpec(n=n, d=n + 1, rho=rho))
    for gamma, target, tol in [(1.0, 1.0, 0.03), (2.0, 0.8, 0.03), (4.0, 0.5, 0.03)]:
        y = TokenConfig(att_forward(cfg, AttentionParams.from_gamma(gamma)).x_next).y
        c = float(y[0] @ y[1])
        out.append(_check("simplex", f"cosine_gamma={gamma}", abs(c - target), tol, f"measured {c:.4f}"))
    att = att_forward(cfg, AttentionParams.from_gamma(4.0)).att
    out.append(_check("simplex", "supercritical_att_near_identity", float(np.max(np.linalg.norm(att - cfg.y, axis=1))), 0.01))

    n = 128
    cfg = make_simplex(SimplexSpec(n=n, d=n + 1, rho=rho))
    for gamma in (1.0, 4.0):
        p = AttentionParams.from_gamma(gamma)
        got = frobenius_norm_exact(cfg, p).eta_exact
        want = simplex_eta_finite_n(n, n + 1, rho, p.beta_for(n))
        out.append(_check("simplex", f"eta_vs_exact_sums_gamma={gamma}", abs(got - want) / want, 1e-9))
    return out


def run_suite(name: str) -> list[Check]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    table = {"jacobian": jacobian_suite, "theory": theory_suite, "simplex": simplex_suite}
    names = list(table) if name == "all" else [name]
    return [c for s in names for c in table[s]()]


def report(checks: list[Check]) -> dict:
    return {
        "passed": all(c.passed for c in checks),
        "n_checks": len(checks),
        "n_failed": sum(not c.passed for c in checks),
        "checks": [asdict(c) for c in checks],
    }

