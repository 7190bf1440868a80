"""Command line entry point ``attn``.

Exit codes: 0 success, 1 compute or validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .attention import AttentionParams, att_forward, iterate_layers
from .errors import AttnLabError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _add_scale(p: argparse.ArgumentParser, alpha=True):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--gamma", type=float, help="scale exponent, beta = gamma * ln(n) (dimensionless)")
    g.add_argument("--beta", type=float, help="inverse temperature used directly (dimensionless)")
    if alpha:
        p.add_argument("--alpha", type=float, default=0.0, help="residual weight (dimensionless)")


def _params(args) -> AttentionParams:
    alpha = getattr(args, "alpha", 0.0)
    if args.gamma is not None:
        return AttentionParams.from_gamma(args.gamma, alpha)
    return AttentionParams.from_beta(args.beta, alpha)


def _tokens(path):
    from .tokens import read_tokens_csv

    if not Path(path).is_file():
        raise UsageError(f"tokens file not found: {path}")
    return read_tokens_csv(path)


def _writable(path) -> Path:
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")
    return path


def _three_phase_spec(args):
    from .tokens import ThreePhaseSpec

    return ThreePhaseSpec(
        n=args.n,
        tau=args.tau,
        rho1=args.rho1,
        rho2=args.rho2,
        rho3=args.rho3,
        rho4=args.rho4,
        kappa3=args.kappa3,
        kappa4=args.kappa4,
    )


def _add_three_phase(p):
    p.add_argument("--tau", type=float, default=0.9, help="cluster size exponent, |K_i| ~ n^tau")
    p.add_argument("--rho1", type=float, default=0.1, help="lower cross-cluster cosine")
    p.add_argument("--rho2", type=float, default=0.2, help="upper cross-cluster cosine")
    p.add_argument("--rho3", type=float, default=0.8, help="lower in-cluster cosine")
    p.add_argument("--rho4", type=float, default=0.9, help="upper in-cluster cosine")
    p.add_argument("--kappa3", type=float, default=0.05, help="lower cluster size factor")
    p.add_argument("--kappa4", type=float, default=0.1, help="upper cluster size factor")


def cmd_generate(args) -> int:
    from . import tokens as tk

    out = _writable(args.out)
    if args.kind == "simplex":
        d = args.d if args.d is not None else args.n + 1
        cfg = tk.make_simplex(tk.SimplexSpec(n=args.n, d=d, q=args.q, rho=args.rho))
    elif args.kind == "gaussian":
        if args.d is None:
            raise UsageError("--d is required for gaussian tokens")
        cfg = tk.sample_gaussian_factor(tk.GaussianFactorSpec(n=args.n, d=args.d, rho=args.rho, seed=args.seed))
    else:
        spec = _three_phase_spec(args)
        sizes = tk._group_sizes(spec)
        d = args.d if args.d is not None else 1 + len(sizes) + args.n
        cfg = tk.make_three_phase(spec, d, seed=args.seed)
    tk.write_tokens_csv(cfg, out)
    print(f"wrote {cfg.n} x {cfg.d} tokens to {out}")
    return EXIT_OK


def cmd_forward(args) -> int:
    from .tokens import write_tokens_csv

    cfg = _tokens(args.tokens)
    out = _writable(args.out)
    params = _params(args)
    res = att_forward(cfg, params)
    write_tokens_csv(res.next_config(), out)
    rows = res.A.sum(axis=1)
    side = {
        "n": cfg.n,
        "d": cfg.d,
        "beta": res.beta,
        "gamma": params.gamma_for(cfg.n),
        "alpha": params.alpha,
        "log_z": res.log_z.tolist(),
        "row_sum_max_abs_dev": float(np.max(np.abs(rows - 1.0))),
        "att_norm_max": float(np.max(np.linalg.norm(res.att, axis=1))),
    }
    out.with_suffix(".json").write_text(json.dumps(side, indent=2) + "\n")
    print(f"wrote {out} and {out.with_suffix('.json')}")
    return EXIT_OK


def cmd_iterate(args) -> int:
    from .attention import final_config
    from .tokens import write_tokens_csv

    cfg = _tokens(args.tokens)
    out = _writable(args.out) if args.out else None
    params = _params(args)
    rows = []
    for s in iterate_layers(cfg, params, args.layers):
        g = s.geometry
        rows.append(
            {
                "layer": s.layer,
                "rho1": g.rho1 if g else None,
                "rho2": g.rho2 if g else None,
                "lambda": s.lam,
                "min_norm": s.min_norm,
                "max_norm": s.max_norm,
            }
        )
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        print("layer  rho1        rho2        lambda      min_norm    max_norm")
        for r in rows:
            vals = [r[k] for k in ("rho1", "rho2", "lambda", "min_norm", "max_norm")]
            print(f"{r['layer']:>5}  " + "  ".join("-".ljust(10) if v is None else f"{v:<10.6g}" for v in vals))
    if out:
        write_tokens_csv(final_config(cfg, params, args.layers), out)
    return EXIT_OK


def cmd_jacobian(args) -> int:
    from .jacobian import finite_difference_block, frobenius_norm_exact, frobenius_norm_hutchinson, jacobian_block

    cfg = _tokens(args.tokens)
    out = _writable(args.out) if args.out else None
    params = _params(args)
    if not (args.exact or args.hutchinson or args.fd_check):
        args.exact = True
    rep = {
        "n": cfg.n,
        "d": cfg.d,
        "gamma": params.gamma_for(cfg.n),
        "beta": params.beta_for(cfg.n),
        "alpha": params.alpha,
        "alpha_included": args.include_alpha,
    }
    if args.exact:
        rep["eta_exact"] = frobenius_norm_exact(cfg, params, include_alpha=args.include_alpha, budget=args.budget).eta_exact
    if args.hutchinson:
        h = frobenius_norm_hutchinson(cfg, params, args.hutchinson, seed=args.seed, include_alpha=args.include_alpha)
        rep["eta_hutch"] = h.eta_hutchinson
        rep["eta_hutch_se"] = h.eta_hutchinson_se
        rep["probes"] = args.hutchinson
    if args.fd_check:
        rng = np.random.default_rng(args.seed)
        worst = 0.0
        for _ in range(args.fd_check):
            i, j = (int(v) for v in rng.integers(0, cfg.n, size=2))
            M = jacobian_block(cfg, params, i, j).M
            F = finite_difference_block(cfg, params, i, j)
            worst = max(worst, float(np.linalg.norm(M - F) / max(np.linalg.norm(F), 1e-300)))
        rep["fd_max_rel_err"] = worst
    text = json.dumps(rep, indent=2) + "\n"
    if out:
        out.write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    from . import theory as th

    if args.case == "simplex":
        if args.rho is None:
            raise UsageError("--rho is required for the simplex case")
        rec = {
            "case": "simplex",
            "rho": args.rho,
            "gamma": args.gamma,
            "q": args.q,
            "alpha": args.alpha,
            "critical_gamma": th.critical_gamma(args.rho),
            "regime": str(th.simplex_case(args.rho, args.gamma)),
            "cos_limit": th.simplex_cos_limit(args.rho, args.q, args.alpha, args.gamma),
            "length_limit": th.simplex_length_limit(args.rho, args.q, args.alpha, args.gamma),
            "eta_limit": th.simplex_eta_limit(args.rho, args.q, args.d, args.gamma),
        }
        if args.n is not None:
            p = th.simplex_finite_n(args.rho, args.q, args.alpha, args.gamma * math.log(args.n), args.n)
            rec.update(n=args.n, finite_n_cos=p.finite_n_cos, finite_n_log_z=p.finite_n_log_z)
            if args.alpha == 0.0:
                rec["finite_n_eta"] = th.simplex_eta_finite_n(args.n, args.d, args.rho, args.gamma * math.log(args.n), args.q)
        z = th.z_partition_prediction(args.gamma, rho=args.rho)
    else:
        if args.n is None:
            raise UsageError("--n is required for the three-phase case")
        spec = _three_phase_spec(args)
        v = th.classify_three_phase(spec, args.gamma)
        rec = {"case": "three-phase", "gamma": args.gamma, "regime": str(v.regime), "thresholds": v.thresholds}
        z = th.z_partition_prediction(args.gamma, spec=spec) if v.regime is not th.Regime.INDETERMINATE else None
    if z is not None:
        rec["z_dominant"] = z.dominant
        rec["z_prefactor"] = z.prefactor
        rec["z_reference"] = z.reference
    if args.json:
        print(json.dumps(rec, indent=2))
    else:
        for k, v in rec.items():
            print(f"{k}: {v}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from dataclasses import replace

    from .experiments import load_sweep_config, write_sweep_outputs

    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    grid = load_sweep_config(args.config)
    if args.seed is not None:
        grid = replace(grid, seed=args.seed)
    records = write_sweep_outputs(grid, args.out, workers=args.workers)
    failed = sum(r.error is not None for r in records)
    print(f"wrote {len(records)} records to {Path(args.out) / 'records.csv'} ({failed} with errors)")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import report, run_suite

    checks = run_suite(args.suite)
    for c in checks:
        print(c.line())
    rep = report(checks)
    if args.out:
        _writable(args.out).write_text(json.dumps(rep, indent=2) + "\n")
    if rep["passed"]:
        print(f"all {rep['n_checks']} checks passed")
        return EXIT_OK
    first = next(c for c in checks if not c.passed)
    print(f"{rep['n_failed']} of {rep['n_checks']} checks failed; first: {first.suite}/{first.name}", file=sys.stderr)
    return EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="attn", description="Scaled softmax attention phase toolkit.", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a token configuration CSV", formatter_class=fmt)
    p.add_argument("--kind", choices=["simplex", "gaussian", "three-phase"], default="simplex", help="token generator")
    p.add_argument("--n", type=int, required=True, help="number of tokens")
    p.add_argument("--d", type=int, default=None, help="dimension (simplex default n+1; three-phase default minimal)")
    p.add_argument("--rho", type=float, default=0.5, help="pairwise cosine (simplex) or factor weight (gaussian)")
    p.add_argument("--q", type=float, default=1.0, help="squared token norm for the simplex")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    _add_three_phase(p)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("forward", help="apply one attention layer", formatter_class=fmt)
    p.add_argument("--tokens", required=True, help="input tokens CSV")
    _add_scale(p)
    p.add_argument("--out", required=True, help="output tokens CSV; a .json sidecar is written next to it")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("iterate", help="apply several layers and report geometry per layer", formatter_class=fmt)
    p.add_argument("--tokens", required=True, help="input tokens CSV")
    _add_scale(p)
    p.add_argument("--layers", type=int, default=1, help="number of layers")
    p.add_argument("--out", default=None, help="optional CSV for the final tokens")
    p.add_argument("--json", action="store_true", help="print per-layer summaries as JSON")
    p.set_defaults(func=cmd_iterate)

    p = sub.add_parser("jacobian", help="Jacobian norm of one layer", formatter_class=fmt)
    p.add_argument("--tokens", required=True, help="input tokens CSV")
    _add_scale(p)
    p.add_argument("--exact", action="store_true", help="exact (1/nd)|J|_F^2 (default when nothing else is asked)")
    p.add_argument("--hutchinson", type=int, default=0, metavar="PROBES", help="Rademacher probe count (0 = off)")
    p.add_argument("--fd-check", type=int, default=0, metavar="PAIRS", help="random (i, j) blocks checked by finite differences")
    p.add_argument("--include-alpha", action="store_true", help="include the residual alpha*I term")
    p.add_argument("--budget", type=float, default=2e11, help="cap on n^2 d^2 for streamed blocks")
    p.add_argument("--seed", type=int, default=0, help="seed for probes and FD pair choice")
    p.add_argument("--out", default=None, help="output JSON report path")
    p.set_defaults(func=cmd_jacobian)

    p = sub.add_parser("predict", help="closed-form phase predictions", formatter_class=fmt)
    p.add_argument("--case", choices=["simplex", "three-phase"], required=True, help="geometry")
    p.add_argument("--gamma", type=float, required=True, help="scale exponent, beta = gamma * ln(n)")
    p.add_argument("--rho", type=float, default=None, help="simplex pairwise cosine")
    p.add_argument("--q", type=float, default=1.0, help="simplex squared norm")
    p.add_argument("--alpha", type=float, default=0.0, help="residual weight")
    p.add_argument("--d", type=int, default=513, help="dimension used in the eta limit")
    p.add_argument("--n", type=int, default=None, help="token count for finite-n values")
    _add_three_phase(p)
    p.add_argument("--json", action="store_true", help="print the record as JSON")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="run a parameter sweep from a key=value config", formatter_class=fmt)
    p.add_argument("--config", required=True, help="sweep config file")
    p.add_argument("--out", default="sweep_out", help="output directory")
    p.add_argument("--workers", type=int, default=None, help="worker processes; None means all available cores")
    p.add_argument("--seed", type=int, default=None, help="base seed, overrides the config")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run built-in invariant suites", formatter_class=fmt)
    p.add_argument("--suite", choices=["all", "jacobian", "theory", "simplex"], default="all", help="suite to run")
    p.add_argument("--out", default=None, help="optional JSON report path")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"attn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AttnLabError, OSError) as exc:
        print(f"attn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
