"""Angle-ratio and Jacobian-norm measurements, parameter sweeps over
(rho, gamma, d, seed) and their CSV / JSON outputs."""

from __future__ import annotations

import csv
import json
import math
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attention import AttentionParams, att_forward
from .errors import AttnLabError, BudgetExceeded, DegeneratePair, InvalidParam
from .tokens import (
    GaussianFactorSpec,
    SimplexSpec,
    ThreePhaseSpec,
    TokenConfig,
    make_simplex,
    make_three_phase,
    sample_gaussian_factor,
    summarize_geometry,
)

CSV_HEADER = ["rho", "gamma", "d", "n", "seed", "metric", "value", "stderr", "regime"]
METRICS = ("lambda", "eta_exact", "eta_hutchinson")
GENERATORS = ("simplex", "gaussian", "three-phase")
PAIR_TOL = 1e-12


def angle_defects(cfg: TokenConfig, iu) -> np.ndarray:
    """1 - <y_i, y_j> for the pairs ``iu``.

    Near-parallel pairs are recomputed as |y_i - y_j|^2 / 2, which avoids the
    cancellation in 1 - cos and is exactly 0 for identical directions.
    """
    out = 1.0 - cfg.gram()[iu]
    close = np.flatnonzero(out < 1e-6)
    # chunked so a near-total collapse does not allocate pairs x d at once
    step = max(1, int(4e6 // cfg.d))
    for s in range(0, close.size, step):
        k = close[s : s + step]
        diff = cfg.y[iu[0][k]] - cfg.y[iu[1][k]]
        out[k] = 0.5 * np.einsum("kd,kd->k", diff, diff)
    return np.maximum(out, 0.0)


def compute_lambda(before: TokenConfig, after: TokenConfig) -> float:
    """Mean over pairs of (1 - <y'_i, y'_j>) / (1 - <y_i, y_j>)."""
    if before.n != after.n:
        raise InvalidParam(f"token counts differ: {before.n} vs {after.n}")
    if before.n < 2:
        raise InvalidParam("lambda needs at least two tokens")
    iu = np.triu_indices(before.n, 1)
    den = angle_defects(before, iu)
    k = int(np.argmin(den))
    if den[k] < PAIR_TOL:
        raise DegeneratePair(f"input pair ({iu[0][k]}, {iu[1][k]}) has cosine within {PAIR_TOL} of 1")
    return float(np.mean(angle_defects(after, iu) / den))


def compute_eta(
    cfg: TokenConfig,
    params: AttentionParams,
    mode: str = "exact",
    probes: int = 256,
    seed: int = 0,
) -> tuple[float, float | None]:
    """(1/nd)|grad X'|^2 of the attention part alone; returns (eta, stderr)."""
    from .jacobian import frobenius_norm_exact, frobenius_norm_hutchinson

    params = params.with_alpha(0.0)
    if mode == "exact":
        return frobenius_norm_exact(cfg, params).eta_exact, None
    if mode == "hutchinson":
        rep = frobenius_norm_hutchinson(cfg, params, probes, seed=seed)
        return rep.eta_hutchinson, rep.eta_hutchinson_se
    raise InvalidParam(f"unknown eta mode {mode!r}")


@dataclass(frozen=True)
class SweepGrid:
    rho_values: tuple = (0.5,)
    gamma_values: tuple = (1.0,)
    d_values: tuple = (512,)
    n: int = 256
    alpha: float = 0.0
    seed: int = 0
    replicates: int = 1
    metrics: tuple = ("lambda",)
    generator: str = "gaussian"
    # gamma_values are multiples of 1/(1 - rho) when set
    gamma_relative: bool = False
    probes: int = 256
    # largest n^2 d handled per point
    budget: float = 5e10
    three_phase: ThreePhaseSpec | None = None

    def __post_init__(self):
        for name in ("rho_values", "gamma_values", "d_values", "metrics"):
            v = tuple(getattr(self, name))
            if not v:
                raise InvalidParam(f"{name} must be non-empty")
            object.__setattr__(self, name, v)
        bad = set(self.metrics) - set(METRICS)
        if bad:
            raise InvalidParam(f"unknown metrics {sorted(bad)}")
        if self.generator not in GENERATORS:
            raise InvalidParam(f"unknown generator {self.generator!r}")
        if self.n < 2 and "lambda" in self.metrics:
            raise InvalidParam("lambda needs n >= 2")
        if self.replicates < 1:
            raise InvalidParam("replicates must be >= 1")
        if self.generator == "three-phase" and self.three_phase is None:
            raise InvalidParam("three-phase generator needs a ThreePhaseSpec")

    def gamma_at(self, rho: float, g: float) -> float:
        return g / (1.0 - rho) if self.gamma_relative else g

    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.replicates)]

    def points(self):
        """(seed, rho index, gamma index, d index) in emission order."""
        for s in self.seeds():
            for ri in range(len(self.rho_values)):
                for gi in range(len(self.gamma_values)):
                    for di in range(len(self.d_values)):
                        yield s, ri, gi, di


@dataclass(frozen=True)
class SweepRecord:
    rho: float
    gamma: float
    d: int
    n: int
    seed: int
    metric: str
    value: float | None
    stderr: float | None = None
    regime: str = ""
    error: str | None = None

    @property
    def predicted_boundary(self) -> float:
        return 1.0 / (1.0 - self.rho) if self.rho < 1.0 else math.inf


def point_seed(seed: int, ri: int, gi: int, di: int) -> int:
    return int(np.random.SeedSequence([seed, ri, gi, di]).generate_state(1)[0])


def _make_config(grid: SweepGrid, rho: float, d: int, rng_seed: int) -> TokenConfig:
    if grid.generator == "simplex":
        return make_simplex(SimplexSpec(n=grid.n, d=d, q=1.0, rho=rho))
    if grid.generator == "gaussian":
        return sample_gaussian_factor(GaussianFactorSpec(n=grid.n, d=d, rho=rho, seed=rng_seed))
    return make_three_phase(replace(grid.three_phase, n=grid.n), d, seed=rng_seed)


def _regime(grid: SweepGrid, cfg: TokenConfig | None, gamma: float) -> str:
    from .theory import classify_three_phase, classify_two_phase

    try:
        if grid.generator == "three-phase":
            return str(classify_three_phase(replace(grid.three_phase, n=grid.n), gamma).regime)
        if cfg is None:
            return "Indeterminate"
        return str(classify_two_phase(summarize_geometry(cfg), gamma).regime)
    except AttnLabError:
        return "Indeterminate"


def evaluate_point(grid: SweepGrid, seed: int, ri: int, gi: int, di: int) -> list[SweepRecord]:
    """All metric records for one grid point; errors become records."""
    rho = grid.rho_values[ri]
    gamma = grid.gamma_at(rho, grid.gamma_values[gi])
    d = grid.d_values[di]
    base = dict(rho=rho, gamma=gamma, d=d, n=grid.n, seed=seed)
    rng_seed = point_seed(seed, ri, gi, di)
    cfg = None
    try:
        if float(grid.n) ** 2 * d > grid.budget:
            raise BudgetExceeded(f"n^2 d = {float(grid.n) ** 2 * d:.3g} exceeds {grid.budget:.3g}")
        cfg = _make_config(grid, rho, d, rng_seed)
    except AttnLabError as exc:
        kind = type(exc).__name__
        return [SweepRecord(**base, metric=m, value=None, regime="Indeterminate", error=kind) for m in grid.metrics]
    regime = _regime(grid, cfg, gamma)
    params = AttentionParams.from_gamma(gamma, grid.alpha)
    # pre-layer normalization: the layer sees unit tokens
    unit = TokenConfig(cfg.y)
    out = []
    for m in grid.metrics:
        value, se, err = None, None, None
        try:
            if m == "lambda":
                value = compute_lambda(unit, att_forward(unit, params).next_config())
            elif m == "eta_exact":
                value, se = compute_eta(unit, params, "exact")
            else:
                value, se = compute_eta(unit, params, "hutchinson", grid.probes, rng_seed)
        except AttnLabError as exc:
            err = type(exc).__name__
        out.append(SweepRecord(**base, metric=m, value=value, stderr=se, regime=regime, error=err))
    return out


def _evaluate_packed(args):
    return evaluate_point(*args)


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def run_sweep(grid: SweepGrid, workers: int | None = None) -> list[SweepRecord]:
    """Evaluate every grid point; output order is the grid order for any worker count."""
    tasks = [(grid, *p) for p in grid.points()]
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        chunks = [_evaluate_packed(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_evaluate_packed, tasks))
    return [r for chunk in chunks for r in chunk]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            value = f"error:{r.error}" if r.error else _fmt(r.value)
            w.writerow([_fmt(float(r.rho)), _fmt(float(r.gamma)), r.d, r.n, r.seed, r.metric, value, _fmt(r.stderr), r.regime])


def read_csv(path) -> list[SweepRecord]:
    out = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        if header != CSV_HEADER:
            raise InvalidParam(f"{path}: unexpected header {header}")
        for row in rows:
            rho, gamma, d, n, seed, metric, value, stderr, regime = row
            error = None
            if value.startswith("error:"):
                error, value = value[len("error:"):], None
            else:
                value = float(value) if value else None
            out.append(
                SweepRecord(
                    rho=float(rho),
                    gamma=float(gamma),
                    d=int(d),
                    n=int(n),
                    seed=int(seed),
                    metric=metric,
                    value=value,
                    stderr=float(stderr) if stderr else None,
                    regime=regime,
                    error=error,
                )
            )
    return out


def emit_boundary_overlay(grid: SweepGrid, path) -> None:
    """(rho, 1/(1 - rho)) for each rho of the grid; plots as the critical curve."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rho", "gamma"])
        for rho in grid.rho_values:
            w.writerow([repr(float(rho)), repr(1.0 / (1.0 - rho))])


# key=value sweep configuration

_LIST_KEYS = {"rho": "rho_values", "gamma": "gamma_values", "d": "d_values", "metrics": "metrics"}
_SCALAR_KEYS = {
    "n": int,
    "alpha": float,
    "seed": int,
    "replicates": int,
    "generator": str,
    "gamma_relative": lambda s: s.strip().lower() in ("1", "true", "yes", "on"),
    "probes": int,
    "budget": float,
}
_THREE_PHASE_KEYS = ("tau", "rho1", "rho2", "rho3", "rho4", "kappa3", "kappa4")


def parse_sweep_config(text: str) -> SweepGrid:
    """Parse ``key = value`` lines; list values are comma-separated, ``#`` starts a comment."""
    kw, tp = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidParam(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            if key in _LIST_KEYS:
                items = [v.strip() for v in val.split(",") if v.strip()]
                conv = str if key == "metrics" else (int if key == "d" else float)
                kw[_LIST_KEYS[key]] = tuple(conv(v) for v in items)
            elif key in _SCALAR_KEYS:
                kw[key] = _SCALAR_KEYS[key](val)
            elif key in _THREE_PHASE_KEYS:
                tp[key] = float(val)
            else:
                raise InvalidParam(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, InvalidParam):
                raise
            raise InvalidParam(f"line {lineno}: bad value for {key}: {val!r}") from None
    if tp:
        missing = [k for k in _THREE_PHASE_KEYS if k not in tp]
        if missing:
            raise InvalidParam(f"three-phase layout needs {missing}")
        kw["three_phase"] = ThreePhaseSpec(n=kw.get("n", SweepGrid.n), **tp)
    return SweepGrid(**kw)


def load_sweep_config(path) -> SweepGrid:
    return parse_sweep_config(Path(path).read_text())


def sweep_meta(grid: SweepGrid) -> dict:
    from . import __version__

    g = asdict(grid)
    return {
        "grid": g,
        "seeds": grid.seeds(),
        "point_seed": "SeedSequence([seed, rho_index, gamma_index, d_index])",
        "eta_input": "unit-normalized tokens, residual excluded",
        "build": {
            "attnlab": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }


def write_sweep_outputs(grid: SweepGrid, out_dir, workers: int | None = None) -> list[SweepRecord]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = run_sweep(grid, workers)
    emit_csv(records, out / "records.csv")
    emit_boundary_overlay(grid, out / "boundary.csv")
    (out / "meta.json").write_text(json.dumps(sweep_meta(grid), indent=2, sort_keys=True) + "\n")
    return records


@dataclass
class ConvergenceRow:
    n: int
    measured: float
    limit: float
    error: float = field(init=False)

    def __post_init__(self):
        self.error = abs(self.measured - self.limit)


def simplex_cos_convergence(rho: float, gamma: float, ns, q: float = 1.0, alpha: float = 0.0) -> list[ConvergenceRow]:
    """Exact one-layer simplex cosine against its large-n limit for each n."""
    from .theory import simplex_cos_limit, simplex_finite_n

    lim = simplex_cos_limit(rho, q, alpha, gamma)
    rows = []
    for n in ns:
        p = simplex_finite_n(rho, q, alpha, gamma * math.log(n), n)
        rows.append(ConvergenceRow(n, p.finite_n_cos, lim))
    return rows
