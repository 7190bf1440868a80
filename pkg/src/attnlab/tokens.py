"""Token configurations: exact simplices, Gaussian factor samples and
clustered three-phase layouts, plus their geometric summaries."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateToken,
    DimensionTooSmall,
    InfeasibleSpec,
    InvalidParam,
    TooFewTokens,
)

# membership slack for cosine intervals, absorbs round-off of exact constructions
COS_TOL = 1e-10


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TokenConfig:
    """n tokens in R^d. ``norms`` and ``y`` are always derived from ``x``."""

    x: np.ndarray
    norms: np.ndarray = field(init=False, repr=False)
    y: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64, copy=True)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise InvalidParam(f"tokens must be a non-empty n x d matrix, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InvalidParam("tokens contain non-finite entries")
        norms = np.linalg.norm(x, axis=1)
        bad = np.flatnonzero(norms == 0.0)
        if bad.size:
            raise DegenerateToken(f"token {bad[0]} has zero norm")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "norms", _frozen(norms))
        object.__setattr__(self, "y", _frozen(x / norms[:, None]))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def gram(self) -> np.ndarray:
        """Cosine matrix <y_i, y_j>."""
        return self.y @ self.y.T

    def permuted(self, perm) -> "TokenConfig":
        return TokenConfig(self.x[np.asarray(perm)])

    def rotated(self, rot: np.ndarray) -> "TokenConfig":
        """Apply x -> R x to every token (rows multiply by R^T)."""
        return TokenConfig(self.x @ np.asarray(rot).T)


@dataclass(frozen=True)
class SimplexSpec:
    n: int
    d: int
    q: float = 1.0
    rho: float = 0.5


@dataclass(frozen=True)
class GaussianFactorSpec:
    n: int
    d: int
    rho: float
    seed: int = 0


@dataclass(frozen=True)
class GeometrySummary:
    q1: float
    q2: float
    rho1: float
    rho2: float
    all_pairs_positive: bool
    argmin_pair: tuple[int, int] = (-1, -1)


@dataclass(frozen=True)
class ThreePhaseSpec:
    n: int
    tau: float
    rho1: float
    rho2: float
    rho3: float
    rho4: float
    kappa3: float
    kappa4: float

    def __post_init__(self):
        if self.n < 2:
            raise InvalidParam("three-phase layouts need n >= 2")
        if not 0.0 < self.tau <= 1.0:
            raise InvalidParam(f"tau must lie in (0, 1], got {self.tau}")
        if not 0.0 <= self.rho1 <= self.rho2 < self.rho3 <= self.rho4 < 1.0:
            raise InvalidParam("need 0 <= rho1 <= rho2 < rho3 <= rho4 < 1")
        if not 0.0 < self.kappa3 <= self.kappa4:
            raise InvalidParam("need 0 < kappa3 <= kappa4")

    def technical_condition(self) -> bool:
        """(1 - tau)(1 - rho2) + rho2 < rho3: guarantees a non-empty middle window."""
        return (1.0 - self.tau) * (1.0 - self.rho2) + self.rho2 < self.rho3

    def cluster_bounds(self) -> tuple[float, float]:
        scale = self.n ** self.tau
        return self.kappa3 * scale, self.kappa4 * scale


@dataclass
class ThreePhaseReport:
    valid: bool
    violations: list[str]
    cluster_sizes: np.ndarray

    def __bool__(self):
        return self.valid


def make_simplex(spec: SimplexSpec) -> TokenConfig:
    """Equal norms sqrt(q) and equal pairwise cosines rho.

    Uses y_i = sqrt(rho) e_0 + sqrt(1 - rho) e_i on orthonormal axes, which is
    exact by construction and needs d >= n + 1.
    """
    n, d, q, rho = spec.n, spec.d, spec.q, spec.rho
    if n < 1:
        raise InvalidParam("n must be >= 1")
    if not 0.0 < rho < 1.0:
        raise InvalidParam(f"rho must lie in (0, 1), got {rho}")
    if not q > 0.0:
        raise InvalidParam(f"q must be positive, got {q}")
    if d < n + 1:
        raise DimensionTooSmall(f"simplex of {n} tokens needs d >= {n + 1}, got {d}")
    y = np.zeros((n, d))
    y[:, 0] = np.sqrt(rho)
    y[np.arange(n), np.arange(1, n + 1)] = np.sqrt(1.0 - rho)
    return TokenConfig(np.sqrt(q) * y)


def sample_gaussian_factor(spec: GaussianFactorSpec) -> TokenConfig:
    """x_i = sqrt(rho) z_0 + sqrt(1 - rho) z_i with i.i.d. z ~ N(0, I/d),
    so that E|x_i|^2 = 1 and E<x_i, x_j> = rho."""
    if not 0.0 <= spec.rho <= 1.0:
        raise InvalidParam(f"rho must lie in [0, 1], got {spec.rho}")
    if spec.n < 1 or spec.d < 1:
        raise InvalidParam("n and d must be >= 1")
    rng = np.random.default_rng(spec.seed)
    z0 = rng.standard_normal(spec.d)
    z = rng.standard_normal((spec.n, spec.d))
    x = np.sqrt(spec.rho) * z0[None, :] + np.sqrt(1.0 - spec.rho) * z
    return TokenConfig(x / np.sqrt(spec.d))


def summarize_geometry(cfg: TokenConfig) -> GeometrySummary:
    if cfg.n < 2:
        raise TooFewTokens("geometry summary needs at least two tokens")
    sq = cfg.norms**2
    g = cfg.gram()
    off = ~np.eye(cfg.n, dtype=bool)
    lo = np.where(off, g, np.inf)
    k = int(np.argmin(lo))
    rho1 = float(lo.flat[k])
    rho2 = float(np.where(off, g, -np.inf).max())
    return GeometrySummary(
        q1=float(sq.min()),
        q2=float(sq.max()),
        rho1=rho1,
        rho2=rho2,
        all_pairs_positive=rho1 > 0.0,
        argmin_pair=divmod(k, cfg.n),
    )


def _group_sizes(spec: ThreePhaseSpec) -> np.ndarray:
    lo, hi = spec.cluster_bounds()
    target = int(round(np.sqrt(lo * hi)))
    m = min(max(target + 1, 2), spec.n)
    groups = max(1, int(round(spec.n / m)))
    sizes = np.array([len(c) for c in np.array_split(np.arange(spec.n), groups)])
    if sizes.min() - 1 < lo - 1e-9 or sizes.max() - 1 > hi + 1e-9:
        raise InfeasibleSpec(
            f"cannot split {spec.n} tokens into groups with |K_i| in [{lo:.3g}, {hi:.3g}]"
        )
    return sizes


def make_three_phase(
    spec: ThreePhaseSpec,
    d: int,
    seed: int = 0,
    cross_cos: float | None = None,
    cluster_cos: float | None = None,
) -> TokenConfig:
    """Unit tokens in groups of size about sqrt(kappa3 kappa4) n^tau.

    y_i = sqrt(s0) e_0 + sqrt(s1) f_g + sqrt(s2) e_i, so tokens in different
    groups have cosine ``cross_cos`` = s0 and tokens sharing a group have
    ``cluster_cos`` = s0 + s1 (defaults: interval midpoints). Group
    membership is shuffled with ``seed``. Requires d >= 1 + groups + n.
    """
    if not spec.technical_condition():
        raise InfeasibleSpec(
            f"(1 - tau)(1 - rho2) + rho2 = "
            f"{(1 - spec.tau) * (1 - spec.rho2) + spec.rho2:.6g} is not < rho3 = {spec.rho3}"
        )
    s0 = 0.5 * (spec.rho1 + spec.rho2) if cross_cos is None else cross_cos
    c = 0.5 * (spec.rho3 + spec.rho4) if cluster_cos is None else cluster_cos
    if not spec.rho1 <= s0 <= spec.rho2 or not spec.rho3 <= c <= spec.rho4:
        raise InvalidParam("target cosines must lie inside their intervals")
    sizes = _group_sizes(spec)
    groups = len(sizes)
    need = 1 + groups + spec.n
    if d < need:
        raise InfeasibleSpec(f"layout with {groups} groups needs d >= {need}, got {d}")
    if groups == 1:
        # a single cluster: only the in-group cosine matters
        s0 = c
    s1, s2 = c - s0, 1.0 - c
    label = np.repeat(np.arange(groups), sizes)
    label = np.random.default_rng(seed).permutation(label)
    n = spec.n
    y = np.zeros((n, d))
    y[:, 0] = np.sqrt(s0)
    y[np.arange(n), 1 + label] += np.sqrt(s1)
    y[np.arange(n), 1 + groups + np.arange(n)] = np.sqrt(s2)
    return TokenConfig(y)


def cluster_sets(cfg: TokenConfig, spec: ThreePhaseSpec, gram: np.ndarray | None = None) -> np.ndarray:
    """Boolean n x n mask of K_i membership (row i lists K_i)."""
    g = cfg.gram() if gram is None else gram
    mask = (g >= spec.rho3 - COS_TOL) & (g <= spec.rho4 + COS_TOL)
    np.fill_diagonal(mask, False)
    return mask


def validate_three_phase(cfg: TokenConfig, spec: ThreePhaseSpec, max_report: int = 10) -> ThreePhaseReport:
    """Recount every K_i from the Gram matrix and check the clustered layout
    conditions. Never raises on a bad layout; returns the verdict instead."""
    violations: list[str] = []

    def note(msg):
        if len(violations) < max_report:
            violations.append(msg)

    ok = True
    if cfg.n != spec.n:
        ok = False
        note(f"config has n={cfg.n}, spec expects n={spec.n}")
        return ThreePhaseReport(False, violations, np.zeros(0, dtype=int))
    if not spec.technical_condition():
        ok = False
        note("technical condition (1 - tau)(1 - rho2) + rho2 < rho3 fails")
    g = cfg.gram()
    mask = cluster_sets(cfg, spec, g)
    sizes = mask.sum(axis=1)
    lo, hi = spec.cluster_bounds()
    for i in np.flatnonzero((sizes < lo - 1e-9) | (sizes > hi + 1e-9)):
        ok = False
        note(f"|K_{i}| = {sizes[i]} outside [{lo:.4g}, {hi:.4g}]")
    rest = ~mask
    np.fill_diagonal(rest, False)
    bad = rest & ((g < spec.rho1 - COS_TOL) | (g > spec.rho2 + COS_TOL))
    for i, j in zip(*np.nonzero(bad)):
        ok = False
        note(f"<y_{i}, y_{j}> = {g[i, j]:.6g} is in neither [rho1, rho2] nor [rho3, rho4]")
        if len(violations) >= max_report:
            break
    return ThreePhaseReport(ok, violations, sizes)


_HEADER = re.compile(r"#\s*n=(\d+)\s+d=(\d+)")


def write_tokens_csv(cfg: TokenConfig, path) -> None:
    np.savetxt(path, cfg.x, delimiter=",", fmt="%.17g", header=f"n={cfg.n} d={cfg.d}", comments="# ")


def read_tokens_csv(path) -> TokenConfig:
    text = Path(path).read_text()
    first = text.lstrip().splitlines()[0] if text.strip() else ""
    m = _HEADER.match(first)
    x = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if m:
        n, d = int(m.group(1)), int(m.group(2))
        if x.shape != (n, d):
            raise InvalidParam(f"{path}: header says {n}x{d}, body is {x.shape[0]}x{x.shape[1]}")
    return TokenConfig(x)
