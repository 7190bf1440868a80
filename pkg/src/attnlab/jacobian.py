"""Jacobian of the layer map X -> ATT(N(X)) (+ alpha X).

Block convention: ``M[u, v] = d (x'_j)_v / d (x_i)_u`` for the d x d block
indexed by (i, j). Writing A for the softmax weights, p_j = ATT(y_j) and
P_i = I - y_i y_i^T, every block factors as

    M_ij = P_i G_ij / |x_i|,
    G_ij = A_ji I + beta A_ji y_j (y_i - p_j)^T + [i == j] beta (S_j - p_j p_j^T),

with S_j = sum_m A_jm y_m y_m^T. Only ratios A_ji = exp(a_ji) / Z_j enter,
so nothing overflows at large beta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, softmax_rows, layer_map
from .errors import BudgetExceeded, InvalidParam
from .tokens import TokenConfig, summarize_geometry

# caps on dense work; callers may raise them explicitly
DEFAULT_BLOCK_BUDGET = 2e11  # n^2 d^2 scalar entries streamed
DEFAULT_DENSE_ND = 4500  # side of a materialized nd x nd Jacobian


@dataclass(frozen=True)
class JacobianBlock:
    i: int
    j: int
    M: np.ndarray


@dataclass
class JacobianReport:
    n: int
    d: int
    beta: float
    alpha: float
    alpha_included: bool
    eta_exact: float | None = None
    eta_hutchinson: float | None = None
    eta_hutchinson_se: float | None = None
    probes: int | None = None
    method: str = ""
    block_norms_sq: np.ndarray | None = field(default=None, repr=False)

    @property
    def frob_sq(self) -> float | None:
        return None if self.eta_exact is None else self.eta_exact * self.n * self.d


@dataclass(frozen=True)
class _Layer:
    y: np.ndarray
    norms: np.ndarray
    A: np.ndarray
    p: np.ndarray
    beta: float


def _layer(cfg: TokenConfig, params: AttentionParams) -> _Layer:
    beta = params.beta_for(cfg.n)
    A, _, _ = softmax_rows(beta * cfg.gram())
    return _Layer(cfg.y, cfg.norms, A, A @ cfg.y, beta)


def _blocks_for_output(L: _Layer, j: int, rows: np.ndarray) -> np.ndarray:
    """Blocks M_ij for i in ``rows`` and a fixed output token j, shape (len(rows), d, d)."""
    y, A, beta = L.y, L.A, L.beta
    d = y.shape[1]
    yi = y[rows]
    a = A[j, rows]
    c = yi @ y[j]
    w = yi - L.p[j]
    proj_yj = y[j][None, :] - c[:, None] * yi  # P_i y_j
    M = -a[:, None, None] * yi[:, :, None] * yi[:, None, :]
    M[:, np.arange(d), np.arange(d)] += a[:, None]
    M += (beta * a)[:, None, None] * proj_yj[:, :, None] * w[:, None, :]
    hit = np.flatnonzero(rows == j)
    if hit.size:
        S = (y * A[j][:, None]).T @ y
        C = S - np.outer(L.p[j], L.p[j])
        M[hit[0]] += beta * (C - np.outer(y[j], y[j] @ C))
    return M / L.norms[rows][:, None, None]


def jacobian_block(cfg: TokenConfig, params: AttentionParams, i: int, j: int) -> JacobianBlock:
    """Attention part only (alpha excluded)."""
    L = _layer(cfg, params)
    return JacobianBlock(i, j, _blocks_for_output(L, j, np.array([i]))[0])


def iter_blocks(cfg: TokenConfig, params: AttentionParams, chunk: int | None = None):
    """Yield ``(j, rows, blocks)`` covering every (i, j) exactly once."""
    L = _layer(cfg, params)
    n, d = cfg.n, cfg.d
    if chunk is None:
        chunk = max(1, min(n, int(5e6 // (d * d))))
    for j in range(n):
        for start in range(0, n, chunk):
            rows = np.arange(start, min(n, start + chunk))
            yield j, rows, _blocks_for_output(L, j, rows)


def simplex_jacobian_block(cfg: TokenConfig, params: AttentionParams, i: int, j: int) -> JacobianBlock:
    """Closed-form block for an exact simplex (equal norms, equal cosines).

    Uses V = sum y_m, W = sum y_m y_m^T and the rank-one split of V_j; every
    exponential is divided by e^beta first.
    """
    s = summarize_geometry(cfg)
    if s.q2 - s.q1 > 1e-10 * s.q2 or s.rho2 - s.rho1 > 1e-10:
        raise InvalidParam("simplex fast path needs equal norms and equal pairwise cosines")
    q, rho, n = s.q1, s.rho1, cfg.n
    beta = params.beta_for(n)
    y = cfg.y
    d = cfg.d
    V = y.sum(axis=0)
    W = y.T @ y
    er = np.exp(-beta * (1.0 - rho))  # e^{beta rho} / e^beta
    eij = 1.0 if i == j else er  # e^{beta <y_j, y_i>} / e^beta
    Z = 1.0 + (n - 1) * er
    yi, yj = y[i], y[j]
    proj = lambda v: v - (v @ yi) * yi  # noqa: E731
    I = np.eye(d)
    R1 = beta * er * (W - np.outer(yi, W @ yi)) if i == j else np.zeros((d, d))
    R2 = eij * (np.outer(-yi + beta * proj(yj), yi) + I)
    U1 = beta * er * proj(V) if i == j else np.zeros(d)
    U2 = beta * eij * proj(yj)
    U34 = (1.0 - er) * yj + er * V
    M = ((R1 + R2) * Z - np.outer(U1 + U2, U34)) / (Z * Z) / np.sqrt(q)
    return JacobianBlock(i, j, M)


def finite_difference_block(
    cfg: TokenConfig, params: AttentionParams, i: int, j: int, h: float = 1e-5
) -> np.ndarray:
    """Central differences of the j-th output of ATT(N(X)) along each coordinate
    of x_i. The step is scale-relative: h * max(1, |x_i|)."""
    if not h > 0:
        raise InvalidParam("h must be positive")
    beta = params.beta_for(cfg.n)
    step = h * max(1.0, float(cfg.norms[i]))
    x = np.array(cfg.x)
    M = np.empty((cfg.d, cfg.d))
    for u in range(cfg.d):
        old = x[i, u]
        x[i, u] = old + step
        fp = layer_map(x, beta)[j]
        x[i, u] = old - step
        fm = layer_map(x, beta)[j]
        x[i, u] = old
        M[u] = (fp - fm) / (2.0 * step)
    return M


def block_norms_sq(cfg: TokenConfig, params: AttentionParams, include_alpha: bool = False) -> np.ndarray:
    """Squared Frobenius norm of every block, ``F[j, i] = |M_ij|^2``.

    Evaluated from n x n Gram-space identities in O(n^3 + n^2 d) time
    without forming any d x d block.
    """
    L = _layer(cfg, params)
    n, d, beta = cfg.n, cfg.d, L.beta
    K = cfg.gram()
    A = L.A
    G = A @ K  # G[j, m] = <p_j, y_m>
    s = np.einsum("jm,jm->j", A, G)  # |p_j|^2
    gjj = np.diag(G).copy()

    # i != j: G_ij = A_ji (I + beta y_j w^T), w = y_i - p_j
    w2 = 1.0 - 2.0 * G + s[:, None]
    yj_w = K - gjj[:, None]
    yi_w = 1.0 - G
    full = d + 2 * beta * yj_w + beta**2 * w2
    along = 1.0 + 2 * beta * K * yi_w + beta**2 * K**2 * w2
    F = A**2 * (full - along)

    # i == j: G_jj = A_jj I + N, N = beta Y^T Q Y,
    # Q = diag(a) - a a^T + e_j r^T, r = A_jj (e_j - a)
    ajj = np.diag(A).copy()
    trN = beta * (1.0 - s + ajj * (1.0 - gjj))
    yNy = beta * (np.einsum("jm,jm->j", A, K**2) - gjj**2 + ajj * (1.0 - gjj))
    aKKa = np.einsum("jm,jm->j", A @ (K * K), A)
    mid = -np.einsum("jm,jm->j", A, G**2) + ajj * np.einsum("jm,jm->j", A * K, K - G)
    uv = s**2 - 2.0 * gjj * ajj * (gjj - s) + ajj**2 * (1.0 - 2.0 * gjj + s)
    N2 = beta**2 * (aKKa + 2.0 * mid + uv)
    Zr = A * K - gjj[:, None] * A - ajj[:, None] * A
    Zr[np.arange(n), np.arange(n)] += ajj
    yN2 = beta**2 * np.einsum("jm,jm->j", Zr @ K, Zr)
    diag = ajj**2 * (d - 1) + 2.0 * ajj * (trN - yNy) + N2 - yN2
    F[np.arange(n), np.arange(n)] = diag
    F = F / (cfg.norms**2)[None, :]
    if include_alpha and params.alpha:
        alpha = params.alpha
        tr = (ajj * (d - 1) + trN - yNy) / cfg.norms
        F[np.arange(n), np.arange(n)] += 2.0 * alpha * tr + alpha**2 * d
    return np.maximum(F, 0.0)


def frobenius_norm_exact(
    cfg: TokenConfig,
    params: AttentionParams,
    method: str = "gram",
    include_alpha: bool = False,
    budget: float = DEFAULT_BLOCK_BUDGET,
) -> JacobianReport:
    """eta = |grad_X X'|_F^2 / (n d), exact.

    ``method="gram"`` uses the closed-form per-block norms; ``"blocks"``
    streams every d x d block explicitly (subject to ``budget`` on n^2 d^2).
    """
    n, d = cfg.n, cfg.d
    beta = params.beta_for(n)
    alpha = params.alpha if include_alpha else 0.0
    if method == "gram":
        F = block_norms_sq(cfg, params, include_alpha=include_alpha)
    elif method == "blocks":
        if float(n) ** 2 * float(d) ** 2 > budget:
            raise BudgetExceeded(f"n^2 d^2 = {float(n)**2 * float(d)**2:.3g} exceeds budget {budget:.3g}")
        F = np.zeros((n, n))
        eye = np.eye(d)
        for j, rows, blocks in iter_blocks(cfg, params):
            hit = np.flatnonzero(rows == j)
            if alpha and hit.size:
                blocks[hit[0]] += alpha * eye
            F[j, rows] = np.einsum("kuv,kuv->k", blocks, blocks)
    else:
        raise InvalidParam(f"unknown method {method!r}")
    return JacobianReport(
        n=n,
        d=d,
        beta=beta,
        alpha=params.alpha,
        alpha_included=include_alpha,
        eta_exact=float(F.sum() / (n * d)),
        method=method,
        block_norms_sq=F,
    )


def jvp(cfg: TokenConfig, params: AttentionParams, V: np.ndarray, include_alpha: bool = False) -> np.ndarray:
    """Directional derivatives of the layer map for a batch of tangents.

    ``V`` has shape (k, n, d); returns (k, n, d) with out[t] = J V[t].
    """
    L = _layer(cfg, params)
    y, A, beta = L.y, L.A, L.beta
    V = np.asarray(V, dtype=np.float64)
    dy = (V - np.einsum("knd,nd->kn", V, y)[..., None] * y) / L.norms[None, :, None]
    cross = dy @ y.T  # <dy_j, y_m>
    dS = beta * (cross + np.swapaxes(cross, 1, 2))
    dA = A * (dS - np.einsum("jm,kjm->kj", A, dS)[..., None])
    out = A @ dy + dA @ y
    if include_alpha and params.alpha:
        out = out + params.alpha * V
    return out


def frobenius_norm_hutchinson(
    cfg: TokenConfig,
    params: AttentionParams,
    probes: int,
    seed: int = 0,
    include_alpha: bool = False,
    chunk: int = 256,
) -> JacobianReport:
    """Hutchinson estimate of tr(J^T J) = E |J v|^2 over Rademacher v.

    Probes are drawn in fixed-size chunks, each from its own child seed, so
    the estimate does not depend on how the work is scheduled.
    """
    if probes < 1:
        raise InvalidParam("probes must be >= 1")
    n, d = cfg.n, cfg.d
    children = np.random.SeedSequence(seed).spawn((probes + chunk - 1) // chunk)
    vals = []
    left = probes
    for child in children:
        k = min(chunk, left)
        left -= k
        rng = np.random.default_rng(child)
        V = rng.integers(0, 2, size=(k, n, d)).astype(np.float64) * 2.0 - 1.0
        JV = jvp(cfg, params, V, include_alpha=include_alpha)
        vals.append(np.einsum("knd,knd->k", JV, JV))
    vals = np.concatenate(vals)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(probes)) if probes > 1 else float("inf")
    nd = n * d
    return JacobianReport(
        n=n,
        d=d,
        beta=params.beta_for(n),
        alpha=params.alpha,
        alpha_included=include_alpha,
        eta_hutchinson=mean / nd,
        eta_hutchinson_se=se / nd,
        probes=probes,
        method="hutchinson",
    )


def dense_jacobian(
    cfg: TokenConfig, params: AttentionParams, include_alpha: bool = True, max_nd: int = DEFAULT_DENSE_ND
) -> np.ndarray:
    """The nd x nd matrix with rows (j, v) and columns (i, u)."""
    n, d = cfg.n, cfg.d
    if n * d > max_nd:
        raise BudgetExceeded(f"nd = {n * d} exceeds dense cap {max_nd}")
    J = np.zeros((n, d, n, d))
    for j, rows, blocks in iter_blocks(cfg, params):
        J[j, :, rows, :] = np.swapaxes(blocks, 1, 2)
    J = J.reshape(n * d, n * d)
    if include_alpha and params.alpha:
        J[np.diag_indices(n * d)] += params.alpha
    return J


@dataclass(frozen=True)
class SpectrumSummary:
    layers: int
    top_singular_values: np.ndarray
    mean_square: float
    per_layer_mean_square: tuple[float, ...]


def end_to_end_jacobian(
    cfg: TokenConfig,
    params: AttentionParams,
    L: int,
    top_k: int = 5,
    max_nd: int = DEFAULT_DENSE_ND,
) -> SpectrumSummary:
    """Chain-rule product dX(L)/dX(0) of the full update (alpha I included)."""
    if L < 1:
        raise InvalidParam("L must be >= 1")
    nd = cfg.n * cfg.d
    total = np.eye(nd)
    per_layer = []
    current = cfg
    beta = params.beta_for(cfg.n)
    fixed = AttentionParams.from_beta(beta, params.alpha)
    for _ in range(L):
        J = dense_jacobian(current, fixed, include_alpha=True, max_nd=max_nd)
        per_layer.append(float(np.sum(J * J) / nd))
        total = J @ total
        current = TokenConfig(layer_map(np.array(current.x), beta, params.alpha))
    # the SVD dominates the cost; skip it when only the mean square is wanted
    sv = np.linalg.svd(total, compute_uv=False)[:top_k] if top_k > 0 else np.zeros(0)
    return SpectrumSummary(
        layers=L,
        top_singular_values=sv,
        mean_square=float(np.sum(total * total) / nd),
        per_layer_mean_square=tuple(per_layer),
    )
