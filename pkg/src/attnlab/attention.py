"""Scaled softmax self-attention with K = Q = V = I on normalized tokens,
the residual update x' = ATT(y) + alpha x, and its iteration over layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidParam, NormCollapse
from .tokens import GeometrySummary, TokenConfig, summarize_geometry


@dataclass(frozen=True)
class AttentionParams:
    """Inverse temperature given either directly (``beta``) or as
    ``gamma`` with beta = gamma * ln(n). Exactly one must be set."""

    beta: float | None = None
    gamma: float | None = None
    alpha: float = 0.0

    def __post_init__(self):
        if (self.beta is None) == (self.gamma is None):
            raise InvalidParam("give exactly one of beta or gamma")
        value = self.beta if self.beta is not None else self.gamma
        if not np.isfinite(value) or value < 0:
            raise InvalidParam(f"scale must be finite and >= 0, got {value}")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise InvalidParam(f"alpha must be >= 0, got {self.alpha}")

    @classmethod
    def from_gamma(cls, gamma: float, alpha: float = 0.0) -> "AttentionParams":
        return cls(gamma=float(gamma), alpha=float(alpha))

    @classmethod
    def from_beta(cls, beta: float, alpha: float = 0.0) -> "AttentionParams":
        return cls(beta=float(beta), alpha=float(alpha))

    @property
    def source(self) -> str:
        return "beta" if self.beta is not None else "gamma"

    def beta_for(self, n: int) -> float:
        if self.beta is not None:
            return self.beta
        return self.gamma * float(np.log(n))

    def gamma_for(self, n: int) -> float:
        if self.gamma is not None:
            return self.gamma
        return self.beta / float(np.log(n)) if n > 1 else float("inf")

    def with_alpha(self, alpha: float) -> "AttentionParams":
        return AttentionParams(beta=self.beta, gamma=self.gamma, alpha=alpha)


@dataclass(frozen=True)
class AttentionOutput:
    A: np.ndarray
    logz_shift: np.ndarray
    z_mantissa: np.ndarray
    att: np.ndarray
    x_next: np.ndarray
    beta: float

    @property
    def log_z(self) -> np.ndarray:
        return self.logz_shift + np.log(self.z_mantissa)

    @property
    def Z(self) -> np.ndarray:
        """Partition values exp(log_z); overflows to inf for huge beta."""
        with np.errstate(over="ignore"):
            return np.exp(self.log_z)

    def next_config(self) -> TokenConfig:
        return TokenConfig(self.x_next)


def softmax_rows(scores: np.ndarray):
    shift = scores.max(axis=1)
    e = np.exp(scores - shift[:, None])
    mant = e.sum(axis=1)
    return e / mant[:, None], shift, mant


def attention_weights(cfg: TokenConfig, params: AttentionParams):
    """Row-stochastic weights A_ij = exp(beta <y_i, y_j>) / Z_i.

    Returns ``(A, logz_shift, z_mantissa)`` with Z_i = exp(shift_i) * mantissa_i.
    """
    beta = params.beta_for(cfg.n)
    return softmax_rows(beta * cfg.gram())


def att_forward(cfg: TokenConfig, params: AttentionParams) -> AttentionOutput:
    beta = params.beta_for(cfg.n)
    A, shift, mant = softmax_rows(beta * cfg.gram())
    att = A @ cfg.y
    x_next = att + params.alpha * cfg.x if params.alpha else att
    return AttentionOutput(A=A, logz_shift=shift, z_mantissa=mant, att=att, x_next=x_next, beta=beta)


def layer_map(x: np.ndarray, beta: float, alpha: float = 0.0) -> np.ndarray:
    """X -> ATT(N(X)) + alpha X on a raw array; used by finite differences."""
    y = x / np.linalg.norm(x, axis=1, keepdims=True)
    A, _, _ = softmax_rows(beta * (y @ y.T))
    out = A @ y
    return out + alpha * x if alpha else out


@dataclass(frozen=True)
class LayerSummary:
    layer: int
    geometry: GeometrySummary | None
    lam: float | None
    min_norm: float
    max_norm: float


def iterate_layers(
    cfg: TokenConfig,
    params: AttentionParams,
    L: int,
    observer: Callable[[LayerSummary], None] | None = None,
    norm_floor: float = 1e-300,
) -> list[LayerSummary]:
    """Apply the update L times. Each layer re-normalizes its input rows
    (attention reads y = N(x)) and the residual adds alpha * x.

    beta stays fixed at its value for the input size n across layers.
    ``lam`` in each summary is the angle ratio against layer 0.
    """
    from .experiments import compute_lambda

    if L < 1:
        raise InvalidParam("L must be >= 1")
    summaries = []
    current = cfg
    for layer in range(1, L + 1):
        out = att_forward(current, params)
        norms = np.linalg.norm(out.x_next, axis=1)
        if norms.min() < norm_floor:
            raise NormCollapse(f"token {int(np.argmin(norms))} collapsed at layer {layer}")
        current = out.next_config()
        geom = summarize_geometry(current) if current.n >= 2 else None
        try:
            lam = compute_lambda(cfg, current) if cfg.n >= 2 else None
        except ValueError:
            lam = None
        s = LayerSummary(layer, geom, lam, float(norms.min()), float(norms.max()))
        summaries.append(s)
        if observer is not None:
            observer(s)
    return summaries


def final_config(cfg: TokenConfig, params: AttentionParams, L: int) -> TokenConfig:
    current = cfg
    for _ in range(L):
        current = att_forward(current, params).next_config()
    return current
