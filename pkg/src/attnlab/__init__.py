"""Numerical toolkit for scaled softmax self-attention on normalized tokens:
token generators, forward dynamics, exact and stochastic Jacobian norms,
closed-form phase predictions and parameter sweeps."""

__version__ = "0.1.0"
