"""Constrained Bayesian neural network training.

Variational inference for small regression networks with output
constraints enforced either softly (fixed-weight penalty) or hard
(augmented Lagrangian with automatic dual updates), plus Stein
variational and Monte Carlo dropout baselines.
"""

__version__ = "0.1.0"
