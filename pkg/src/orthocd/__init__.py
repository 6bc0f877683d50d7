"""Stochastic Riemannian coordinate descent on the orthogonal group.

Coordinate moves are Givens rotations of column pairs (O(d) per step,
versus the O(d^3) matrix exponential of a full Riemannian gradient
step).  The package bundles the geometry kernels, a small orthogonal
RNN with exact BPTT, the copying-memory task, the optimizers with
uniform and Gauss-Southwell coordinate selection, gradient-sparsity
and convergence diagnostics, and a CLI that drives the experiments.
"""

__version__ = "0.1.0"

from . import analysis, cli, copytask, manifold, optim, rnn  # noqa: F401

__all__ = ["analysis", "cli", "copytask", "manifold", "optim", "rnn", "__version__"]
