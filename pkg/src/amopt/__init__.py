"""Anderson-mixing optimizers with a small benchmark harness.

The package implements the stochastic Anderson mixing family (plain,
Tikhonov-regularized, adaptively regularized, moving-average, and
preconditioned variants plus an SVRG wrapper) together with reference
problems, baseline optimizers, a GMRES oracle, and a CLI for running
seeded, traced experiments.
"""

__version__ = "0.1.0"
