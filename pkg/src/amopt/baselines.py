"""Reference first-order optimizers.

These serve three roles: comparison baselines in the harness, fallback
optimizers for the descent check, and preconditioners for the
preconditioned mixer. Steps are pure: (x, g, state) -> (x', state'), so
callers can replay or discard trial steps freely.

Weight decay is the classic additive form (g + weight_decay * x);
decoupled variants are out of scope.
"""

from dataclasses import dataclass

import numpy as np


def _checked(x, g):
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(g))):
        raise ValueError("non-finite input to baseline step")
    return x, g


@dataclass(frozen=True)
class SgdmState:
    velocity: np.ndarray


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int


class Sgd:
    """Plain stochastic gradient descent, x' = x - lr * (g + wd x)."""

    def __init__(self, lr, weight_decay=0.0):
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)

    def init_state(self, dim):
        return None

    def step(self, x, g, state):
        x, g = _checked(x, g)
        if self.weight_decay:
            g = g + self.weight_decay * x
        return x - self.lr * g, None


class Sgdm:
    """Heavy-ball momentum: v' = momentum v + g, x' = x - lr v'."""

    def __init__(self, lr, momentum=0.9, weight_decay=0.0):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)

    def init_state(self, dim):
        return SgdmState(velocity=np.zeros(dim))

    def step(self, x, g, state):
        x, g = _checked(x, g)
        if self.weight_decay:
            g = g + self.weight_decay * x
        v = self.momentum * state.velocity + g
        return x - self.lr * v, SgdmState(velocity=v)


class Adam:
    """Adam with the standard bias-corrected moment estimates."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps_adam=1e-8, weight_decay=0.0):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps_adam = float(eps_adam)
        self.weight_decay = float(weight_decay)

    def init_state(self, dim):
        return AdamState(m=np.zeros(dim), v=np.zeros(dim), t=0)

    def step(self, x, g, state):
        x, g = _checked(x, g)
        if self.weight_decay:
            g = g + self.weight_decay * x
        t = state.t + 1
        m = self.beta1 * state.m + (1.0 - self.beta1) * g
        v = self.beta2 * state.v + (1.0 - self.beta2) * g * g
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        x_new = x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps_adam)
        return x_new, AdamState(m=m, v=v, t=t)


class DiagPrecond:
    """Fixed diagonal preconditioner, x' = x - g / diag.

    An optimizer in interface only; used to drive the preconditioned
    mixer with an explicit M = diag(...) for the GMRES cross-checks.
    """

    def __init__(self, diag):
        diag = np.asarray(diag, dtype=float)
        if np.any(diag == 0.0) or not np.all(np.isfinite(diag)):
            raise ValueError("diag entries must be finite and nonzero")
        self.diag = diag

    def init_state(self, dim):
        if self.diag.shape != (dim,):
            raise ValueError(f"diag has length {self.diag.size}, expected {dim}")
        return None

    def step(self, x, g, state):
        x, g = _checked(x, g)
        return x - g / self.diag, None


_KINDS = {"sgd": Sgd, "sgdm": Sgdm, "adam": Adam, "diag": DiagPrecond}


def make_baseline(kind, **kwargs):
    """Construct a baseline optimizer by kind name."""
    try:
        cls = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown baseline kind {kind!r}; have {sorted(_KINDS)}")
    return cls(**kwargs)
