"""The Anderson-mixing update family.

A step combines a least-squares extrapolation over the difference history
with a damped mixing move:

    gamma_k = argmin ||r_k - R gamma||^2 + delta_k * pen(gamma)
    x_bar_k = x_k - alpha_k * X gamma_k          (projection)
    x_{k+1} = x_bar_k + beta_k * (r_k - alpha_k * R gamma_k)

pen is ||X gamma||^2 (adaptive mode) or ||gamma||^2 (Tikhonov mode).
Equivalently x_{k+1} = x_k + H_k r_k with
H_k = beta_k I - alpha_k (X + beta_k R) Z_k^+ R^T, which is what
assemble_dense_H materializes for the property suites.

Safeguards: the adaptive delta_k rule, a descent check with baseline
fallback, alternating iteration (mix every p-th step), and eigenvalue
damping of alpha_k that keeps the symmetrized H_k positive definite with
margin beta_k * mu. The preconditioned variant replaces the scalar mixing
move with a baseline optimizer applied to the extragradient at x_bar.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .history import HistoryBuffer
from .smallmat import RANK_RTOL, gram, lambda_max_product, pinv_matrix, pinv_solve

_REG_MODES = ("none", "tikhonov", "adaptive")
_PD_MODES = ("descent_check", "eigen_damp", "off")


class MixerError(RuntimeError):
    """Numerical failure inside a mixing step; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


@dataclass(frozen=True)
class ScheduleSpec:
    """Stepsize schedule for (alpha_k, beta_k).

    kinds: constant; step_decay (multiply both by factor at each
    milestone); polynomial (beta_k = scale * (k+1)^-r with r in (0.5, 1),
    alpha untouched, so the square sums converge while the sums diverge).
    """

    kind: str = "constant"
    milestones: tuple = ()
    factor: float = 1.0
    r: float = 0.75
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "step_decay", "polynomial"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "step_decay":
            if not 0.0 < self.factor <= 1.0:
                raise ValueError("step_decay factor must lie in (0, 1]")
            object.__setattr__(
                self, "milestones", tuple(sorted(int(m) for m in self.milestones))
            )
        if self.kind == "polynomial":
            if not 0.5 < self.r < 1.0:
                raise ValueError("polynomial exponent r must lie in (0.5, 1)")
            if self.scale <= 0.0:
                raise ValueError("polynomial scale must be positive")

    @classmethod
    def constant(cls):
        return cls(kind="constant")

    @classmethod
    def step_decay(cls, milestones, factor):
        return cls(kind="step_decay", milestones=tuple(milestones), factor=factor)

    @classmethod
    def polynomial(cls, r, scale=1.0):
        return cls(kind="polynomial", r=r, scale=scale)


def schedule_value(spec, k, alpha0, beta0):
    """(alpha_k, beta_k) at iteration k under the schedule."""
    if spec.kind == "constant":
        return alpha0, beta0
    if spec.kind == "step_decay":
        n = sum(1 for m in spec.milestones if m <= k)
        f = spec.factor**n
        return alpha0 * f, beta0 * f
    # polynomial decays the mixing parameter only
    return alpha0, spec.scale * float(k + 1) ** -spec.r


@dataclass(frozen=True)
class MixerConfig:
    """Hyperparameters for the mixing family.

    reg_mode selects the gamma regularizer: "none", "tikhonov" (weight
    `delta`), or "adaptive" (the c1/c2 rule evaluated per step). pd_mode
    selects the safeguard: "descent_check" (fall back to a baseline
    optimizer when dx'r <= 0), "eigen_damp" (shrink alpha to keep the
    symmetrized update operator positive definite), or "off".
    """

    m: int = 10
    alpha0: float = 1.0
    beta0: float = 1.0
    reg_mode: str = "adaptive"
    delta: float = 0.0
    c1: float = 1e-2
    c2: float = 0.0
    eps: float = 1e-8
    gamma: float = 0.9
    use_ma: bool = True
    period_p: int = 1
    mu: float = 1e-8
    pd_mode: str = "descent_check"
    rank_rtol: float = RANK_RTOL
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec.constant)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.alpha0 <= 0.0 or self.beta0 <= 0.0:
            raise ValueError("alpha0 and beta0 must be positive")
        if self.reg_mode not in _REG_MODES:
            raise ValueError(f"reg_mode must be one of {_REG_MODES}")
        if self.pd_mode not in _PD_MODES:
            raise ValueError(f"pd_mode must be one of {_PD_MODES}")
        if self.delta < 0.0 or self.c1 < 0.0 or self.c2 < 0.0:
            raise ValueError("delta, c1, c2 must be nonnegative")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.period_p < 1:
            raise ValueError("period_p must be >= 1")
        if not 0.0 <= self.mu < 1.0:
            raise ValueError("mu must lie in [0, 1)")
        if self.rank_rtol <= 0.0:
            raise ValueError("rank_rtol must be positive")


@dataclass(frozen=True)
class StepReport:
    """Per-step diagnostics.

    dx is the applied update x_{k+1} - x_k whatever branch produced it;
    x_bar is the projected iterate when the mixing path ran, else None.
    """

    dx: np.ndarray
    delta_k: float
    lambda_k: float | None
    alpha_used: float
    beta_used: float
    fell_back: bool
    gamma_norm: float
    x_bar: np.ndarray | None


@dataclass
class OptimizerState:
    """Value-typed state threaded through sam_step / psam_step."""

    x: np.ndarray
    k: int
    prev_x: np.ndarray | None
    prev_r: np.ndarray | None
    history: HistoryBuffer
    fallback_state: object = None
    precond_state: object = None

    def copy(self):
        return OptimizerState(
            x=self.x.copy(),
            k=self.k,
            prev_x=None if self.prev_x is None else self.prev_x.copy(),
            prev_r=None if self.prev_r is None else self.prev_r.copy(),
            history=self.history.copy(),
            fallback_state=self.fallback_state,
            precond_state=self.precond_state,
        )


def make_state(x0, cfg, fallback=None, precond=None):
    """Fresh optimizer state at x0 under cfg, with baseline states primed."""
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("non-finite initial point")
    d = x0.size
    return OptimizerState(
        x=x0.copy(),
        k=0,
        prev_x=None,
        prev_r=None,
        history=HistoryBuffer(d, cfg.m, ma_enabled=cfg.use_ma, gamma=cfg.gamma),
        fallback_state=None if fallback is None else fallback.init_state(d),
        precond_state=None if precond is None else precond.init_state(d),
    )


def solve_gamma(X, R, r, delta, rank_rtol=RANK_RTOL, reg="adaptive"):
    """Least-norm minimizer of ||r - R g||^2 + delta * pen(g).

    pen(g) = ||X g||^2 for reg="adaptive"/"none" (with delta 0 meaning no
    penalty) and ||g||^2 for reg="tikhonov". Empty history returns an
    empty gamma.
    """
    m = R.shape[1]
    if m == 0:
        return np.zeros(0)
    Z = gram(R, R)
    if delta != 0.0:
        if reg == "tikhonov":
            Z = Z + delta * np.eye(m)
        else:
            Z = Z + delta * gram(X, X)
    return pinv_solve(Z, R.T @ r, rank_rtol)


def adaptive_delta(r, dx_prev, c1, c2, beta, eps):
    """delta_k = max(c1 ||r||^2 / (||dx_prev||^2 + eps), c2 / beta^2).

    With c2 = 0 only the first term is active. eps keeps the ratio finite
    when the previous step collapsed to zero.
    """
    first = c1 * float(r @ r) / (float(dx_prev @ dx_prev) + eps)
    if c2 > 0.0:
        return max(first, c2 / beta**2)
    return first


def pd_lambda(X, R, beta, delta, rank_rtol=RANK_RTOL):
    """Largest eigenvalue of Y Z^+ R' + R Z^+ Y' with Y = X + beta R.

    Computed through the 2m x 2m similarity [Y R]'[Y R] times the
    off-diagonal block matrix of Z^+, never forming anything d x d.
    """
    m = X.shape[1]
    if m == 0:
        raise ValueError("pd_lambda needs at least one history column")
    Y = X + beta * R
    Z = gram(R, R)
    if delta != 0.0:
        Z = Z + delta * gram(X, X)
    Zp = pinv_matrix(Z, rank_rtol)
    C = np.hstack([Y, R])
    W = gram(C, C)
    S = np.zeros((2 * m, 2 * m))
    S[:m, m:] = Zp
    S[m:, :m] = Zp
    return lambda_max_product(W, S)


def damp_alpha(alpha, beta, mu, lambda_k):
    """Shrink alpha so that alpha * lambda_k <= 2 beta (1 - mu)."""
    if lambda_k <= 0.0:
        return alpha
    return min(alpha, 2.0 * beta * (1.0 - mu) / lambda_k)


def assemble_dense_H(X, R, alpha, beta, delta, rank_rtol=RANK_RTOL):
    """Dense update operator beta I - alpha (X + beta R) Z^+ R' (test scale)."""
    d = X.shape[0]
    if X.shape[1] == 0:
        return beta * np.eye(d)
    Y = X + beta * R
    Z = gram(R, R)
    if delta != 0.0:
        Z = Z + delta * gram(X, X)
    return beta * np.eye(d) - alpha * Y @ pinv_matrix(Z, rank_rtol) @ R.T


def _delta_for_step(cfg, r, history, beta_k):
    if cfg.reg_mode == "none":
        return 0.0
    if cfg.reg_mode == "tikhonov":
        return cfg.delta
    dx_prev = history.last_dx()
    return adaptive_delta(r, dx_prev, cfg.c1, cfg.c2, beta_k, cfg.eps)


def _begin_step(state, r, cfg):
    # shared prologue: copy the state, validate r, fold the previous
    # differences into the history, read the schedule
    r = np.asarray(r, dtype=float)
    if r.shape != state.x.shape:
        raise ValueError(f"residual has shape {r.shape}, expected {state.x.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite residual passed to step")
    st = state.copy()
    if st.k > 0:
        st.history.push(st.x - st.prev_x, r - st.prev_r)
    alpha_k, beta_k = schedule_value(cfg.schedule, st.k, cfg.alpha0, cfg.beta0)
    return st, r, alpha_k, beta_k


def _commit(st, r, dx, cfg):
    if not np.all(np.isfinite(dx)):
        raise MixerError(
            "non-finite update produced by mixing step",
            {"k": st.k, "dx_max": float(np.max(np.abs(dx)))} ,
        )
    st.prev_x = st.x.copy()
    st.prev_r = r.copy()
    st.x = st.x + dx
    st.k += 1
    return st


def sam_step(state, r, cfg, fallback=None):
    """One mixing step given the residual r = -grad at the current point.

    Returns (new_state, StepReport). The first step and any step with an
    empty history is pure mixing x + beta r. Off-period steps (k mod p != 0)
    delegate to the fallback optimizer, as does a failed descent check
    under pd_mode="descent_check".
    """
    st, r, alpha_k, beta_k = _begin_step(state, r, cfg)
    X, R = st.history.matrices()
    m_k = X.shape[1]

    def fall_back():
        if fallback is None:
            raise ValueError("this step requires a fallback optimizer")
        x_new, st.fallback_state = fallback.step(st.x, -r, st.fallback_state)
        return x_new - st.x

    if st.k == 0 or m_k == 0:
        dx = beta_k * r
        report = StepReport(dx, 0.0, None, alpha_k, beta_k, False, 0.0, st.x.copy())
    elif st.k % cfg.period_p != 0:
        dx = fall_back()
        report = StepReport(dx, 0.0, None, alpha_k, beta_k, True, 0.0, None)
    else:
        delta_k = _delta_for_step(cfg, r, st.history, beta_k)
        reg = "tikhonov" if cfg.reg_mode == "tikhonov" else "adaptive"
        gamma = solve_gamma(X, R, r, delta_k, cfg.rank_rtol, reg)
        gamma_norm = float(np.linalg.norm(gamma))
        alpha_used = alpha_k
        lambda_k = None
        if cfg.pd_mode == "eigen_damp":
            lambda_k = pd_lambda(X, R, beta_k, delta_k, cfg.rank_rtol)
            alpha_used = damp_alpha(alpha_k, beta_k, cfg.mu, lambda_k)
        Xg = X @ gamma
        Rg = R @ gamma
        x_bar = st.x - alpha_used * Xg
        dx = beta_k * r - alpha_used * (Xg + beta_k * Rg)
        if cfg.pd_mode == "descent_check" and float(dx @ r) <= 0.0:
            dx = fall_back()
            report = StepReport(
                dx, delta_k, lambda_k, alpha_used, beta_k, True, gamma_norm, None
            )
        else:
            report = StepReport(
                dx, delta_k, lambda_k, alpha_used, beta_k, False, gamma_norm, x_bar
            )
    st = _commit(st, r, report.dx, cfg)
    return st, report


def psam_step(state, r, cfg, precond):
    """Preconditioned mixing step: the scalar mixing move is replaced by
    the preconditioner applied to the extragradient at the projected point.

    The first step and off-period steps delegate wholly to the
    preconditioner; a failed descent check discards the trial and applies
    the preconditioner at the original point with the original state, so
    exactly one preconditioner transition is committed per step.
    """
    if precond is None:
        raise ValueError("psam_step requires a preconditioner")
    st, r, alpha_k, beta_k = _begin_step(state, r, cfg)
    X, R = st.history.matrices()
    m_k = X.shape[1]

    def precond_at_x():
        x_new, new_state = precond.step(st.x, -r, st.precond_state)
        return x_new - st.x, new_state

    if st.k == 0 or m_k == 0:
        dx, st.precond_state = precond_at_x()
        report = StepReport(dx, 0.0, None, alpha_k, beta_k, False, 0.0, None)
    elif st.k % cfg.period_p != 0:
        dx, st.precond_state = precond_at_x()
        report = StepReport(dx, 0.0, None, alpha_k, beta_k, True, 0.0, None)
    else:
        delta_k = _delta_for_step(cfg, r, st.history, beta_k)
        reg = "tikhonov" if cfg.reg_mode == "tikhonov" else "adaptive"
        gamma = solve_gamma(X, R, r, delta_k, cfg.rank_rtol, reg)
        gamma_norm = float(np.linalg.norm(gamma))
        alpha_used = alpha_k
        lambda_k = None
        if cfg.pd_mode == "eigen_damp":
            lambda_k = pd_lambda(X, R, beta_k, delta_k, cfg.rank_rtol)
            alpha_used = damp_alpha(alpha_k, beta_k, cfg.mu, lambda_k)
        x_bar = st.x - alpha_used * (X @ gamma)
        r_bar = r - alpha_used * (R @ gamma)
        trial_x, trial_state = precond.step(x_bar, -r_bar, st.precond_state)
        dx = trial_x - st.x
        if cfg.pd_mode == "descent_check" and float(dx @ r) <= 0.0:
            dx, st.precond_state = precond_at_x()
            report = StepReport(
                dx, delta_k, lambda_k, alpha_used, beta_k, True, gamma_norm, None
            )
        else:
            st.precond_state = trial_state
            report = StepReport(
                dx, delta_k, lambda_k, alpha_used, beta_k, False, gamma_norm, x_bar
            )
    st = _commit(st, r, report.dx, cfg)
    return st, report
