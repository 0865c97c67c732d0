"""SVRG-style variance reduction wrapped around the mixer.

Each outer epoch takes a full-gradient snapshot and runs q inner mixing
steps on corrected mini-batch gradients

    g = g_B(x) - g_B(x_snap) + grad_f(x_snap),

which are unbiased for the full gradient and exactly equal to it at the
snapshot point. The returned sample iterate is drawn uniformly from all
q*N inner iterates via reservoir sampling, so nothing but one candidate
is ever stored.
"""

from dataclasses import dataclass

import numpy as np

from .mixer import make_state, sam_step


@dataclass(frozen=True)
class VrConfig:
    """Outer epochs, inner steps per snapshot, and mini-batch size."""

    epochs_N: int
    inner_q: int
    batch_n: int
    reset_history: bool = False

    def __post_init__(self):
        if self.epochs_N < 1 or self.inner_q < 1 or self.batch_n < 1:
            raise ValueError("epochs_N, inner_q, batch_n must all be >= 1")


@dataclass
class VrState:
    """Snapshot bundle: the anchor point, its exact full gradient, the
    optimizer state at snapshot time, and the reservoir candidate."""

    snapshot_x: np.ndarray
    snapshot_grad: np.ndarray
    inner_state: object = None
    visited: np.ndarray | None = None


@dataclass
class VrResult:
    final_x: np.ndarray
    output_x: np.ndarray
    output_iter: int
    sfo_calls: int
    trace: list
    state: object


def snapshot_at(oracle, x):
    """VrState anchored at x with the exact full gradient."""
    x = np.asarray(x, dtype=float)
    return VrState(snapshot_x=x.copy(), snapshot_grad=oracle.full_gradient(x))


def vr_gradient(oracle, x, snapshot, batch):
    """Corrected mini-batch gradient g_B(x) - g_B(x_snap) + grad_f(x_snap)."""
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("empty mini-batch")
    g_here = oracle.minibatch_gradient(x, batch)
    g_snap = oracle.minibatch_gradient(snapshot.snapshot_x, batch)
    return g_here - g_snap + snapshot.snapshot_grad


def run_sam_vr(oracle, mixer_cfg, vr_cfg, seed, x0=None, fallback=None):
    """Run N epochs of q variance-reduced mixing steps each.

    The root seed splits into independent streams for batch sampling and
    for the uniform output draw, so the two never interact. SFO cost is
    T per snapshot plus 2n per inner step, (T + 2qn) per epoch.
    """
    T = oracle.num_samples
    if vr_cfg.batch_n > T:
        raise ValueError(f"batch_n {vr_cfg.batch_n} exceeds sample count {T}")
    batch_rng, out_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)
    )
    if x0 is None:
        x0 = np.zeros(oracle.dim)
    state = make_state(x0, mixer_cfg, fallback=fallback)
    sfo = 0
    seen = 0
    output_x = state.x.copy()
    output_iter = -1
    trace = []
    for epoch in range(vr_cfg.epochs_N):
        if vr_cfg.reset_history and epoch > 0:
            state.history.clear()
        snap = snapshot_at(oracle, state.x)
        snap.inner_state = state
        sfo += T
        for _ in range(vr_cfg.inner_q):
            batch = batch_rng.choice(T, size=vr_cfg.batch_n, replace=False)
            g = vr_gradient(oracle, state.x, snap, batch)
            sfo += 2 * vr_cfg.batch_n
            state, rep = sam_step(state, -g, mixer_cfg, fallback)
            # reservoir: keep the i-th iterate with probability 1/i
            seen += 1
            if out_rng.random() < 1.0 / seen:
                output_x = state.x.copy()
                output_iter = seen - 1
            trace.append(
                {
                    "iter": seen,
                    "epoch": epoch,
                    "sfo_calls": sfo,
                    "residual_norm_sq": float(g @ g),
                    "fell_back": rep.fell_back,
                }
            )
    snap.visited = output_x
    return VrResult(
        final_x=state.x.copy(),
        output_x=output_x,
        output_iter=output_iter,
        sfo_calls=sfo,
        trace=trace,
        state=state,
    )
