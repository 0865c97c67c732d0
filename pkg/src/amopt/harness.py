"""Experiment harness: declarative TOML configs, seeded training loops with
SFO accounting, and line-delimited JSON traces.

A config file has four sections plus a top-level seed:

    seed = 0
    [problem]    kind = "quadratic" | "logistic" | "rosenbrock" | "mlp" | "csv"
    [optimizer]  kind = "sgd" | "sgdm" | "adam" | "am" | "ram" | "sam"
                        | "adasam" | "padasam" | "samvr"
    [budget]     max_iters = K   (or: epochs = E, batch_size = B)
    [trace]      every_n = N, out = "path"

`--set a.b=value` overrides are applied before validation, so a committed
config plus the command line fully determines a run. The root seed expands
through numpy's SeedSequence into three fixed-order child streams (data
generation, batch sampling, variance-reduction output sampling); everything
downstream is a deterministic function of the config and seed.

SFO accounting counts one call per per-sample gradient: batch_size per step
for plain mini-batch runs, T + 2*batch_size*q per epoch for samvr. The full
loss/gradient evaluations behind each trace row are metered separately as
eval_calls and never touch sfo_calls.
"""

import dataclasses
import json
import math
import os
import statistics
import time

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import make_baseline
from .mixer import (
    MixerConfig,
    MixerError,
    ScheduleSpec,
    make_state,
    psam_step,
    sam_step,
)
from .problems import (
    load_csv,
    make_logistic,
    make_mlp,
    make_quadratic,
    make_rosenbrock,
)
from .vr import snapshot_at, vr_gradient


class ConfigError(ValueError):
    """Config validation failure; the message names the offending field."""


TRACE_FIELDS = (
    "iter",
    "epoch",
    "sfo_calls",
    "loss",
    "grad_norm_sq",
    "alpha",
    "beta",
    "delta_k",
    "lambda_k",
    "fell_back",
    "wall_ms",
)

_BASELINE_KINDS = ("sgd", "sgdm", "adam")
_MIXER_KINDS = ("am", "ram", "sam", "adasam", "padasam", "samvr")

_PROBLEM_KEYS = {
    "quadratic": {"kind", "dim", "cond", "num_samples", "noise_sigma"},
    "logistic": {"kind", "num_samples", "dim", "separation", "l2"},
    "rosenbrock": {"kind", "dim"},
    "mlp": {"kind", "hidden", "num_samples", "dim"},
    "csv": {"kind", "path", "label_col", "header", "l2"},
}

_BASELINE_KEYS = {
    "sgd": {"kind", "lr", "weight_decay"},
    "sgdm": {"kind", "lr", "momentum", "weight_decay"},
    "adam": {"kind", "lr", "beta1", "beta2", "eps", "weight_decay"},
    "diag": {"kind"},
}

_COMMON_MIXER = {"kind", "m", "alpha0", "beta0", "period_p", "schedule", "fallback"}
_ADAPTIVE = {"c1", "c2", "eps", "mu"}
_OPTIMIZER_KEYS = {
    "sgd": _BASELINE_KEYS["sgd"],
    "sgdm": _BASELINE_KEYS["sgdm"],
    "adam": _BASELINE_KEYS["adam"],
    "am": _COMMON_MIXER,
    "ram": _COMMON_MIXER | {"delta"},
    "sam": _COMMON_MIXER | _ADAPTIVE,
    "adasam": _COMMON_MIXER | _ADAPTIVE | {"gamma"},
    "padasam": _COMMON_MIXER | _ADAPTIVE | {"gamma", "precond"},
    "samvr": _COMMON_MIXER | _ADAPTIVE | {"gamma", "q"},
}

# fixed per-kind behavior; everything else is a tunable knob
_MIXER_PRESETS = {
    "am": dict(reg_mode="none", use_ma=False, pd_mode="off"),
    "ram": dict(reg_mode="tikhonov", use_ma=False, pd_mode="off"),
    "sam": dict(reg_mode="adaptive", use_ma=False, pd_mode="eigen_damp"),
    "adasam": dict(reg_mode="adaptive", use_ma=True, pd_mode="descent_check"),
    "padasam": dict(reg_mode="adaptive", use_ma=True, pd_mode="descent_check"),
    "samvr": dict(reg_mode="adaptive", use_ma=True, pd_mode="descent_check"),
}

_SCHEDULE_KEYS = {
    "constant": {"kind"},
    "step_decay": {"kind", "milestones", "factor"},
    "polynomial": {"kind", "r", "scale"},
}


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    epoch: int
    sfo_calls: int
    loss: float
    grad_norm_sq: float
    alpha: float | None
    beta: float | None
    delta_k: float | None
    lambda_k: float | None
    fell_back: bool
    wall_ms: float | None

    def as_dict(self):
        return {name: getattr(self, name) for name in TRACE_FIELDS}


@dataclass
class ExperimentConfig:
    problem: dict
    optimizer: dict
    budget: dict
    trace: dict
    seed: int = 0


@dataclass
class RunResult:
    records: list
    final_x: np.ndarray
    summary: dict
    status: str
    error: str | None


class _NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- config


def _check_keys(section, allowed, path):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")


def _require(section, key, path):
    if key not in section:
        raise ConfigError(f"{path}.{key}: required")
    return section[key]


def _pos_int(value, path):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{path}: expected a positive integer, got {value!r}")
    return value


def _validate_schedule(sec):
    kind = sec.get("kind", "constant")
    if kind not in _SCHEDULE_KEYS:
        raise ConfigError(
            f"optimizer.schedule.kind: unknown kind {kind!r}; "
            f"have {sorted(_SCHEDULE_KEYS)}"
        )
    _check_keys(sec, _SCHEDULE_KEYS[kind], "optimizer.schedule")
    if kind == "step_decay":
        _require(sec, "milestones", "optimizer.schedule")
        _require(sec, "factor", "optimizer.schedule")


def _validate_baseline_section(sec, path):
    kind = sec.get("kind", "sgd")
    if kind not in _BASELINE_KEYS:
        raise ConfigError(
            f"{path}.kind: unknown kind {kind!r}; have {sorted(_BASELINE_KEYS)}"
        )
    _check_keys(sec, _BASELINE_KEYS[kind], path)


def _validate_optimizer(opt):
    kind = _require(opt, "kind", "optimizer")
    if kind not in _OPTIMIZER_KEYS:
        raise ConfigError(
            f"optimizer.kind: unknown kind {kind!r}; have {sorted(_OPTIMIZER_KEYS)}"
        )
    _check_keys(opt, _OPTIMIZER_KEYS[kind], "optimizer")
    if "schedule" in opt:
        _validate_schedule(opt["schedule"])
    if "fallback" in opt:
        _validate_baseline_section(opt["fallback"], "optimizer.fallback")
    if "precond" in opt:
        _validate_baseline_section(opt["precond"], "optimizer.precond")


def _validate_problem(prob):
    kind = _require(prob, "kind", "problem")
    if kind not in _PROBLEM_KEYS:
        raise ConfigError(
            f"problem.kind: unknown kind {kind!r}; have {sorted(_PROBLEM_KEYS)}"
        )
    _check_keys(prob, _PROBLEM_KEYS[kind], "problem")
    required = {
        "quadratic": ("dim",),
        "logistic": ("num_samples", "dim"),
        "rosenbrock": ("dim",),
        "mlp": (),
        "csv": ("path",),
    }[kind]
    for key in required:
        _require(prob, key, "problem")


def _validate_budget(budget, optimizer_kind):
    _check_keys(budget, {"max_iters", "epochs", "batch_size"}, "budget")
    has_iters = "max_iters" in budget
    has_epochs = "epochs" in budget
    if has_iters == has_epochs:
        raise ConfigError("budget: set exactly one of max_iters or epochs")
    if has_iters:
        _pos_int(budget["max_iters"], "budget.max_iters")
    else:
        _pos_int(budget["epochs"], "budget.epochs")
        if "batch_size" not in budget:
            raise ConfigError("budget.batch_size: required with an epoch budget")
    if "batch_size" in budget:
        _pos_int(budget["batch_size"], "budget.batch_size")
    if optimizer_kind == "samvr" and not has_epochs:
        raise ConfigError("budget: samvr needs an epochs budget")


def config_from_dict(raw):
    """Validate a parsed config dict and fill defaults."""
    _check_keys(raw, {"seed", "problem", "optimizer", "budget", "trace"}, "config")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"seed: expected an integer, got {seed!r}")
    problem = dict(raw.get("problem", {}))
    optimizer = dict(raw.get("optimizer", {}))
    budget = dict(raw.get("budget", {}))
    trace = dict(raw.get("trace", {}))
    _validate_problem(problem)
    _validate_optimizer(optimizer)
    _validate_budget(budget, optimizer["kind"])
    _check_keys(trace, {"every_n", "out"}, "trace")
    trace.setdefault("every_n", 1)
    trace.setdefault("out", None)
    _pos_int(trace["every_n"], "trace.every_n")
    return ExperimentConfig(
        problem=problem, optimizer=optimizer, budget=budget, trace=trace, seed=seed
    )


def _apply_override(raw, item):
    key, sep, text = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    try:
        value = tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        value = text
    parts = key.split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {part} is not a section")
    node[parts[-1]] = value


def load_config(path, overrides=()):
    """Parse a TOML experiment config, apply overrides, validate."""
    try:
        raw = tomllib.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}")
    for item in overrides:
        _apply_override(raw, item)
    return config_from_dict(raw)


# ---------------------------------------------------------------- builders


def _build_problem(prob, data_seed):
    """Oracle plus the underlying SPD system when one exists."""
    kind = prob["kind"]
    if kind == "quadratic":
        oracle, system = make_quadratic(
            dim=prob["dim"],
            cond=prob.get("cond", 1.0),
            num_samples=prob.get("num_samples", 1),
            noise_sigma=prob.get("noise_sigma", 0.0),
            seed=data_seed,
        )
        return oracle, system
    if kind == "logistic":
        oracle = make_logistic(
            num_samples=prob["num_samples"],
            dim=prob["dim"],
            separation=prob.get("separation", 2.0),
            l2=prob.get("l2", 0.0),
            seed=data_seed,
        )
        return oracle, None
    if kind == "rosenbrock":
        return make_rosenbrock(prob["dim"]), None
    if kind == "mlp":
        oracle = make_mlp(
            hidden=prob.get("hidden", 8),
            num_samples=prob.get("num_samples", 100),
            dim=prob.get("dim", 2),
            seed=data_seed,
        )
        return oracle, None
    try:
        data = load_csv(
            prob["path"],
            label_col=prob.get("label_col", 0),
            header=prob.get("header", False),
        )
    except (OSError, ValueError) as exc:
        raise ConfigError(f"problem.path: {exc}")
    return make_logistic(l2=prob.get("l2", 0.0), data=data), None


def _build_schedule(sec):
    if sec is None:
        return ScheduleSpec.constant()
    kind = sec.get("kind", "constant")
    try:
        if kind == "constant":
            return ScheduleSpec.constant()
        if kind == "step_decay":
            return ScheduleSpec.step_decay(tuple(sec["milestones"]), sec["factor"])
        return ScheduleSpec.polynomial(sec.get("r", 0.75), sec.get("scale", 1.0))
    except ValueError as exc:
        raise ConfigError(f"optimizer.schedule: {exc}")


def _build_baseline(sec, path, default_kind, default_lr):
    sec = dict(sec or {})
    kind = sec.pop("kind", default_kind)
    sec.setdefault("lr", default_lr)
    if kind == "adam" and "eps" in sec:
        sec["eps_adam"] = sec.pop("eps")
    try:
        return make_baseline(kind, **sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}")


def _build_mixer_cfg(opt):
    kind = opt["kind"]
    kwargs = dict(_MIXER_PRESETS[kind])
    for key in ("m", "alpha0", "beta0", "c1", "c2", "eps", "gamma", "period_p", "mu"):
        if key in opt:
            kwargs[key] = opt[key]
    if kind == "ram":
        kwargs["delta"] = opt.get("delta", 1e-8)
    kwargs["schedule"] = _build_schedule(opt.get("schedule"))
    try:
        return MixerConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"optimizer: {exc}")


def _build_precond(opt, system):
    sec = opt.get("precond") or {"kind": "adam"}
    if sec.get("kind") == "diag":
        if system is None:
            raise ConfigError(
                "optimizer.precond.kind: 'diag' needs a quadratic problem"
            )
        return make_baseline("diag", diag=np.diag(system.A))
    return _build_baseline(sec, "optimizer.precond", "adam", 1e-3)


# ---------------------------------------------------------------- running


class _Tracer:
    """Collects trace rows; every row evaluates the full loss and gradient
    (metered as eval_calls, never as sfo_calls) and rejects non-finite
    values so a written trace always parses clean."""

    def __init__(self, oracle, timings):
        self.oracle = oracle
        self.timings = timings
        self.rows = []
        self.eval_calls = 0
        self._t0 = time.perf_counter()

    def record(self, it, epoch, sfo, x, fields):
        loss = float(self.oracle.loss(x))
        full_g = self.oracle.full_gradient(x)
        self.eval_calls += 2 * self.oracle.num_samples
        if not math.isfinite(loss) or not np.all(np.isfinite(full_g)):
            raise _NumericalFailure(f"non-finite loss or gradient at iter {it}")
        wall = (time.perf_counter() - self._t0) * 1e3 if self.timings else None
        self.rows.append(
            TraceRecord(
                iter=int(it),
                epoch=int(epoch),
                sfo_calls=int(sfo),
                loss=loss,
                grad_norm_sq=float(full_g @ full_g),
                alpha=None if fields["alpha"] is None else float(fields["alpha"]),
                beta=None if fields["beta"] is None else float(fields["beta"]),
                delta_k=None if fields["delta_k"] is None else float(fields["delta_k"]),
                lambda_k=None
                if fields["lambda_k"] is None
                else float(fields["lambda_k"]),
                fell_back=bool(fields["fell_back"]),
                wall_ms=wall,
            )
        )


_NO_STEP = dict(alpha=None, beta=None, delta_k=None, lambda_k=None, fell_back=False)


def _report_fields(rep):
    return dict(
        alpha=rep.alpha_used,
        beta=rep.beta_used,
        delta_k=rep.delta_k,
        lambda_k=rep.lambda_k,
        fell_back=rep.fell_back,
    )


def _baseline_fields(opt):
    return dict(
        alpha=getattr(opt, "lr", None),
        beta=None,
        delta_k=None,
        lambda_k=None,
        fell_back=False,
    )


def _draw_batch(rng, T, size):
    # full-batch runs skip the stream so noiseless results do not depend
    # on the batch sampler at all
    if size == T:
        return np.arange(T)
    return rng.choice(T, size=size, replace=False)


def run_experiment(cfg, timings=False):
    """Execute one configured run and return records plus a summary.

    A mid-run numerical failure aborts the loop but keeps every record
    written so far; status is "numerical_error" and the summary carries
    the message.
    """
    data_seed, batch_seed, _vr_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    oracle, system = _build_problem(cfg.problem, data_seed)
    batch_rng = np.random.default_rng(batch_seed)
    T = oracle.num_samples
    batch_size = cfg.budget.get("batch_size", T)
    if batch_size > T:
        raise ConfigError(
            f"budget.batch_size: {batch_size} exceeds sample count {T}"
        )
    kind = cfg.optimizer["kind"]
    every_n = cfg.trace["every_n"]
    x0 = np.zeros(oracle.dim)
    tracer = _Tracer(oracle, timings)

    status, error = "ok", None
    final_x = x0
    sfo = 0
    # divergence is detected by the finiteness checks, so numpy's overflow
    # warnings on the way down are just noise
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            tracer.record(0, 0, 0, x0, _NO_STEP)
            if kind == "samvr":
                final_x, sfo = _run_vr(cfg, oracle, batch_rng, x0, tracer, every_n)
            else:
                final_x, sfo = _run_plain(
                    cfg, oracle, system, batch_rng, x0, tracer, every_n, batch_size
                )
    except (MixerError, ValueError, FloatingPointError,
            OverflowError, _NumericalFailure) as exc:
        if isinstance(exc, ConfigError):
            raise
        status, error = "numerical_error", str(exc)

    rows = tracer.rows
    summary = {
        "final_loss": rows[-1].loss if rows else float("nan"),
        "min_grad_norm_sq": min((r.grad_norm_sq for r in rows), default=float("nan")),
        "sfo_calls": rows[-1].sfo_calls if rows else sfo,
        "eval_calls": tracer.eval_calls,
        "iters": rows[-1].iter if rows else 0,
        "status": status,
        "error": error,
    }
    return RunResult(
        records=rows, final_x=final_x, summary=summary, status=status, error=error
    )


def _run_plain(cfg, oracle, system, batch_rng, x0, tracer, every_n, batch_size):
    T = oracle.num_samples
    kind = cfg.optimizer["kind"]
    if "epochs" in cfg.budget:
        steps_per_epoch = T // batch_size
        total = cfg.budget["epochs"] * steps_per_epoch
    else:
        steps_per_epoch = 0
        total = cfg.budget["max_iters"]

    if kind in _BASELINE_KINDS:
        opt = _build_baseline(cfg.optimizer, "optimizer", kind, 0.01)
        bstate = opt.init_state(oracle.dim)
        x = x0.copy()
    else:
        mcfg = _build_mixer_cfg(cfg.optimizer)
        fallback = _build_baseline(
            cfg.optimizer.get("fallback"), "optimizer.fallback", "sgd", 0.01
        )
        precond = _build_precond(cfg.optimizer, system) if kind == "padasam" else None
        state = make_state(x0, mcfg, fallback=fallback, precond=precond)

    sfo = 0
    for k in range(1, total + 1):
        batch = _draw_batch(batch_rng, T, batch_size)
        if kind in _BASELINE_KINDS:
            g = oracle.minibatch_gradient(x, batch)
            sfo += batch_size
            x, bstate = opt.step(x, g, bstate)
            fields = _baseline_fields(opt)
        else:
            g = oracle.minibatch_gradient(state.x, batch)
            sfo += batch_size
            if kind == "padasam":
                state, rep = psam_step(state, -g, mcfg, precond)
            else:
                state, rep = sam_step(state, -g, mcfg, fallback)
            x = state.x
            fields = _report_fields(rep)
        if k % every_n == 0 or k == total:
            epoch = k // steps_per_epoch if steps_per_epoch else 0
            tracer.record(k, epoch, sfo, x, fields)
    return x, sfo


def _run_vr(cfg, oracle, batch_rng, x0, tracer, every_n):
    T = oracle.num_samples
    batch_size = cfg.budget["batch_size"]
    epochs = cfg.budget["epochs"]
    q = cfg.optimizer.get("q", T // batch_size)
    q = _pos_int(q, "optimizer.q")
    mcfg = _build_mixer_cfg(cfg.optimizer)
    fallback = _build_baseline(
        cfg.optimizer.get("fallback"), "optimizer.fallback", "sgd", 0.01
    )
    state = make_state(x0, mcfg, fallback=fallback)
    sfo = 0
    total = epochs * q
    it = 0
    for _ in range(epochs):
        snap = snapshot_at(oracle, state.x)
        sfo += T
        for _ in range(q):
            batch = _draw_batch(batch_rng, T, batch_size)
            g = vr_gradient(oracle, state.x, snap, batch)
            sfo += 2 * batch_size
            state, rep = sam_step(state, -g, mcfg, fallback)
            it += 1
            if it % every_n == 0 or it == total:
                tracer.record(it, it // q, sfo, state.x, _report_fields(rep))
    return state.x, sfo


# ---------------------------------------------------------------- output


def format_trace(records):
    """One compact JSON object per line, stable key order, trailing newline."""
    return "".join(
        json.dumps(r.as_dict(), separators=(",", ":")) + "\n" for r in records
    )


def write_trace(records, path):
    Path(path).write_text(format_trace(records))


def format_summary(summary):
    lines = [
        f"final loss        {summary['final_loss']:.6e}",
        f"min grad_norm_sq  {summary['min_grad_norm_sq']:.6e}",
        f"total SFO         {summary['sfo_calls']}",
        f"eval calls        {summary['eval_calls']}",
    ]
    if summary["status"] != "ok":
        lines.append(f"status            {summary['status']}: {summary['error']}")
    return "\n".join(lines)


# ---------------------------------------------------------------- compare


def compare_experiments(cfgs, num_seeds, labels=None, threads=None):
    """Run each config under seeds 0..num_seeds-1 and aggregate medians.

    Workers only ever touch their own run's state, so results are
    independent of scheduling; a row is flagged when its SFO budget
    differs from the first row's.
    """
    cfgs = list(cfgs)
    if not cfgs:
        raise ConfigError("compare needs at least one config")
    num_seeds = _pos_int(num_seeds, "seeds")
    if labels is None:
        labels = [cfg.optimizer.get("kind", "?") for cfg in cfgs]
    if threads is None:
        threads = int(os.environ.get("AMOPT_THREADS", "1"))
    jobs = [
        dataclasses.replace(cfg, seed=seed)
        for cfg in cfgs
        for seed in range(num_seeds)
    ]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run_experiment, jobs))
    rows = []
    for i, label in enumerate(labels):
        runs = results[i * num_seeds : (i + 1) * num_seeds]
        ok = all(r.status == "ok" for r in runs)
        rows.append(
            {
                "optimizer": label,
                "final_loss": statistics.median(r.summary["final_loss"] for r in runs),
                "min_grad_norm_sq": statistics.median(
                    r.summary["min_grad_norm_sq"] for r in runs
                ),
                "sfo_calls": runs[0].summary["sfo_calls"],
                "status": "ok" if ok else "numerical_error",
                "sfo_mismatch": False,
            }
        )
    base = rows[0]["sfo_calls"]
    for row in rows:
        row["sfo_mismatch"] = row["sfo_calls"] != base
    return rows


def format_compare_table(rows):
    headers = ("optimizer", "final_loss", "min_grad_norm_sq", "SFO")
    cells = [
        (
            row["optimizer"] + ("" if row["status"] == "ok" else " [failed]"),
            f"{row['final_loss']:.6e}",
            f"{row['min_grad_norm_sq']:.6e}",
            f"{row['sfo_calls']}" + (" *" if row["sfo_mismatch"] else ""),
        )
        for row in rows
    ]
    widths = [
        max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(headers)
    ]
    def fmt(parts):
        return "  ".join(p.ljust(w) for p, w in zip(parts, widths)).rstrip()
    out = [fmt(headers)] + [fmt(c) for c in cells]
    if any(row["sfo_mismatch"] for row in rows):
        out.append("* SFO budget differs from the first row")
    return "\n".join(out)
