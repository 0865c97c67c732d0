"""Render convergence figures from trace files.

The report path reads line-delimited trace records (one JSON object per
line, schema per harness.TRACE_FIELDS) and writes static PNG figures next
to them: loss and squared gradient norm against iteration or cumulative
SFO calls. Multiple traces overlay on shared axes so optimizer runs can
be compared the way the summary tables compare them.

Backend is forced to Agg before pyplot is imported; the harness runs
headless and only ever writes files.
"""

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

# (record field, y-axis label, output file suffix)
_PANELS = (
    ("loss", "loss", "loss"),
    ("grad_norm_sq", "squared gradient norm", "grad_norm_sq"),
)

_X_FIELDS = {"iter": "iteration", "sfo": "SFO calls"}


def load_trace(path):
    """Parse a line-delimited trace file into a list of record dicts.

    Blank lines are skipped (a truncated final line is not). Raises
    ValueError naming the offending line on malformed input.
    """
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: bad trace line: {exc}") from exc
            if not isinstance(rec, dict):
                raise ValueError(f"{path}:{lineno}: trace line is not an object")
            records.append(rec)
    if not records:
        raise ValueError(f"{path}: empty trace")
    return records


def curve(records, field, x_field="iter"):
    """Extract (x, y) arrays for one field, dropping null entries."""
    key = "sfo_calls" if x_field == "sfo" else "iter"
    xs, ys = [], []
    for rec in records:
        val = rec.get(field)
        if val is None:
            continue
        xs.append(rec[key])
        ys.append(val)
    return np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)


def _label_of(path):
    stem = os.path.splitext(os.path.basename(path))[0]
    return stem or path


def render_trace_figures(paths, prefix=None, labels=None, x_field="iter"):
    """Write loss and grad-norm PNGs for one or more trace files.

    Figures land alongside the first trace by default: for trace
    runs/am.jsonl the outputs are runs/am_loss.png and
    runs/am_grad_norm_sq.png. `prefix` overrides that stem, `labels`
    overrides the per-trace legend entries, and `x_field` selects
    "iter" or "sfo" for the shared x axis. Returns the written paths.
    """
    if not paths:
        raise ValueError("report needs at least one trace file")
    if x_field not in _X_FIELDS:
        raise ValueError(f"unknown x_field {x_field!r}")
    if labels is None:
        labels = [_label_of(p) for p in paths]
    if len(labels) != len(paths):
        raise ValueError("labels must match trace files one to one")
    traces = [load_trace(p) for p in paths]
    if prefix is None:
        prefix = os.path.splitext(paths[0])[0]

    written = []
    for figno, (field, ylabel, suffix) in enumerate(_PANELS):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        positive = True
        for records, label in zip(traces, labels):
            x, y = curve(records, field, x_field)
            if y.size == 0:
                continue
            positive = positive and bool(np.all(y > 0.0))
            ax.plot(x, y, label=label)
        # log scale only when every plotted value admits it; a converged
        # run can legitimately trace an exact zero
        if positive:
            ax.set_yscale("log")
        ax.set_xlabel(_X_FIELDS[x_field])
        ax.set_ylabel(ylabel)
        ax.grid(True, which="both", alpha=0.3)
        if len(traces) > 1:
            ax.legend()
        fig.tight_layout()
        out = f"{prefix}_{suffix}.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)
    return written
