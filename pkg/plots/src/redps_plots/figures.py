"""Render paper-style figures from experiment CSVs.

Three figure kinds:
  sweep       - latency vs arrival rate: solid per-model series for the
                original system, dashed series for the bound systems and the
                analytic fully-served curve (latency_sweep CSV schema).
  ci_bars     - near-insensitivity chart: one CI bar per size law on a
                zoomed y-axis (near_insensitivity CSV schema).
  load_curves - latency vs replication degree, one dashed-marker curve per
                load level (load_vs_d CSV schema).

Rendering is a pure function of the CSV bytes: fixed styles, no timestamps,
a pinned SVG hash salt, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "redps-plots"

import matplotlib.pyplot as plt  # noqa: E402 - backend must be set first

FIGURE_KINDS = ("sweep", "ci_bars", "load_curves")

# fixed palette so output does not depend on matplotlib style state
PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


class FigureSpecError(ValueError):
    """Malformed figure spec."""


class MissingColumnError(KeyError):
    """A required CSV column is absent."""


@dataclass(frozen=True)
class FigureSpec:
    kind: str
    inputs: tuple
    output: str
    title: str = ""
    xlabel: str = ""
    ylabel: str = "Expected latency"
    xlim: tuple | None = None
    ylim: tuple | None = None

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise FigureSpecError(f"unknown figure kind {self.kind!r}; "
                                  f"expected one of {FIGURE_KINDS}")
        if not self.inputs:
            raise FigureSpecError("figure spec needs at least one input CSV")
        for lim in (self.xlim, self.ylim):
            if lim is not None and not all(math.isfinite(v) for v in lim):
                raise FigureSpecError(f"axis limits must be finite, got {lim}")


def parse_figure_spec(text: str, base_dir: Path | None = None) -> FigureSpec:
    """Flat key = value lines; '#' starts a comment."""
    data = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FigureSpecError(f"line {ln}: expected key = value")
        key, val = (part.strip() for part in line.split("=", 1))
        data[key] = val
    try:
        kind = data.pop("kind")
        inputs = tuple(p.strip() for p in data.pop("input").split(","))
        output = data.pop("output")
    except KeyError as exc:
        raise FigureSpecError(f"figure spec must define {exc}") from None
    if base_dir is not None:
        inputs = tuple(str(base_dir / p) for p in inputs)
        output = str(base_dir / output)

    def limits(key):
        if key not in data:
            return None
        parts = data.pop(key).split(",")
        if len(parts) != 2:
            raise FigureSpecError(f"{key} needs two comma-separated numbers")
        return (float(parts[0]), float(parts[1]))

    return FigureSpec(kind=kind, inputs=inputs, output=output,
                      title=data.pop("title", ""), xlabel=data.pop("xlabel", ""),
                      ylabel=data.pop("ylabel", "Expected latency"),
                      xlim=limits("xlim"), ylim=limits("ylim"))


def _read_csv(path, required):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise MissingColumnError(f"{path}: missing column {col!r}")
        return list(reader)


def _float(row, col):
    v = row[col]
    return None if v == "" else float(v)


def _new_axes(spec):
    fig, ax = plt.subplots(figsize=(6.4, 4.2), dpi=100)
    if spec.title:
        ax.set_title(spec.title)
    ax.set_xlabel(spec.xlabel)
    ax.set_ylabel(spec.ylabel)
    if spec.xlim:
        ax.set_xlim(*spec.xlim)
    if spec.ylim:
        ax.set_ylim(*spec.ylim)
    return fig, ax


def _save(fig, output):
    out = Path(output)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out


def _render_sweep(spec):
    rows = _read_csv(spec.inputs[0],
                     ["model", "lambda", "variant", "mean_latency", "note"])
    fig, ax = _new_axes(spec)
    ax.set_xlabel(spec.xlabel or "arrival rate")
    models = []
    for row in rows:
        if row["model"] not in models:
            models.append(row["model"])
    colors = {m: PALETTE[i % len(PALETTE)] for i, m in enumerate(models)}
    analytic_drawn = set()
    for model in models:
        series = {}
        for row in rows:
            if row["model"] != model or _float(row, "mean_latency") is None:
                continue
            series.setdefault(row["variant"], []).append(
                (float(row["lambda"]), float(row["mean_latency"])))
        for variant, pts in sorted(series.items()):
            pts.sort()
            xs, ys = zip(*pts)
            if variant == "original":
                ax.plot(xs, ys, color=colors[model], label=model)
            elif variant == "fully_served_analytic":
                key = tuple(ys)
                if key in analytic_drawn:
                    continue  # identical-mean models share one analytic curve
                analytic_drawn.add(key)
                ax.plot(xs, ys, color="black", linestyle="--", linewidth=1.2,
                        label="fully-served (analytic)")
            else:
                ax.plot(xs, ys, color=colors[model], linestyle="--", linewidth=0.9)
    ax.legend(fontsize=7, loc="upper left")
    return _save(fig, spec.output)


def _render_ci_bars(spec):
    rows = _read_csv(spec.inputs[0],
                     ["model", "mean_latency", "ci_lo", "ci_hi"])
    fig, ax = _new_axes(spec)
    xs = range(len(rows))
    means = [float(r["mean_latency"]) for r in rows]
    lo = [float(r["ci_lo"]) for r in rows]
    hi = [float(r["ci_hi"]) for r in rows]
    err = [[m - a for m, a in zip(means, lo)], [b - m for m, b in zip(means, hi)]]
    ax.errorbar(xs, means, yerr=err, fmt="o", color="black", capsize=3)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([r["model"].split("(")[0] for r in rows],
                       rotation=30, ha="right", fontsize=7)
    if spec.ylim is None:
        pad = 0.15 * (max(hi) - min(lo) + 1e-12)
        ax.set_ylim(min(lo) - pad, max(hi) + pad)
    return _save(fig, spec.output)


def _render_load_curves(spec):
    rows = _read_csv(spec.inputs[0], ["d", "rho_tilde", "mean_latency"])
    fig, ax = _new_axes(spec)
    ax.set_xlabel(spec.xlabel or "replication degree d")
    loads = []
    for row in rows:
        if row["rho_tilde"] not in loads:
            loads.append(row["rho_tilde"])
    for i, load in enumerate(loads):
        pts = sorted((int(r["d"]), float(r["mean_latency"])) for r in rows
                     if r["rho_tilde"] == load and _float(r, "mean_latency") is not None)
        xs, ys = zip(*pts)
        ax.plot(xs, ys, linestyle="--", marker="o", color=PALETTE[i % len(PALETTE)],
                label=f"load {load}")
    ax.legend(fontsize=8)
    return _save(fig, spec.output)


def render(spec: FigureSpec) -> Path:
    """Render one figure spec to its SVG output path."""
    renderer = {"sweep": _render_sweep, "ci_bars": _render_ci_bars,
                "load_curves": _render_load_curves}[spec.kind]
    return renderer(spec)
