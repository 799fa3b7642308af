"""Config-driven experiment runner reproducing the paper-style studies.

Spec files are line-oriented ``key = value`` text with optional one-level
``[section]`` headers. Values are numbers, bare identifiers, call syntax
with named or positional arguments (``weibull(shape=0.5, scale=1.0)``,
``range(start=0.2, stop=0.9, count=8)``), or comma-separated lists of
those. One experiment per file.

Every emitted cell carries its rho_tilde so plots can mark the fluid
stability wall; cells at rho_tilde >= 1 are marked ``unstable`` without
being simulated, and near-critical cells are annotated ``high-variance``.
CSV bytes are reproducible: fixed float formatting, deterministic cell
order, replication seeds derived from the recorded base seed.
"""

from __future__ import annotations

import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .csvio import write_rows
from .distributions import expected_min, make_dependence, make_model
from .engine import (
    Horizon,
    SystemConfig,
    Variant,
    mean_latency,
    replication_seeds,
    run,
    run_coupled,
)
from .fluid import FluidConfig, classify_fluid, solve, write_fluid_csv, write_fluid_summary_csv
from .stability import estimate_threshold, load_report, write_loads_csv, write_threshold_csv

SCENARIOS = ("latency_sweep", "near_insensitivity", "load_vs_d", "threshold_sweep",
             "fluid_run", "bound_comparison")

HIGH_VARIANCE_RHO = 0.97


class SpecError(ValueError):
    """Malformed experiment spec file."""


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple
    kwargs: dict

    def __str__(self):
        parts = [f"{a:g}" if isinstance(a, float) else str(a) for a in self.args]
        parts += [f"{k}={v}" for k, v in self.kwargs.items()]
        return f"{self.name}({', '.join(parts)})"

    def __hash__(self):
        return hash((self.name, self.args, tuple(sorted(self.kwargs.items()))))


_CALL_RE = re.compile(r"^([A-Za-z_][\w-]*)\((.*)\)$")


def _split_top_level(text: str):
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise SpecError(f"unbalanced parentheses in {text!r}")
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if depth != 0:
        raise SpecError(f"unbalanced parentheses in {text!r}")
    last = "".join(cur).strip()
    if last or parts:
        parts.append(last)
    return parts


def _parse_scalar(tok: str):
    low = tok.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        pass
    return tok


def parse_value(text: str):
    text = text.strip()
    if not text:
        raise SpecError("empty value")
    parts = _split_top_level(text)
    if len(parts) > 1:
        return [parse_value(p) for p in parts]
    m = _CALL_RE.match(text)
    if m:
        name, body = m.group(1), m.group(2).strip()
        args, kwargs = [], {}
        if body:
            for piece in _split_top_level(body):
                if "=" in piece and _CALL_RE.match(piece) is None:
                    k, v = piece.split("=", 1)
                    kwargs[k.strip()] = _parse_scalar(v.strip())
                else:
                    args.append(_parse_scalar(piece))
        return Call(name, tuple(args), kwargs)
    return _parse_scalar(text)


def parse_spec_text(text: str) -> dict:
    out = {}
    section = None
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise SpecError(f"line {ln}: malformed section header")
            inner = line[1:-1].strip()
            if not inner or "[" in inner or "]" in inner:
                raise SpecError(f"line {ln}: nested sections are not allowed")
            section = inner
            continue
        if "=" not in line:
            raise SpecError(f"line {ln}: expected key = value")
        key, val = line.split("=", 1)
        key = key.strip()
        full = f"{section}.{key}" if section else key
        if full in out:
            raise SpecError(f"line {ln}: duplicate key {full}")
        out[full] = parse_value(val)
    return out


def _as_list(v):
    return v if isinstance(v, list) else [v]


def _expand_grid(v):
    vals = []
    for item in _as_list(v):
        if isinstance(item, Call) and item.name == "range":
            kw = dict(zip(("start", "stop", "count"), item.args)) | item.kwargs
            vals.extend(float(x) for x in np.linspace(kw["start"], kw["stop"], int(kw["count"])))
        else:
            vals.append(float(item))
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise SpecError("lambda grid must be strictly increasing")
    return vals


def _build_model(v):
    if isinstance(v, Call):
        return make_model(v.name, *v.args, **v.kwargs)
    raise SpecError(f"expected a distribution call, got {v!r}")


def _build_dep(v):
    if isinstance(v, Call):
        return make_dependence(v.name, *v.args, **v.kwargs)
    return make_dependence(str(v))


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    scenario: str
    params: dict

    @staticmethod
    def from_file(path) -> "ExperimentSpec":
        data = parse_spec_text(Path(path).read_text())
        try:
            name = str(data.pop("name"))
            scenario = str(data.pop("scenario"))
        except KeyError as exc:
            raise SpecError(f"spec must define {exc}") from None
        if scenario not in SCENARIOS:
            raise SpecError(f"unknown scenario {scenario!r}; pick one of {SCENARIOS}")
        return ExperimentSpec(name, scenario, data)


def fully_served_analytic(n_servers, d, lam, mean_size):
    """Per-replica M/X/1/PS sojourn in the fully-served system; None when unstable."""
    rho_srv = d * lam * mean_size / n_servers
    if rho_srv >= 1:
        return None
    return mean_size / (1.0 - rho_srv)


def _cell_note(rho_tilde):
    if rho_tilde >= 1.0:
        return "unstable"
    if rho_tilde > HIGH_VARIANCE_RHO:
        return "high-variance"
    return ""


def _replicate(cfg: SystemConfig, n_reps: int, variants=None, workers: int = 1):
    """Replications (optionally coupled across variants) merged in seed order."""
    seeds = replication_seeds(cfg.seed, n_reps)
    tasks = [replace(cfg, seed=s) for s in seeds]
    if variants is None:
        fn = run
        jobs = tasks
    else:
        fn = _coupled_cell
        jobs = [(c, tuple(variants)) for c in tasks]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, jobs) if variants else pool.map(fn, jobs))
    else:
        results = [fn(j) for j in jobs]
    return results


def _coupled_cell(arg):
    cfg, variants = arg
    return run_coupled([replace(cfg, variant=v) for v in variants])


def _summarize(records):
    mean, hw = mean_latency(records)
    n = int(sum(r.latencies.size for r in records))
    return mean, hw, n


def run_experiment(spec: ExperimentSpec, out_dir, workers: int = 1) -> dict:
    """Execute one experiment spec; returns {artifact name: path}."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    runner = {
        "latency_sweep": _run_latency_sweep,
        "near_insensitivity": _run_near_insensitivity,
        "load_vs_d": _run_load_vs_d,
        "threshold_sweep": _run_threshold_sweep,
        "fluid_run": _run_fluid,
        "bound_comparison": _run_bound_comparison,
    }[spec.scenario]
    artifacts, manifest_extra = runner(spec, out, workers)
    manifest = {
        "name": spec.name,
        "scenario": spec.scenario,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "wall_time_s": f"{time.time() - t0:.3f}",
        **manifest_extra,
    }
    man_path = out / f"{spec.name}.manifest.txt"
    with open(man_path, "w") as fh:
        for k, v in manifest.items():
            fh.write(f"{k} = {v}\n")
    artifacts["manifest"] = man_path
    return artifacts


def _common_sim_params(p):
    n_servers = int(p.get("n_servers", 4))
    d = int(p.get("d", 2))
    dep = _build_dep(p.get("dep", "identical"))
    arrivals = int(p.get("arrivals", 100_000))
    reps = int(p.get("replications", 10))
    seed = int(p.get("seed", 20240501))
    warmup = p.get("warmup", None)
    return n_servers, d, dep, arrivals, reps, seed, (None if warmup is None else int(warmup))


_VARIANT_ALIASES = {
    "lower": Variant.LOWER_BOUND, "lowerbound": Variant.LOWER_BOUND,
    "original": Variant.ORIGINAL,
    "upper": Variant.UPPER_BOUND, "upperbound": Variant.UPPER_BOUND,
    "fully_served": Variant.FULLY_SERVED, "fullyserved": Variant.FULLY_SERVED,
}


def _run_latency_sweep(spec, out, workers):
    p = spec.params
    n_servers, d, dep, arrivals, reps, seed, warmup = _common_sim_params(p)
    models = [( _build_model(c), str(c) ) for c in _as_list(p["models"])]
    lambdas = _expand_grid(p["lambdas"])
    variants = [_VARIANT_ALIASES[str(v).lower()] for v in _as_list(
        p.get("variants", ["lower", "original", "upper"]))]
    rows = []
    for model, label in models:
        e_min = expected_min(dep, model, d).value
        for lam in lambdas:
            rho_tilde = d * lam * e_min / n_servers
            note = _cell_note(rho_tilde)
            if note == "unstable":
                for v in variants:
                    rows.append([label, lam, rho_tilde, v.value, "", "", 0, note])
            else:
                cfg = SystemConfig(n_servers, d, lam, model, dep,
                                   horizon=Horizon.arrivals(arrivals), warmup=warmup,
                                   seed=seed)
                coupled = _replicate(cfg, reps, variants=variants, workers=workers)
                for v in variants:
                    recs = [c[v] for c in coupled]
                    mean, hw, n = _summarize(recs)
                    cell_note = note
                    if any(r.in_system_end > 0.2 * r.n_admitted for r in recs):
                        cell_note = "unstable"
                    rows.append([label, lam, rho_tilde, v.value, mean, hw, n, cell_note])
            analytic = fully_served_analytic(n_servers, d, lam, model.mean())
            rows.append([label, lam, rho_tilde, "fully_served_analytic",
                         "" if analytic is None else analytic, 0.0, 0,
                         note if analytic is not None else "unstable"])
    path = out / f"{spec.name}.csv"
    write_rows(path, ["model", "lambda", "rho_tilde", "variant", "mean_latency",
                      "ci_halfwidth", "n_jobs", "note"], rows)
    return {"csv": path}, {"seed": seed, "arrivals": arrivals, "replications": reps,
                           "cells": len(models) * len(lambdas)}


def _run_near_insensitivity(spec, out, workers):
    p = spec.params
    n_servers, d, dep, arrivals, reps, seed, warmup = _common_sim_params(p)
    models = [(_build_model(c), str(c)) for c in _as_list(p["models"])]
    rho_tilde = float(p.get("rho_tilde", 0.5))
    rows = []
    for model, label in models:
        e_min = expected_min(dep, model, d).value
        lam = rho_tilde * n_servers / (d * e_min)
        cfg = SystemConfig(n_servers, d, lam, model, dep,
                           horizon=Horizon.arrivals(arrivals), warmup=warmup, seed=seed)
        recs = _replicate(cfg, reps, workers=workers)
        mean, hw, n = _summarize(recs)
        rows.append([label, lam, rho_tilde, mean, mean - hw, mean + hw, n,
                     _cell_note(rho_tilde)])
    path = out / f"{spec.name}.csv"
    write_rows(path, ["model", "lambda", "rho_tilde", "mean_latency", "ci_lo", "ci_hi",
                      "n_jobs", "note"], rows)
    return {"csv": path}, {"seed": seed, "arrivals": arrivals, "replications": reps,
                           "rho_tilde": rho_tilde}


def _run_load_vs_d(spec, out, workers):
    p = spec.params
    n_servers, _, dep, arrivals, reps, seed, warmup = _common_sim_params(p)
    model = _build_model(p["model"] if "model" in p else _as_list(p["models"])[0])
    loads = [float(x) for x in _as_list(p.get("loads", [0.5, 0.75, 0.95]))]
    d_values = [int(x) for x in _as_list(p.get("d_values", list(range(1, n_servers + 1))))]
    rows = []
    for rho_tilde in loads:
        for d in d_values:
            e_min = expected_min(dep, model, d).value
            lam = rho_tilde * n_servers / (d * e_min)
            cfg = SystemConfig(n_servers, d, lam, model, dep,
                               horizon=Horizon.arrivals(arrivals), warmup=warmup, seed=seed)
            recs = _replicate(cfg, reps, workers=workers)
            mean, hw, n = _summarize(recs)
            rows.append([d, rho_tilde, lam, mean, hw, n, _cell_note(rho_tilde)])
    path = out / f"{spec.name}.csv"
    write_rows(path, ["d", "rho_tilde", "lambda", "mean_latency", "ci_halfwidth",
                      "n_jobs", "note"], rows)
    return {"csv": path}, {"seed": seed, "arrivals": arrivals, "replications": reps,
                           "model": model.spec_string()}


def _run_threshold_sweep(spec, out, workers):
    p = spec.params
    n_servers, d, dep, arrivals, reps, seed, warmup = _common_sim_params(p)
    model = _build_model(p["model"] if "model" in p else _as_list(p["models"])[0])
    base = SystemConfig(n_servers, d, 1.0, model, dep,
                        horizon=Horizon.arrivals(arrivals), warmup=warmup, seed=seed)
    if "lambdas" in p:
        grid = _expand_grid(p["lambdas"])
    else:
        rep = load_report(n_servers, d, 1.0, model, dep)
        rel = _expand_grid(p.get("relative_grid",
                                 [0.90, 0.94, 0.98, 1.02, 1.06, 1.10]))
        grid = [r * rep.lambda_crit_fluid for r in rel]
    result = estimate_threshold(base, grid, replications=reps)
    path = out / f"{spec.name}.csv"
    write_threshold_csv(result, path)
    extra = {"seed": seed, "arrivals": arrivals, "replications": reps,
             "status": result.status}
    if result.lambda_star is not None:
        extra["lambda_star"] = f"{result.lambda_star:.6g}"
        extra["lambda_star_ci"] = f"{result.ci[0]:.6g},{result.ci[1]:.6g}"
    return {"csv": path}, extra


def _run_fluid(spec, out, workers):
    p = spec.params
    n_servers = int(p.get("n_servers", 4))
    d = int(p.get("d", 2))
    dep = _build_dep(p.get("dep", "identical"))
    model = _build_model(p["model"] if "model" in p else _as_list(p["models"])[0])
    from .distributions import min_size_distribution
    lam = float(p["lambda"])
    cfg = FluidConfig(
        n_servers, d, lam, min_size_distribution(dep, model, d),
        q0=float(p.get("q0", 1.0)),
        step=float(p.get("step", 0.05)),
        horizon=float(p.get("horizon", 400.0)),
        mode=str(p.get("mode", "scalar")),
    )
    path_obj = solve(cfg)
    verdict = classify_fluid(path_obj)
    csv_path = out / f"{spec.name}.csv"
    sum_path = out / f"{spec.name}_summary.csv"
    write_fluid_csv(path_obj, csv_path)
    write_fluid_summary_csv(path_obj, verdict, sum_path)
    return ({"csv": csv_path, "summary": sum_path},
            {"lambda": lam, "verdict": verdict.status})


def _run_bound_comparison(spec, out, workers):
    p = spec.params
    n_servers, d, dep, arrivals, reps, seed, warmup = _common_sim_params(p)
    models = [(_build_model(c), str(c)) for c in _as_list(p["models"])]
    lambdas = _expand_grid(p["lambdas"])
    variants = (Variant.LOWER_BOUND, Variant.ORIGINAL, Variant.UPPER_BOUND)
    rows = []
    for model, label in models:
        e_min = expected_min(dep, model, d).value
        for lam in lambdas:
            rho_tilde = d * lam * e_min / n_servers
            if rho_tilde >= 1:
                rows.append([label, lam, rho_tilde, "", "", 0, "unstable"])
                continue
            cfg = SystemConfig(n_servers, d, lam, model, dep,
                               horizon=Horizon.arrivals(arrivals), warmup=0, seed=seed)
            coupled = _replicate(cfg, reps, variants=variants, workers=workers)
            ok_lo = ok_up = total = 0
            for c in coupled:
                lo, orig, up = (c[v].latencies for v in variants)
                ok_lo += int(np.sum(lo <= orig + 1e-9))
                ok_up += int(np.sum(orig <= up + 1e-9))
                total += orig.size
            rows.append([label, lam, rho_tilde, ok_lo / total, ok_up / total, total,
                         _cell_note(rho_tilde)])
    path = out / f"{spec.name}.csv"
    write_rows(path, ["model", "lambda", "rho_tilde", "frac_lower_le_original",
                      "frac_original_le_upper", "n_jobs", "note"], rows)
    return {"csv": path}, {"seed": seed, "arrivals": arrivals, "replications": reps}
