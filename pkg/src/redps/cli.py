"""Command-line interface: simulate | experiment | fluid | threshold | report | validate.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime error
(including failed validation properties).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .csvio import write_rows
from .distributions import make_dependence, min_size_distribution
from .engine import (
    Horizon,
    SystemConfig,
    Variant,
    generate_stream,
    mean_latency,
    run,
    run_coupled,
    run_replications,
    _simulate,
    write_latency_csv,
    write_trajectory_csv,
)
from .experiments import Call, ExperimentSpec, SpecError, parse_value, run_experiment
from .fluid import FluidConfig, classify_fluid, solve, write_fluid_csv, write_fluid_summary_csv
from .stability import estimate_threshold, load_report, write_loads_csv, write_threshold_csv
from .virtual_queues import run_virtual


class _CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _CliError(message)


def _model_from_arg(text):
    v = parse_value(text)
    if not isinstance(v, Call):
        raise _CliError(f"expected a distribution call like 'exponential(mean=2)', got {text!r}")
    from .distributions import make_model
    return make_model(v.name, *v.args, **v.kwargs)


def _dep_from_arg(text):
    v = parse_value(text)
    if isinstance(v, Call):
        return make_dependence(v.name, *v.args, **v.kwargs)
    return make_dependence(str(v))


def _add_system_args(p, with_variant=True):
    p.add_argument("-N", "--n-servers", type=int, required=True)
    p.add_argument("-d", type=int, required=True)
    p.add_argument("--lambda", dest="arrival_rate", type=float, required=True)
    p.add_argument("--dist", required=True, help="e.g. 'exponential(mean=2)'")
    p.add_argument("--dep", default="identical", help="identical | iid | clayton(theta=...)")
    if with_variant:
        p.add_argument("--variant", default="original",
                       choices=[v.value for v in Variant])


def _add_globals(p, suppress):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--seed", type=int, **({"default": 20240501} if not suppress else kw))
    p.add_argument("--out", **({"default": "out"} if not suppress else kw))
    p.add_argument("--format", choices=["csv"],
                   **({"default": "csv"} if not suppress else kw))


def _build_parser():
    top = _Parser(prog="redps", description=__doc__)
    _add_globals(top, suppress=False)
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one system configuration")
    _add_globals(p, suppress=True)
    _add_system_args(p)
    p.add_argument("--arrivals", type=int, default=100_000)
    p.add_argument("--time-horizon", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--replications", type=int, default=1)
    p.add_argument("--no-drain", action="store_true")

    p = sub.add_parser("experiment", help="run an experiment spec file")
    _add_globals(p, suppress=True)
    p.add_argument("spec_file")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("fluid", help="solve the fluid model for one configuration")
    _add_globals(p, suppress=True)
    _add_system_args(p, with_variant=False)
    p.add_argument("--q0", type=float, default=1.0)
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--horizon", type=float, default=400.0)
    p.add_argument("--mode", default="scalar", choices=["scalar", "min", "max"])

    p = sub.add_parser("threshold", help="estimate the empirical stability threshold")
    _add_globals(p, suppress=True)
    _add_system_args(p, with_variant=False)
    p.add_argument("--lambda-grid", default=None,
                   help="comma list of absolute arrival rates; default brackets the fluid threshold")
    p.add_argument("--arrivals", type=int, default=40_000)
    p.add_argument("--replications", type=int, default=5)

    p = sub.add_parser("report", help="print the load report (rho, rho_tilde, thresholds)")
    _add_globals(p, suppress=True)
    _add_system_args(p, with_variant=False)
    p.add_argument("--emin-method", default="analytic", choices=["analytic", "monte_carlo"])

    p = sub.add_parser("validate", help="run the coupling/equivalence property suite")
    _add_globals(p, suppress=True)
    p.add_argument("--arrivals", type=int, default=2000)
    return top


def _cmd_simulate(args):
    model = _model_from_arg(args.dist)
    dep = _dep_from_arg(args.dep)
    horizon = (Horizon.time(args.time_horizon) if args.time_horizon is not None
               else Horizon.arrivals(args.arrivals))
    cfg = SystemConfig(args.n_servers, args.d, args.arrival_rate, model, dep,
                       variant=Variant(args.variant), horizon=horizon,
                       warmup=args.warmup, seed=args.seed, drain=not args.no_drain)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.replications > 1:
        recs = run_replications(cfg, args.replications)
        mean, hw = mean_latency(recs)
        rec = recs[0]
        n_jobs = int(sum(r.latencies.size for r in recs))
    else:
        rec = run(cfg)
        mean, hw, n_jobs = rec.mean_latency(), "", rec.latencies.size
    write_latency_csv(rec, out / "latencies.csv")
    write_trajectory_csv(rec, out / "trajectory.csv")
    write_rows(out / "summary.csv",
               ["variant", "lambda", "mean_latency", "ci_halfwidth", "n_jobs", "seed"],
               [[cfg.variant.value, cfg.arrival_rate, mean, hw, n_jobs, args.seed]])
    print(f"mean latency {mean:.6g}" + (f" +/- {hw:.3g}" if hw else ""))
    return 0


def _cmd_experiment(args):
    spec = ExperimentSpec.from_file(args.spec_file)
    artifacts = run_experiment(spec, Path(args.out), workers=args.workers)
    for kind, path in artifacts.items():
        print(f"{kind}: {path}")
    return 0


def _cmd_fluid(args):
    model = _model_from_arg(args.dist)
    dep = _dep_from_arg(args.dep)
    cfg = FluidConfig(args.n_servers, args.d, args.arrival_rate,
                      min_size_distribution(dep, model, args.d),
                      q0=args.q0, step=args.step, horizon=args.horizon, mode=args.mode)
    path_obj = solve(cfg)
    verdict = classify_fluid(path_obj)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_fluid_csv(path_obj, out / "fluid.csv")
    write_fluid_summary_csv(path_obj, verdict, out / "fluid_summary.csv")
    msg = f"verdict {verdict.status}"
    if verdict.drain_time is not None:
        msg += f" (drain time {verdict.drain_time:.6g})"
    if verdict.slope is not None:
        msg += f" (trailing slope {verdict.slope:.6g})"
    print(msg)
    return 0


def _cmd_threshold(args):
    model = _model_from_arg(args.dist)
    dep = _dep_from_arg(args.dep)
    base = SystemConfig(args.n_servers, args.d, 1.0, model, dep,
                        horizon=Horizon.arrivals(args.arrivals), seed=args.seed)
    if args.lambda_grid:
        grid = [float(x) for x in args.lambda_grid.split(",")]
    else:
        rep = load_report(args.n_servers, args.d, 1.0, model, dep)
        grid = [r * rep.lambda_crit_fluid for r in (0.90, 0.94, 0.98, 1.02, 1.06, 1.10)]
    result = estimate_threshold(base, grid, replications=args.replications)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_threshold_csv(result, out / "threshold.csv")
    if result.status != "ok":
        print("threshold estimate inconclusive: grid does not bracket a drift sign change")
        return 2
    print(f"lambda_star {result.lambda_star:.6g} "
          f"ci [{result.ci[0]:.6g}, {result.ci[1]:.6g}]")
    return 0


def _cmd_report(args):
    model = _model_from_arg(args.dist)
    dep = _dep_from_arg(args.dep)
    rep = load_report(args.n_servers, args.d, args.arrival_rate, model, dep,
                      method=args.emin_method, seed=args.seed)
    print(f"rho = {rep.rho:.6g}")
    print(f"rho_tilde = {rep.rho_tilde:.6g}")
    print(f"lambda_crit_fluid = {rep.lambda_crit_fluid:.6g}")
    print(f"lambda_crit_sufficient = {rep.lambda_crit_sufficient:.6g}")
    print(f"E[min] = {rep.e_min.value:.6g} (se {rep.e_min.std_error:.3g}, {rep.e_min.method})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_loads_csv([rep], out / "loads.csv")
    return 0


def _cmd_validate(args):
    from .distributions import Exponential, Identical, IID, Weibull
    n = args.arrivals
    failures = []

    def check(label, ok):
        print(f"[{'PASS' if ok else 'FAIL'}] {label}")
        if not ok:
            failures.append(label)

    variants = (Variant.LOWER_BOUND, Variant.ORIGINAL, Variant.UPPER_BOUND,
                Variant.FULLY_SERVED)

    # degenerate coincidence: d=1 and d=N make all variants identical
    for n_srv, d, dep in ((3, 1, IID()), (3, 3, Identical())):
        cfg = SystemConfig(n_srv, d, 0.4 * n_srv / 2, Exponential(2.0), dep,
                           horizon=Horizon.arrivals(n), warmup=0, seed=args.seed)
        recs = run_coupled([replace(cfg, variant=v) for v in variants])
        base = recs[Variant.ORIGINAL].latencies
        same = all(np.allclose(recs[v].latencies, base, atol=1e-9, rtol=0)
                   for v in variants)
        check(f"d={d} N={n_srv} variant coincidence", same)

    # ordering under coupling, including residual snapshots at arrival epochs
    cfg = SystemConfig(4, 2, 0.7, Exponential(2.0), Identical(),
                       horizon=Horizon.arrivals(min(n, 1500)), warmup=0, seed=args.seed,
                       record_snapshots=True, check_invariants=True)
    recs = run_coupled([replace(cfg, variant=v) for v in variants])
    lo, orig, up, fs = (recs[v] for v in variants)
    check("latency ordering lower <= original <= upper (all jobs)",
          bool(np.all(lo.latencies <= orig.latencies + 1e-9)
               and np.all(orig.latencies <= up.latencies + 1e-9)))
    check("original <= fully-served job latency (all jobs)",
          bool(np.all(orig.latencies <= fs.latencies + 1e-9)))
    q_lo, q_or, q_up = (r.snapshots["queues"] for r in (lo, orig, up))
    check("queue-length ordering at arrival epochs",
          bool(np.all(q_lo <= q_or) and np.all(q_or <= q_up)))
    r_lo = lo.snapshots["residuals"]
    r_or = orig.snapshots["residuals"]
    r_up = up.snapshots["residuals"]
    check("componentwise residual ordering lower <= original",
          bool(np.all(r_lo <= r_or + 1e-9)))
    d = cfg.d
    m_lo, m_or, m_up = (r.reshape(r.shape[0], -1, d).min(axis=2)
                        for r in (r_lo, r_or, r_up))
    check("per-job min-residual ordering lower <= original <= upper",
          bool(np.all(m_lo <= m_or + 1e-9) and np.all(m_or <= m_up + 1e-9)))

    # virtual-queue equivalence against the server-level bound runs
    for mode, var in (("min", Variant.LOWER_BOUND), ("max", Variant.UPPER_BOUND)):
        cfg = SystemConfig(4, 2, 0.6, Weibull(0.5, 1.0), IID(), variant=var,
                           horizon=Horizon.arrivals(min(n, 3000)), warmup=0,
                           seed=args.seed + 1)
        stream = generate_stream(cfg)
        r_engine = _simulate(cfg, stream)
        r_virtual = run_virtual(cfg, mode, stream=stream)
        ok = (np.array_equal(r_engine.job_ids, r_virtual.job_ids)
              and np.allclose(r_engine.latencies, r_virtual.latencies, atol=1e-9, rtol=0)
              and np.array_equal(r_engine.trajectory_queues, r_virtual.trajectory_queues))
        check(f"virtual-queue equivalence ({mode} mode)", ok)

    # fluid Property 1: equal initial masses keep all components equal
    from .distributions import min_size_distribution as msd
    scal = solve(FluidConfig(4, 2, 0.8, msd(Identical(), Exponential(2.0), 2),
                             q0=2.0, step=0.05, horizon=40.0, stop_on_drain=False))
    vec = solve(FluidConfig(4, 2, 0.8, msd(Identical(), Exponential(2.0), 2),
                            q0=2.0, step=0.05, horizon=40.0, mode="min",
                            stop_on_drain=False))
    check("fluid component coincidence (vector vs scalar)",
          bool(np.max(np.abs(vec.q - scal.q[:, None])) < 1e-8))

    if failures:
        print(f"{len(failures)} validation check(s) failed")
        return 2
    print("all validation checks passed")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    handlers = {
        "simulate": _cmd_simulate,
        "experiment": _cmd_experiment,
        "fluid": _cmd_fluid,
        "threshold": _cmd_threshold,
        "report": _cmd_report,
        "validate": _cmd_validate,
    }
    try:
        return handlers[args.command](args)
    except (_CliError, SpecError, ValueError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
