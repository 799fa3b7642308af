"""Load/threshold formulas and the empirical stability-threshold estimator."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .csvio import write_rows
from .distributions import (
    AgingClass,
    EMinEstimate,
    IID,
    JobSizeModel,
    classify_aging,
    expected_min,
)
from .engine import SystemConfig, run, replication_seeds


@dataclass(frozen=True)
class LoadReport:
    n_servers: int
    d: int
    arrival_rate: float
    rho: float                    # lambda E[X] / N
    rho_tilde: float              # d lambda E[min] / N
    lambda_crit_fluid: float      # N / (d E[min])
    lambda_crit_sufficient: float  # N / (d E[X]), i.e. rho < 1/d
    e_min: EMinEstimate


def load_report(n_servers: int, d: int, arrival_rate: float, model: JobSizeModel,
                dep, method: str = "analytic", n_samples: int = 10**6,
                seed: int = 0) -> LoadReport:
    if not 1 <= d <= n_servers:
        raise ValueError("need 1 <= d <= N")
    if arrival_rate <= 0:
        raise ValueError("arrival rate must be positive")
    est = expected_min(dep, model, d, method=method, n_samples=n_samples, seed=seed)
    mean = model.mean()
    return LoadReport(
        n_servers=n_servers,
        d=d,
        arrival_rate=arrival_rate,
        rho=arrival_rate * mean / n_servers,
        rho_tilde=d * arrival_rate * est.value / n_servers,
        lambda_crit_fluid=n_servers / (d * est.value),
        lambda_crit_sufficient=n_servers / (d * mean),
        e_min=est,
    )


def bernoulli_thresholds(n_servers: int, d: int, big_k: float):
    """Closed-form scaled-Bernoulli stability thresholds: FCFS K^(d-1), PS N K^(d-1)/d."""
    if big_k <= 1:
        raise ValueError("K must exceed 1")
    if d < 2:
        raise ValueError("the asymptotic thresholds require d >= 2")
    if d > n_servers:
        raise ValueError("need d <= N")
    fcfs = big_k ** (d - 1)
    ps = n_servers * big_k ** (d - 1) / d
    return fcfs, ps


@dataclass(frozen=True)
class ThresholdPoint:
    arrival_rate: float
    slope: float
    slope_ci_lo: float
    slope_ci_hi: float
    verdict: str  # stable | unstable | indeterminate


@dataclass
class ThresholdResult:
    status: str                    # ok | inconclusive
    lambda_star: float | None
    ci: tuple | None
    points: list


def _trajectory_slope(record, trailing_frac: float) -> float:
    t = record.trajectory_times
    total = record.trajectory_queues.sum(axis=1)
    if t.size < 8:
        raise ValueError("trajectory too short for a drift regression")
    cut = t[-1] * (1.0 - trailing_frac)
    mask = t >= cut
    return float(np.polyfit(t[mask], total[mask], 1)[0])


def estimate_threshold(base: SystemConfig, lambda_grid, replications: int = 5,
                       trailing_frac: float = 0.5, z: float = 1.96,
                       floor_frac: float = 0.005,
                       initial_jobs: int | None = None) -> ThresholdResult:
    """Empirical stability threshold from queue-length drift regressions.

    Runs fixed-arrival-count simulations (no drain) per grid point, regresses
    total queue length on time over the trailing part of each trajectory, and
    interpolates the drift zero crossing between the last draining and the
    first significantly-growing grid point. Each run starts from a sizable
    backlog: near criticality an empty-started system is metastable (it keeps
    falling back to small states where the effective capacity is higher), so
    the fluid-scale drift is only visible from a large state. Verdicts apply
    a practical floor of floor_frac * lambda to the drift CI.
    """
    grid = sorted(lambda_grid)
    if len(grid) < 2:
        raise ValueError("need a lambda grid with at least two points")
    if replications < 2:
        raise ValueError("need at least 2 replications per grid point")
    if initial_jobs is None:
        initial_jobs = base.initial_jobs or 1500
    points = []
    for lam in grid:
        cfg = replace(base, arrival_rate=lam, drain=False, initial_jobs=initial_jobs)
        slopes = []
        for s in replication_seeds(cfg.seed, replications):
            rec = run(replace(cfg, seed=s))
            slopes.append(_trajectory_slope(rec, trailing_frac))
        slopes = np.array(slopes)
        mean = float(slopes.mean())
        hw = z * float(slopes.std(ddof=1)) / np.sqrt(replications)
        lo, hi = mean - hw, mean + hw
        floor = floor_frac * lam
        if lo > floor:
            verdict = "unstable"
        elif hi < floor:
            verdict = "stable"
        else:
            verdict = "indeterminate"
        points.append(ThresholdPoint(lam, mean, lo, hi, verdict))

    first_unstable = next((i for i, p in enumerate(points) if p.verdict == "unstable"), None)
    if first_unstable is None or first_unstable == 0:
        return ThresholdResult("inconclusive", None, None, points)
    below = points[first_unstable - 1]
    if below.verdict == "unstable":  # pragma: no cover - ordering guard
        return ThresholdResult("inconclusive", None, None, points)
    above = points[first_unstable]

    def crossing(s_lo, s_hi):
        if s_hi <= s_lo:
            return above.arrival_rate
        lam = below.arrival_rate + (0.0 - s_lo) * (above.arrival_rate - below.arrival_rate) / (s_hi - s_lo)
        return float(np.clip(lam, below.arrival_rate, above.arrival_rate))

    lam_star = crossing(below.slope, above.slope)
    # CI endpoints from the most-optimistic / most-pessimistic slope readings
    lam_lo = crossing(below.slope_ci_hi, above.slope_ci_hi)
    lam_hi = crossing(below.slope_ci_lo, above.slope_ci_lo)
    return ThresholdResult("ok", lam_star, (min(lam_lo, lam_hi), max(lam_lo, lam_hi)), points)


@dataclass
class OrderingReport:
    classification: AgingClass
    d_values: list
    thresholds: list            # lambda_crit_fluid(d) under i.i.d. replicas
    scaled_e_min: list          # d * E[min_d]
    monotone_ok: bool


def nbu_threshold_ordering(model: JobSizeModel, n_servers: int, d_range,
                           mc_samples: int = 10**6, seed: int = 0) -> OrderingReport:
    """Fluid thresholds over d for i.i.d. replicas, checked against the aging class.

    NBU sizes make replication waste capacity (d E[min] grows, threshold
    falls); NWU sizes gain from replication. The exponential boundary keeps
    the threshold flat.
    """
    classification = classify_aging(model)
    if classification is AgingClass.INDETERMINATE:
        raise ValueError("threshold ordering is only defined for NBU/NWU/exponential models")
    d_values = list(d_range)
    if any(d < 1 or d > n_servers for d in d_values):
        raise ValueError("d out of range")
    thresholds = []
    scaled = []
    for d in d_values:
        try:
            est = expected_min(IID(), model, d)
        except Exception:
            est = expected_min(IID(), model, d, method="monte_carlo",
                               n_samples=mc_samples, seed=seed)
        thresholds.append(n_servers / (d * est.value))
        scaled.append(d * est.value)
    diffs = np.diff(thresholds)
    tol = 1e-9 + 4e-3 * np.abs(np.asarray(thresholds[:-1]))
    if classification is AgingClass.NBU:
        ok = bool(np.all(diffs <= tol))
    elif classification is AgingClass.NWU:
        ok = bool(np.all(diffs >= -tol))
    else:
        ok = bool(np.all(np.abs(diffs) <= tol))
    return OrderingReport(classification, d_values, thresholds, scaled, ok)


def write_threshold_csv(result: ThresholdResult, path):
    rows = ([p.arrival_rate, p.slope, p.slope_ci_lo, p.slope_ci_hi, p.verdict]
            for p in result.points)
    write_rows(path, ["lambda", "slope", "slope_ci_lo", "slope_ci_hi", "verdict"], rows)


def write_loads_csv(reports, path):
    rows = ([r.n_servers, r.d, r.arrival_rate, r.rho, r.rho_tilde,
             r.lambda_crit_fluid, r.lambda_crit_sufficient,
             r.e_min.value, r.e_min.std_error, r.e_min.method]
            for r in reports)
    write_rows(path, ["N", "d", "lambda", "rho", "rho_tilde", "lambda_crit_fluid",
                      "lambda_crit_sufficient", "e_min", "e_min_se", "e_min_method"], rows)
