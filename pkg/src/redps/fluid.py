"""Numerical solver for the fluid-model functional equation.

State per virtual queue: mass q_i(t) plus cumulative per-job attained
service Phi_i(t). Forward stepping in Phi (Euler in time) combined with a
kernel integral that is evaluated EXACTLY for the piecewise-linear Phi
path: on a cell where Phi rises by dphi, int (1 - F(Phi(t) - Phi(s))) ds
equals h * (H(v_left) - H(v_right)) / dphi with H the integrated survival
of the size law. Plain trapezoid puts an O(h) bias at cdf jumps and at the
s = t endpoint, which inflates the near-critical levels enough to defeat
drain detection; the exact cell integral removes that failure mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .csvio import write_rows
from .distributions import JobSizeModel
from .virtual_queues import ClassIndex, build_class_index


@dataclass(frozen=True)
class FluidConfig:
    n_servers: int
    d: int
    arrival_rate: float
    min_dist: JobSizeModel           # law of X_min (cdf + integrated survival)
    q0: float | np.ndarray = 1.0     # initial mass, scalar or per class
    step: float = 0.05
    horizon: float = 400.0
    epsilon: float = 1e-6            # empty threshold: rate floor and drain detection
    mode: str = "scalar"             # scalar | min | max
    initial_dist: JobSizeModel | None = None  # G; defaults to the X_min law (fresh jobs)
    stop_on_drain: bool = True

    def __post_init__(self):
        if not 1 <= self.d <= self.n_servers:
            raise ValueError("need 1 <= d <= N")
        if self.step <= 0 or self.horizon <= 0 or self.epsilon <= 0:
            raise ValueError("step, horizon and epsilon must be positive")
        if self.mode not in ("scalar", "min", "max"):
            raise ValueError("mode must be scalar, min or max")
        if np.any(np.asarray(self.q0) < 0):
            raise ValueError("initial masses must be nonnegative")

    @property
    def m_classes(self) -> int:
        return math.comb(self.n_servers, self.d)

    @property
    def shared_per_server(self) -> int:
        return math.comb(self.n_servers - 1, self.d - 1)


@dataclass
class FluidPath:
    times: np.ndarray
    q: np.ndarray       # (K+1,) scalar mode, (K+1, M) vector modes
    phi: np.ndarray     # attained service per job, same shape as q
    drain_time: float | None
    config: FluidConfig

    def max_mass(self) -> np.ndarray:
        return self.q if self.q.ndim == 1 else self.q.max(axis=1)


@dataclass(frozen=True)
class FluidVerdict:
    status: str                  # stable | unstable | inconclusive
    drain_time: float | None
    slope: float | None


def _kernel_integral(h, phi_prefix, phi_now, dist):
    """Integral of S(Phi(t) - Phi(s)) ds over [0, t], exact for piecewise-linear Phi.

    Cells where Phi rose by dphi contribute h * dH / dphi with H the
    integrated survival; frozen cells contribute a constant S. Cells with an
    underflowing dphi use the left-edge survival instead of the 0/0 ratio.
    """
    v = phi_now - phi_prefix
    hh = dist.tail_integral(v)
    dphi = phi_prefix[1:] - phi_prefix[:-1]
    dh = hh[:-1] - hh[1:]
    tiny = dphi <= 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        cells = np.where(tiny, h * dist.sf(v[:-1]), h * dh / np.where(tiny, 1.0, dphi))
    return cells.sum()


def solve_scalar(cfg: FluidConfig) -> FluidPath:
    """Common-component fluid: a single PS queue with arrival rate lambda/M
    and per-job rate 1/(C(N-1,d-1) q)."""
    if cfg.mode != "scalar":
        raise ValueError("solve_scalar requires mode='scalar'")
    q0 = float(np.asarray(cfg.q0).reshape(-1)[0])
    a = cfg.arrival_rate / cfg.m_classes
    c_shared = cfg.shared_per_server
    g_dist = cfg.initial_dist if cfg.initial_dist is not None else cfg.min_dist
    h = cfg.step
    k_steps = int(round(cfg.horizon / h))
    times = np.arange(k_steps + 1) * h
    q = np.empty(k_steps + 1)
    phi = np.empty(k_steps + 1)
    q[0] = q0
    phi[0] = 0.0
    drain_time = None
    if q0 <= cfg.epsilon:
        drain_time = 0.0
    last = k_steps

    def mass_at(k, phi_now):
        prefix = np.append(phi[: k + 1], phi_now)
        integ = _kernel_integral(h, prefix, phi_now, cfg.min_dist)
        return max(q0 * (1.0 - float(g_dist.cdf(phi_now))) + a * integ, 0.0)

    def rate_of(mass):
        return 1.0 / (c_shared * mass) if mass > cfg.epsilon else 0.0

    for k in range(k_steps):
        # Heun step in Phi: predict the end-of-step mass, average the rates
        r0 = rate_of(q[k])
        q_star = mass_at(k, phi[k] + h * r0)
        phi[k + 1] = phi[k] + 0.5 * h * (r0 + rate_of(q_star))
        q[k + 1] = mass_at(k, phi[k + 1])
        if drain_time is None and q[k + 1] <= cfg.epsilon:
            drain_time = times[k + 1]
            if cfg.stop_on_drain:
                last = k + 1
                break
    return FluidPath(times[: last + 1], q[: last + 1], phi[: last + 1], drain_time, cfg)


def _shared_mass(index: ClassIndex, q_vec) -> np.ndarray:
    """(M, d) summed class masses over each class's servers."""
    ss = np.array([q_vec[index.classes_by_server[s]].sum()
                   for s in range(index.n_servers)])
    return ss[index.server_sets]


def solve_vector(cfg: FluidConfig) -> FluidPath:
    """Per-class fluid with the min- or max-mode interaction rates."""
    if cfg.mode not in ("min", "max"):
        raise ValueError("solve_vector requires mode 'min' or 'max'")
    index = build_class_index(cfg.n_servers, cfg.d)
    m = index.m_classes
    q0 = np.asarray(cfg.q0, dtype=np.float64)
    if q0.ndim == 0:
        q0 = np.full(m, float(q0))
    if q0.shape != (m,):
        raise ValueError(f"q0 must be scalar or length {m}")
    a = cfg.arrival_rate / m
    g_dist = cfg.initial_dist if cfg.initial_dist is not None else cfg.min_dist
    h = cfg.step
    k_steps = int(round(cfg.horizon / h))
    times = np.arange(k_steps + 1) * h
    q = np.empty((k_steps + 1, m))
    phi = np.empty((k_steps + 1, m))
    q[0] = q0
    phi[0] = 0.0
    drain_time = 0.0 if q0.max() <= cfg.epsilon else None
    last = k_steps

    def rates_of(q_vec):
        shared = _shared_mass(index, q_vec)
        agg = shared.min(axis=1) if cfg.mode == "min" else shared.max(axis=1)
        active = q_vec > cfg.epsilon
        return np.where(active & (agg > 0), 1.0 / np.maximum(agg, cfg.epsilon), 0.0)

    def masses_at(k, phi_now):
        out = np.empty(m)
        for i in range(m):
            prefix = np.append(phi[: k + 1, i], phi_now[i])
            integ = _kernel_integral(h, prefix, phi_now[i], cfg.min_dist)
            out[i] = max(q0[i] * (1.0 - float(g_dist.cdf(phi_now[i]))) + a * integ, 0.0)
        return out

    for k in range(k_steps):
        r0 = rates_of(q[k])
        q_star = masses_at(k, phi[k] + h * r0)
        phi[k + 1] = phi[k] + 0.5 * h * (r0 + rates_of(q_star))
        q[k + 1] = masses_at(k, phi[k + 1])
        if drain_time is None and q[k + 1].max() <= cfg.epsilon:
            drain_time = times[k + 1]
            if cfg.stop_on_drain:
                last = k + 1
                break
    return FluidPath(times[: last + 1], q[: last + 1], phi[: last + 1], drain_time, cfg)


def solve(cfg: FluidConfig) -> FluidPath:
    return solve_scalar(cfg) if cfg.mode == "scalar" else solve_vector(cfg)


def classify_fluid(path: FluidPath, growth_window: float | None = None,
                   slope_tol: float = 1e-4) -> FluidVerdict:
    """Stable when the mass hits the empty threshold; unstable when the
    trailing-window least-squares slope is clearly positive and the path ends
    above where it started; otherwise inconclusive."""
    if path.drain_time is not None:
        return FluidVerdict("stable", path.drain_time, None)
    t = path.times
    horizon = t[-1]
    if growth_window is None:
        growth_window = 0.4 * horizon
    if growth_window > horizon:
        raise ValueError("growth window exceeds the solved horizon")
    series = path.max_mass()
    mask = t >= horizon - growth_window
    if mask.sum() < 2:
        raise ValueError("growth window contains fewer than two grid points")
    slope = float(np.polyfit(t[mask], series[mask], 1)[0])
    if slope > slope_tol and series[-1] > series[0]:
        return FluidVerdict("unstable", None, slope)
    return FluidVerdict("inconclusive", None, slope)


def refinement_self_check(cfg: FluidConfig, rel_tol: float = 1e-3,
                          abs_floor_eps: float = 100.0):
    """Convergence check: halving the step must leave the terminal mass within
    rel_tol, or within abs_floor_eps * epsilon when the path has drained (the
    post-drain level is discretization noise near the empty threshold)."""
    from dataclasses import replace as _replace

    coarse = solve(cfg)
    fine = solve(_replace(cfg, step=cfg.step / 2))
    qc = float(np.max(np.atleast_1d(coarse.q[-1])))
    qf = float(np.max(np.atleast_1d(fine.q[-1])))
    diff = abs(qf - qc)
    tol = max(rel_tol * max(qf, qc), abs_floor_eps * cfg.epsilon)
    return diff <= tol, {"coarse": qc, "fine": qf, "diff": diff, "tol": tol}


def write_fluid_csv(path: FluidPath, file):
    q = path.q if path.q.ndim == 2 else path.q[:, None]
    phi = path.phi if path.phi.ndim == 2 else path.phi[:, None]
    m = q.shape[1]
    header = ["t"] + [f"q_{i + 1}" for i in range(m)] + [f"Phi_{i + 1}" for i in range(m)]
    rows = ([t] + qr.tolist() + pr.tolist()
            for t, qr, pr in zip(path.times.tolist(), q, phi))
    write_rows(file, header, rows)


def write_fluid_summary_csv(path: FluidPath, verdict: FluidVerdict, file):
    cfg = path.config
    write_rows(file,
               ["mode", "N", "d", "lambda", "verdict", "drain_time", "slope"],
               [[cfg.mode, cfg.n_servers, cfg.d, cfg.arrival_rate, verdict.status,
                 "" if verdict.drain_time is None else verdict.drain_time,
                 "" if verdict.slope is None else verdict.slope]])
