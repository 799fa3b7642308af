"""Bound systems viewed as M = C(N, d) interacting virtual PS queues.

Each class corresponds to one d-subset of servers; the per-job service
rate of class i is the reciprocal of the min (or max) over its servers of
the summed class counts sharing that server. Job sizes are X_min, so this
must reproduce the engine's server-level bound runs event for event: the
state here is organized by class, not by replica, which makes agreement a
real consistency check rather than a tautology.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from numba import njit

from .csvio import write_rows
from .engine import (
    EventCounts,
    SimulationRecord,
    SystemConfig,
    Variant,
    generate_stream,
    JobStream,
)


@dataclass(frozen=True)
class ClassIndex:
    n_servers: int
    d: int
    m_classes: int
    server_sets: np.ndarray        # (M, d) sorted rows in lexicographic order
    classes_by_server: tuple       # N arrays of class ids containing that server

    def sharing_set(self, class_id: int, position: int) -> np.ndarray:
        """S_j^i: classes whose server set contains this class's j-th server."""
        return self.classes_by_server[self.server_sets[class_id, position]]


def build_class_index(n_servers: int, d: int, max_classes: int = 100_000) -> ClassIndex:
    if not 1 <= d <= n_servers:
        raise ValueError("need 1 <= d <= N")
    m = math.comb(n_servers, d)
    if m > max_classes:
        raise ValueError(f"C({n_servers},{d}) = {m} exceeds the class cap {max_classes}")
    sets = np.array(list(combinations(range(n_servers), d)), dtype=np.int64)
    by_server = tuple(np.flatnonzero((sets == s).any(axis=1)).astype(np.int64)
                      for s in range(n_servers))
    expect = math.comb(n_servers - 1, d - 1)
    for s in range(n_servers):
        if by_server[s].size != expect:
            raise InternalError  # pragma: no cover - combinatorial identity
    return ClassIndex(n_servers, d, m, sets, by_server)


def class_of_subsets(index: ClassIndex, server_subsets: np.ndarray) -> np.ndarray:
    """Map (n, d) server picks to lexicographic class ids via bitmask lookup."""
    sorted_sets = np.sort(server_subsets, axis=1)
    class_masks = (1 << index.server_sets.astype(np.int64)).sum(axis=1)
    job_masks = (1 << sorted_sets.astype(np.int64)).sum(axis=1)
    order = np.argsort(class_masks)
    pos = np.searchsorted(class_masks[order], job_masks)
    return order[pos]


def class_rate(index: ClassIndex, class_id: int, class_counts, mode: str) -> float:
    """Per-job rate of a virtual queue; zero for an empty class by convention."""
    counts = np.asarray(class_counts)
    if counts[class_id] <= 0:
        return 0.0
    sums = [counts[index.classes_by_server[s]].sum() for s in index.server_sets[class_id]]
    agg = min(sums) if mode == "min" else max(sums)
    return 1.0 / float(agg)


def server_sums(index: ClassIndex, class_counts) -> np.ndarray:
    """Per-server queue lengths reconstructed from the class counts."""
    counts = np.asarray(class_counts)
    return np.array([counts[index.classes_by_server[s]].sum()
                     for s in range(index.n_servers)])


@njit(cache=True)
def _virtual_loop(arr_t, job_class, xmin, class_servers, n_jobs, d, n_servers, m_classes,
                  use_min, drain, traj_cap):
    rem = np.zeros(n_jobs)
    rate = np.zeros(n_jobs)
    act = np.empty(n_jobs, np.int64)
    m = 0
    qc = np.zeros(m_classes, np.int64)
    ssum = np.zeros(n_servers, np.int64)
    comp_t = np.full(n_jobs, np.nan)
    jobs_in = 0
    completions = 0
    t = 0.0
    job_area = 0.0
    i_arr = 0

    traj_t = np.empty(traj_cap)
    traj_q = np.empty((traj_cap, n_servers), np.int64)
    traj_c = np.empty((traj_cap, m_classes), np.int64)
    traj_len = 0
    stride = 1
    ev_i = 0

    while True:
        dt_best = np.inf
        k_fin = -1
        for p in range(m):
            jj = act[p]
            ft = rem[jj] / rate[jj]
            if ft < dt_best:
                dt_best = ft
                k_fin = p
        if i_arr < n_jobs:
            t_arr = arr_t[i_arr]
        else:
            if m == 0 or not drain:
                break
            t_arr = np.inf
        t_fin = t + dt_best if k_fin >= 0 else np.inf
        is_arrival = t_arr <= t_fin

        t_next = t_arr if is_arrival else t_fin
        dt = t_next - t
        if dt < 0.0:
            dt = 0.0
        job_area += jobs_in * dt
        for p in range(m):
            jj = act[p]
            r2 = rem[jj] - dt * rate[jj]
            rem[jj] = r2 if r2 > 0.0 else 0.0
        t = t_next

        if is_arrival:
            j = i_arr
            i_arr += 1
            if xmin[j] <= 0.0:
                comp_t[j] = t
                completions += 1
            else:
                c = job_class[j]
                qc[c] += 1
                for r in range(d):
                    ssum[class_servers[c, r]] += 1
                rem[j] = xmin[j]
                act[m] = j
                m += 1
                jobs_in += 1
        else:
            j = act[k_fin]
            c = job_class[j]
            comp_t[j] = t
            completions += 1
            qc[c] -= 1
            for r in range(d):
                ssum[class_servers[c, r]] -= 1
            rem[j] = 0.0
            rate[j] = 0.0
            for p in range(k_fin, m - 1):
                act[p] = act[p + 1]
            m -= 1
            jobs_in -= 1

        for p in range(m):
            jj = act[p]
            c = job_class[jj]
            agg = ssum[class_servers[c, 0]]
            for r in range(1, d):
                v = ssum[class_servers[c, r]]
                if use_min:
                    if v < agg:
                        agg = v
                else:
                    if v > agg:
                        agg = v
            if agg <= 0:
                raise RuntimeError("active virtual job with empty shared-server sum")
            rate[jj] = 1.0 / agg

        if ev_i % stride == 0:
            if traj_len == traj_cap:
                half = traj_cap // 2
                for i2 in range(half):
                    traj_t[i2] = traj_t[2 * i2]
                    for s2 in range(n_servers):
                        traj_q[i2, s2] = traj_q[2 * i2, s2]
                    for c2 in range(m_classes):
                        traj_c[i2, c2] = traj_c[2 * i2, c2]
                traj_len = half
                stride *= 2
            if ev_i % stride == 0:
                traj_t[traj_len] = t
                for s2 in range(n_servers):
                    traj_q[traj_len, s2] = ssum[s2]
                for c2 in range(m_classes):
                    traj_c[traj_len, c2] = qc[c2]
                traj_len += 1
        ev_i += 1

    return (comp_t, traj_t[:traj_len].copy(), traj_q[:traj_len].copy(),
            traj_c[:traj_len].copy(), i_arr, completions, jobs_in, t, job_area)


def run_virtual(config: SystemConfig, mode: str, stream: JobStream | None = None,
                index: ClassIndex | None = None) -> SimulationRecord:
    """Simulate the M-class virtual-queue representation of a bound system.

    mode 'min' mirrors the lower bound, 'max' the upper bound. Passing the
    stream of an engine run couples the two representations exactly.
    """
    if mode not in ("min", "max"):
        raise ValueError("mode must be 'min' or 'max'")
    if index is None:
        index = build_class_index(config.n_servers, config.d)
    if stream is None:
        stream = generate_stream(config)
    n = stream.arrival_times.size
    job_class = class_of_subsets(index, stream.servers)
    xmin = stream.raw_sizes.min(axis=1)
    traj_cap = max(64, int(config.trajectory_max_rows))

    (comp_t, traj_t, traj_q, traj_c, admitted, completions, in_system, t_end,
     job_area) = _virtual_loop(
        stream.arrival_times, job_class.astype(np.int64),
        np.ascontiguousarray(xmin), index.server_sets,
        n, config.d, config.n_servers, index.m_classes,
        mode == "min", config.drain, traj_cap)

    warm = config.resolved_warmup(admitted)
    done = np.isfinite(comp_t)
    keep = done.copy()
    keep[:warm] = False
    ids = np.flatnonzero(keep)
    variant = Variant.LOWER_BOUND if mode == "min" else Variant.UPPER_BOUND
    record = SimulationRecord(
        variant=variant,
        seed=config.seed,
        n_servers=config.n_servers,
        d=config.d,
        arrival_rate=config.arrival_rate,
        warmup=warm,
        job_ids=ids,
        arrival_times=stream.arrival_times[ids],
        latencies=comp_t[ids] - stream.arrival_times[ids],
        trajectory_times=traj_t,
        trajectory_queues=traj_q,
        events=EventCounts(admitted, completions, 0),
        t_end=t_end,
        job_area=job_area,
        n_admitted=admitted,
        in_system_end=in_system,
    )
    record.snapshots = {"class_trajectory": traj_c}
    return record


def write_classes_csv(index: ClassIndex, path):
    rows = ([i, "|".join(str(s + 1) for s in index.server_sets[i])]
            for i in range(index.m_classes))
    write_rows(path, ["class_id", "server_set"], rows)
