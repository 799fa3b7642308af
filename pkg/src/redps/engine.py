"""Event-driven simulation of the redundancy-d processor-sharing system.

One exact event loop covers the original system, the coupled lower/upper
bound systems (replicas served at the reciprocal of the min/max sampled
queue length, sizes collapsed to X_min), and the fully-served variant in
which no replica is ever cancelled. Between events every active replica
accrues work at a piecewise-constant rate; the next event is the earlier
of the next Poisson arrival and the earliest projected replica completion.
Ties break as (time, arrivals-before-completions, job id, replica index),
so runs are bit-reproducible given the seed.

The hot loop is JIT-compiled; per event it rescans the active replicas,
which is O(active) work and is the dominant cost at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from numba import njit

from .csvio import write_rows
from .distributions import (
    DependenceModel,
    JobSizeModel,
    ReplicaSizes,
    sample_replica_matrix,
)


class InternalConsistencyError(RuntimeError):
    """State bookkeeping broke an invariant (e.g. active replica at an empty queue)."""


class Variant(str, Enum):
    ORIGINAL = "original"
    LOWER_BOUND = "lower"
    UPPER_BOUND = "upper"
    FULLY_SERVED = "fully_served"


_VARIANT_CODE = {
    Variant.ORIGINAL: 0,
    Variant.LOWER_BOUND: 1,
    Variant.UPPER_BOUND: 2,
    Variant.FULLY_SERVED: 3,
}


@dataclass(frozen=True)
class Horizon:
    kind: str
    value: float

    @staticmethod
    def arrivals(n: int) -> "Horizon":
        return Horizon("arrivals", int(n))

    @staticmethod
    def time(t: float) -> "Horizon":
        return Horizon("time", float(t))

    def __post_init__(self):
        if self.kind not in ("arrivals", "time"):
            raise ValueError("horizon kind must be 'arrivals' or 'time'")
        if self.value <= 0:
            raise ValueError("horizon must be positive")


@dataclass(frozen=True)
class SystemConfig:
    n_servers: int
    d: int
    arrival_rate: float
    model: JobSizeModel
    dep: DependenceModel
    variant: Variant = Variant.ORIGINAL
    horizon: Horizon = Horizon("arrivals", 10_000)
    warmup: int | None = None  # None -> 10% of admitted arrivals
    seed: int = 0
    drain: bool = True
    trajectory_max_rows: int = 4096
    initial_jobs: int = 0  # backlog injected at t=0 (drift/stability experiments)
    check_invariants: bool = False
    record_snapshots: bool = False

    def __post_init__(self):
        if not 1 <= self.d <= self.n_servers:
            raise ValueError("need 1 <= d <= N")
        if not self.arrival_rate > 0:
            raise ValueError("arrival rate must be positive")
        if self.initial_jobs < 0:
            raise ValueError("initial_jobs must be nonnegative")
        if self.warmup is not None:
            if self.warmup < 0:
                raise ValueError("warmup must be nonnegative")
            if self.horizon.kind == "arrivals" and self.warmup >= self.horizon.value:
                raise ValueError("warmup must be smaller than the arrival count")

    def resolved_warmup(self, n_admitted: int) -> int:
        if self.warmup is not None:
            return min(self.warmup, n_admitted)
        return n_admitted // 10


@dataclass(frozen=True)
class JobStream:
    """Shared randomness for coupled runs: arrivals, server picks, raw sizes."""

    arrival_times: np.ndarray  # (n,)
    servers: np.ndarray        # (n, d) distinct server indices per job
    raw_sizes: np.ndarray      # (n, d)


@dataclass
class EventCounts:
    arrivals: int = 0
    completions: int = 0
    cancellations: int = 0


@dataclass
class SimulationRecord:
    variant: Variant
    seed: int
    n_servers: int
    d: int
    arrival_rate: float
    warmup: int
    job_ids: np.ndarray          # post-warmup completed jobs, ascending
    arrival_times: np.ndarray
    latencies: np.ndarray
    trajectory_times: np.ndarray
    trajectory_queues: np.ndarray  # (rows, N) replica counts per server
    events: EventCounts
    t_end: float
    job_area: float              # integral of the number of jobs in system
    n_admitted: int
    in_system_end: int
    replica_latencies: np.ndarray | None = None  # fully-served only
    replica_servers: np.ndarray | None = None
    snapshots: dict | None = None

    def mean_latency(self) -> float:
        if self.latencies.size == 0:
            raise ValueError("no post-warmup completions recorded")
        return float(self.latencies.mean())


def replica_rate(variant: Variant, job_servers, server_index: int, queue_lengths) -> float:
    """Service rate earned by one replica given the current queue lengths.

    Original and fully-served replicas share their own server's capacity;
    bound-system replicas all move at the reciprocal of the min (lower) or
    max (upper) queue length among the job's d sampled servers.
    """
    q = np.asarray(queue_lengths)
    if variant in (Variant.ORIGINAL, Variant.FULLY_SERVED):
        qj = q[server_index]
        if qj <= 0:
            raise InternalConsistencyError("active replica at a server with queue length 0")
        return 1.0 / float(qj)
    sampled = q[np.asarray(job_servers)]
    agg = sampled.min() if variant is Variant.LOWER_BOUND else sampled.max()
    if agg <= 0:
        raise InternalConsistencyError("active job with an empty sampled queue")
    return 1.0 / float(agg)


def effective_sizes(variant: Variant, raw: ReplicaSizes) -> ReplicaSizes:
    """Bound systems collapse every replica to X_min; others keep raw sizes."""
    if variant in (Variant.LOWER_BOUND, Variant.UPPER_BOUND):
        return ReplicaSizes(sizes=(raw.min_size,) * len(raw))
    return raw


def _effective_size_matrix(variant: Variant, raw: np.ndarray):
    rawmin_idx = raw.argmin(axis=1).astype(np.int64)
    if variant in (Variant.LOWER_BOUND, Variant.UPPER_BOUND):
        eff = np.repeat(raw.min(axis=1)[:, None], raw.shape[1], axis=1)
    else:
        eff = raw
    return np.ascontiguousarray(eff, dtype=np.float64), rawmin_idx


def _sample_server_subsets(rng, n: int, n_servers: int, d: int) -> np.ndarray:
    """Uniform d-subsets without replacement via partial Fisher-Yates per job."""
    idx = np.tile(np.arange(n_servers, dtype=np.int64), (n, 1))
    rows = np.arange(n)
    for j in range(d):
        r = rng.integers(j, n_servers, size=n)
        tmp = idx[rows, j].copy()
        idx[rows, j] = idx[rows, r]
        idx[rows, r] = tmp
    return np.ascontiguousarray(idx[:, :d])


def generate_stream(config: SystemConfig) -> JobStream:
    """Deterministic Poisson arrivals + server picks + raw replica sizes.

    An optional backlog of initial_jobs is injected at time zero ahead of the
    Poisson stream so threshold experiments can measure drain/growth drift.
    """
    rng = np.random.default_rng(config.seed)
    lam = config.arrival_rate
    if config.horizon.kind == "arrivals":
        n = int(config.horizon.value)
        arrivals = rng.exponential(1.0 / lam, n).cumsum()
    else:
        horizon_t = config.horizon.value
        chunks = []
        t_acc = 0.0
        while t_acc <= horizon_t:
            block = rng.exponential(1.0 / lam, max(1024, int(lam * horizon_t * 0.25) + 1))
            chunks.append(block)
            t_acc += block.sum()
        arrivals = np.concatenate(chunks).cumsum()
        arrivals = arrivals[arrivals <= horizon_t]
        n = arrivals.size
    if config.initial_jobs:
        arrivals = np.concatenate([np.zeros(config.initial_jobs), arrivals])
        n += config.initial_jobs
    servers = _sample_server_subsets(rng, n, config.n_servers, config.d)
    raw = sample_replica_matrix(config.dep, config.model, config.d, n, rng)
    return JobStream(arrivals, servers, np.ascontiguousarray(raw, dtype=np.float64))


@njit(cache=True)
def _event_loop(arr_t, srv_flat, sizes_flat, rawmin_idx, n_jobs, d, n_servers,
                variant, drain, t_cutoff, traj_cap, record_snaps, check_inv):
    n_slots = n_jobs * d
    rem = np.zeros(n_slots)
    rate = np.zeros(n_slots)
    act = np.empty(n_slots, np.int64)
    m = 0
    q = np.zeros(n_servers, np.int64)
    comp_t = np.full(n_jobs, np.nan)
    if variant == 3:
        rep_comp_t = np.full(n_slots, np.nan)
    else:
        rep_comp_t = np.full(1, np.nan)
    live_reps = np.zeros(n_jobs, np.int64)
    jobs_in = 0
    completions = 0
    cancellations = 0
    t = 0.0
    job_area = 0.0
    i_arr = 0

    traj_t = np.empty(traj_cap)
    traj_q = np.empty((traj_cap, n_servers), np.int64)
    traj_len = 0
    stride = 1
    ev_i = 0

    if record_snaps:
        snap_rem = np.zeros((n_jobs, n_slots))
        snap_q = np.zeros((n_jobs, n_servers), np.int64)
    else:
        snap_rem = np.zeros((1, 1))
        snap_q = np.zeros((1, 1), np.int64)

    while True:
        dt_best = np.inf
        k_fin = -1
        for p in range(m):
            s = act[p]
            ft = rem[s] / rate[s]
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
            s = act[p]
            r2 = rem[s] - dt * rate[s]
            rem[s] = r2 if r2 > 0.0 else 0.0
        t = t_next

        j = -1
        if is_arrival:
            j = i_arr
            i_arr += 1
            base = j * d
            if variant <= 2:
                szmin = sizes_flat[base]
                for r in range(1, d):
                    if sizes_flat[base + r] < szmin:
                        szmin = sizes_flat[base + r]
                if szmin <= 0.0:
                    # zero-size jobs depart at the arrival instant, never queue
                    comp_t[j] = t
                    completions += 1
                    cancellations += d - 1
                else:
                    for r in range(d):
                        s = base + r
                        rem[s] = sizes_flat[s]
                        act[m] = s
                        m += 1
                        q[srv_flat[s]] += 1
                    jobs_in += 1
            else:
                cnt = 0
                for r in range(d):
                    s = base + r
                    if sizes_flat[s] <= 0.0:
                        rep_comp_t[s] = t
                    else:
                        rem[s] = sizes_flat[s]
                        act[m] = s
                        m += 1
                        q[srv_flat[s]] += 1
                        cnt += 1
                live_reps[j] = cnt
                if cnt == 0:
                    comp_t[j] = t
                    completions += 1
                else:
                    jobs_in += 1
        else:
            s_star = act[k_fin]
            jc = s_star // d
            if variant <= 2:
                base = jc * d
                if check_inv and variant >= 1:
                    # bound systems: completion always happens via the raw-minimal replica
                    if rem[base + rawmin_idx[jc]] > 1e-9:
                        raise RuntimeError("bound system completed via a non-minimal replica")
                comp_t[jc] = t
                completions += 1
                cancellations += d - 1
                k0 = k_fin - (s_star - base)
                for r in range(d):
                    s = base + r
                    q[srv_flat[s]] -= 1
                    rem[s] = 0.0
                    rate[s] = 0.0
                for p in range(k0, m - d):
                    act[p] = act[p + d]
                m -= d
                jobs_in -= 1
            else:
                rep_comp_t[s_star] = t
                q[srv_flat[s_star]] -= 1
                rem[s_star] = 0.0
                rate[s_star] = 0.0
                for p in range(k_fin, m - 1):
                    act[p] = act[p + 1]
                m -= 1
                live_reps[jc] -= 1
                if live_reps[jc] == 0:
                    comp_t[jc] = t
                    completions += 1
                    jobs_in -= 1

        # rates change globally only at events; recompute over the active set
        if variant == 0 or variant == 3:
            for p in range(m):
                s = act[p]
                qs = q[srv_flat[s]]
                if qs <= 0:
                    raise RuntimeError("active replica at a server with queue length 0")
                rate[s] = 1.0 / qs
        else:
            p = 0
            while p < m:
                s0 = act[p]
                b2 = (s0 // d) * d
                agg = q[srv_flat[b2]]
                for r in range(1, d):
                    q2 = q[srv_flat[b2 + r]]
                    if variant == 1:
                        if q2 < agg:
                            agg = q2
                    else:
                        if q2 > agg:
                            agg = q2
                if agg <= 0:
                    raise RuntimeError("active job with an empty sampled queue")
                rv = 1.0 / agg
                for r in range(d):
                    rate[b2 + r] = rv
                p += d

        if check_inv and (variant == 0 or variant == 3):
            grant = np.zeros(n_servers)
            for p in range(m):
                grant[srv_flat[act[p]]] += rate[act[p]]
            for s2 in range(n_servers):
                if q[s2] > 0 and abs(grant[s2] - 1.0) > 1e-9:
                    raise RuntimeError("PS work conservation violated")

        if ev_i % stride == 0:
            if traj_len == traj_cap:
                half = traj_cap // 2
                for i2 in range(half):
                    traj_t[i2] = traj_t[2 * i2]
                    for s2 in range(n_servers):
                        traj_q[i2, s2] = traj_q[2 * i2, s2]
                traj_len = half
                stride *= 2
            if ev_i % stride == 0:
                traj_t[traj_len] = t
                for s2 in range(n_servers):
                    traj_q[traj_len, s2] = q[s2]
                traj_len += 1
        ev_i += 1

        if record_snaps and is_arrival:
            for s2 in range(n_slots):
                snap_rem[j, s2] = rem[s2]
            for s3 in range(n_servers):
                snap_q[j, s3] = q[s3]

    if not drain and np.isfinite(t_cutoff) and t_cutoff > t:
        job_area += jobs_in * (t_cutoff - t)
        t = t_cutoff

    return (comp_t, rep_comp_t, traj_t[:traj_len].copy(), traj_q[:traj_len].copy(),
            snap_rem, snap_q, i_arr, completions, cancellations, jobs_in, t, job_area)


def _simulate(config: SystemConfig, stream: JobStream) -> SimulationRecord:
    n = stream.arrival_times.size
    d = config.d
    eff, rawmin_idx = _effective_size_matrix(config.variant, stream.raw_sizes)
    if config.record_snapshots and n > 4000:
        raise ValueError("residual snapshots are for validation-size runs (n <= 4000)")
    t_cutoff = config.horizon.value if config.horizon.kind == "time" else np.inf
    traj_cap = max(64, int(config.trajectory_max_rows))

    (comp_t, rep_comp_t, traj_t, traj_q, snap_rem, snap_q, admitted, completions,
     cancellations, in_system, t_end, job_area) = _event_loop(
        stream.arrival_times, stream.servers.reshape(-1), eff.reshape(-1), rawmin_idx,
        n, d, config.n_servers, _VARIANT_CODE[config.variant], config.drain, t_cutoff,
        traj_cap, config.record_snapshots, config.check_invariants)

    warm = config.resolved_warmup(admitted)
    done = np.isfinite(comp_t)
    keep = done.copy()
    keep[:warm] = False
    ids = np.flatnonzero(keep)
    record = SimulationRecord(
        variant=config.variant,
        seed=config.seed,
        n_servers=config.n_servers,
        d=d,
        arrival_rate=config.arrival_rate,
        warmup=warm,
        job_ids=ids,
        arrival_times=stream.arrival_times[ids],
        latencies=comp_t[ids] - stream.arrival_times[ids],
        trajectory_times=traj_t,
        trajectory_queues=traj_q,
        events=EventCounts(admitted, completions, cancellations),
        t_end=t_end,
        job_area=job_area,
        n_admitted=admitted,
        in_system_end=in_system,
    )
    if config.variant is Variant.FULLY_SERVED:
        rep_done = np.isfinite(rep_comp_t)
        rep_job = np.arange(n * d) // d
        rep_keep = rep_done & (rep_job >= warm)
        slots = np.flatnonzero(rep_keep)
        record.replica_latencies = rep_comp_t[slots] - stream.arrival_times[rep_job[slots]]
        record.replica_servers = stream.servers.reshape(-1)[slots]
    if config.record_snapshots:
        record.snapshots = {"residuals": snap_rem, "queues": snap_q}
    return record


def run(config: SystemConfig) -> SimulationRecord:
    """Simulate one configuration; deterministic in config.seed."""
    return _simulate(config, generate_stream(config))


def run_coupled(configs) -> dict:
    """Run several variants on common arrivals, server picks and raw sizes.

    All configs must agree on everything except the variant; per-job
    latencies across the returned records are aligned by job id.
    """
    configs = list(configs)
    if not configs:
        raise ValueError("no configs")
    base = configs[0]
    for other in configs[1:]:
        if replace(other, variant=base.variant) != base:
            raise ValueError("coupled configs must be identical except for the variant")
    stream = generate_stream(base)
    return {cfg.variant: _simulate(cfg, stream) for cfg in configs}


def replication_seeds(base_seed: int, n_reps: int):
    return [int(s) for s in np.random.SeedSequence(base_seed).generate_state(n_reps)]


def run_replications(config: SystemConfig, n_reps: int) -> list:
    """Independent replications with derived seeds, merged in seed order."""
    return [run(replace(config, seed=s)) for s in replication_seeds(config.seed, n_reps)]


def mean_latency(records, z: float = 1.96):
    """Across-replication mean latency and normal-approximation 95% half-width."""
    records = list(records)
    if len(records) < 2:
        raise ValueError("need at least 2 replications for a confidence interval")
    means = np.array([r.mean_latency() for r in records])
    hw = z * means.std(ddof=1) / math.sqrt(means.size)
    return float(means.mean()), float(hw)


# ---------------------------------------------------------------------------
# CSV serialization


def write_latency_csv(record: SimulationRecord, path):
    rows = zip(record.job_ids.tolist(),
               record.arrival_times.tolist(),
               record.latencies.tolist())
    write_rows(path, ["job_id", "arrival_time", "latency"], rows)


def write_trajectory_csv(record: SimulationRecord, path):
    header = ["time"] + [f"q_{s + 1}" for s in range(record.n_servers)]
    rows = ([t] + qs.tolist()
            for t, qs in zip(record.trajectory_times.tolist(), record.trajectory_queues))
    write_rows(path, header, rows)


def write_summary_csv(record_sets, path):
    """One row per replication set: (variant, lambda, mean, ci, n_jobs, seed)."""
    rows = []
    for base_seed, records in record_sets:
        mean, hw = mean_latency(records)
        rows.append([records[0].variant.value, records[0].arrival_rate, mean, hw,
                     int(sum(r.latencies.size for r in records)), base_seed])
    write_rows(path, ["variant", "lambda", "mean_latency", "ci_halfwidth", "n_jobs", "seed"],
               rows)
