import math
from dataclasses import replace

import numpy as np
import pytest

from redps.distributions import (
    Deterministic,
    Exponential,
    IID,
    Identical,
    ReplicaSizes,
    ScaledBernoulli,
    Weibull,
)
from redps.engine import (
    Horizon,
    InternalConsistencyError,
    SimulationRecord,
    SystemConfig,
    Variant,
    effective_sizes,
    generate_stream,
    mean_latency,
    replica_rate,
    run,
    run_coupled,
    run_replications,
)

ALL_VARIANTS = (Variant.LOWER_BOUND, Variant.ORIGINAL, Variant.UPPER_BOUND,
                Variant.FULLY_SERVED)


def cfg(**kw):
    base = dict(n_servers=4, d=2, arrival_rate=0.5, model=Exponential(2.0),
                dep=Identical(), horizon=Horizon.arrivals(5000), warmup=0, seed=1)
    base.update(kw)
    return SystemConfig(**base)


# -- pure helpers -------------------------------------------------------------

def test_replica_rate_paper_examples():
    # sampled queue lengths (4, 5)
    q = [4, 5]
    assert replica_rate(Variant.ORIGINAL, (0, 1), 0, q) == pytest.approx(1 / 4)
    assert replica_rate(Variant.ORIGINAL, (0, 1), 1, q) == pytest.approx(1 / 5)
    for srv in (0, 1):
        assert replica_rate(Variant.LOWER_BOUND, (0, 1), srv, q) == pytest.approx(1 / 4)
        assert replica_rate(Variant.UPPER_BOUND, (0, 1), srv, q) == pytest.approx(1 / 5)
    with pytest.raises(InternalConsistencyError):
        replica_rate(Variant.ORIGINAL, (0, 1), 0, [0, 5])
    with pytest.raises(InternalConsistencyError):
        replica_rate(Variant.LOWER_BOUND, (0, 1), 0, [0, 0])


def test_effective_sizes():
    raw = ReplicaSizes((3.0, 1.2))
    assert effective_sizes(Variant.LOWER_BOUND, raw).sizes == (1.2, 1.2)
    assert effective_sizes(Variant.UPPER_BOUND, raw).sizes == (1.2, 1.2)
    assert effective_sizes(Variant.ORIGINAL, raw) is raw
    assert effective_sizes(Variant.FULLY_SERVED, raw) is raw
    same = ReplicaSizes((7.0, 7.0, 7.0))
    assert effective_sizes(Variant.UPPER_BOUND, same).sizes == (7.0, 7.0, 7.0)


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(d=5)
    with pytest.raises(ValueError):
        cfg(arrival_rate=0.0)
    with pytest.raises(ValueError):
        cfg(warmup=5000)
    with pytest.raises(ValueError):
        Horizon("events", 3)


# -- stream -------------------------------------------------------------------

def test_stream_uniform_subsets_and_determinism():
    c = cfg(horizon=Horizon.arrivals(20_000))
    s1 = generate_stream(c)
    s2 = generate_stream(c)
    assert np.array_equal(s1.servers, s2.servers)
    assert np.array_equal(s1.raw_sizes, s2.raw_sizes)
    # distinct servers per job
    assert all(len(set(row)) == c.d for row in s1.servers.tolist())
    # each unordered pair of 4 servers appears with probability ~ 1/6
    key = s1.servers.min(axis=1) * 10 + s1.servers.max(axis=1)
    _, counts = np.unique(key, return_counts=True)
    assert counts.size == 6
    assert np.all(np.abs(counts / key.size - 1 / 6) < 0.02)


def test_time_horizon_stream():
    c = cfg(horizon=Horizon.time(500.0), drain=False, warmup=0)
    rec = run(c)
    assert rec.t_end == pytest.approx(500.0)
    assert rec.n_admitted == rec.events.arrivals
    assert rec.events.completions + rec.in_system_end == rec.n_admitted


# -- oracles ------------------------------------------------------------------

def test_mm1_ps_oracle():
    c = SystemConfig(1, 1, 0.5, Exponential(1.0), IID(),
                     horizon=Horizon.arrivals(60_000), seed=5)
    rec = run(c)
    assert rec.mean_latency() == pytest.approx(2.0, abs=0.15)


def test_ci_coverage_mm1ps():
    # repeated 10-replication experiments: the 95% CI covers E[T]=2 most of the time
    hits = 0
    for master_seed in range(10):
        c = SystemConfig(1, 1, 0.5, Exponential(1.0), IID(),
                         horizon=Horizon.arrivals(15_000), seed=1000 + master_seed)
        recs = run_replications(c, 10)
        m, hw = mean_latency(recs)
        hits += int(m - hw <= 2.0 <= m + hw)
    assert hits >= 8


def test_mean_latency_frozen_example():
    recs = []
    for v in (2.0, 2.2, 2.1, 1.9, 2.3):
        r = run(cfg(horizon=Horizon.arrivals(10)))
        r.latencies = np.array([v])
        recs.append(r)
    m, hw = mean_latency(recs)
    assert m == pytest.approx(2.1)
    assert hw == pytest.approx(1.96 * np.std([2.0, 2.2, 2.1, 1.9, 2.3], ddof=1) / math.sqrt(5))
    assert hw == pytest.approx(0.139, abs=1e-3)
    with pytest.raises(ValueError):
        mean_latency(recs[:1])


def test_fully_served_is_mg1ps_per_server():
    # per-replica sojourns match E[X]/(1 - d lambda E[X]/N) server by server
    c = cfg(variant=Variant.FULLY_SERVED, arrival_rate=0.6,
            horizon=Horizon.arrivals(40_000), warmup=2000)
    recs = run_replications(c, 5)
    analytic = 2.0 / (1.0 - 2 * 0.6 * 2.0 / 4)
    means = [r.replica_latencies.mean() for r in recs]
    m = np.mean(means)
    hw = 1.96 * np.std(means, ddof=1) / math.sqrt(len(means))
    assert abs(m - analytic) < 3 * hw + 0.05
    per_server = [np.mean([r.replica_latencies[r.replica_servers == s].mean()
                           for r in recs]) for s in range(4)]
    assert np.allclose(per_server, analytic, rtol=0.12)


# -- structural invariants ------------------------------------------------------

def test_determinism_bit_identical():
    c = cfg(horizon=Horizon.arrivals(8000), check_invariants=True)
    r1, r2 = run(c), run(c)
    assert np.array_equal(r1.latencies, r2.latencies)
    assert np.array_equal(r1.trajectory_times, r2.trajectory_times)
    assert np.array_equal(r1.trajectory_queues, r2.trajectory_queues)
    assert r1.t_end == r2.t_end and r1.job_area == r2.job_area


def test_little_law_identity():
    # with drain, the job-count integral equals the summed sojourns exactly
    for v in ALL_VARIANTS:
        r = run(cfg(variant=v, horizon=Horizon.arrivals(4000), check_invariants=True))
        assert r.in_system_end == 0
        assert r.job_area == pytest.approx(r.latencies.sum(), rel=1e-9)
        assert r.events.completions == r.n_admitted


def test_accounting_without_drain():
    r = run(cfg(arrival_rate=0.95, drain=False, horizon=Horizon.arrivals(4000)))
    assert r.in_system_end > 0
    assert r.events.completions + r.in_system_end == r.n_admitted


def test_work_conservation_checked_in_kernel():
    # check_invariants raises on any violation; surviving the run is the assertion
    for v in (Variant.ORIGINAL, Variant.FULLY_SERVED):
        run(cfg(variant=v, arrival_rate=0.8, horizon=Horizon.arrivals(6000),
                check_invariants=True))


def test_bound_completion_via_minimal_replica_checked():
    run(cfg(variant=Variant.LOWER_BOUND, dep=IID(), model=Weibull(0.5, 1.0),
            arrival_rate=0.8, horizon=Horizon.arrivals(6000), check_invariants=True))
    run(cfg(variant=Variant.UPPER_BOUND, dep=IID(), model=Exponential(2.0),
            arrival_rate=0.6, horizon=Horizon.arrivals(6000), check_invariants=True))


def test_trajectory_thinning():
    r = run(cfg(horizon=Horizon.arrivals(20_000), trajectory_max_rows=256))
    assert r.trajectory_times.size <= 256
    assert np.all(np.diff(r.trajectory_times) >= 0)
    assert r.trajectory_queues.shape == (r.trajectory_times.size, 4)


def test_zero_size_jobs_depart_instantly():
    c = cfg(model=ScaledBernoulli(10.0), dep=IID(), arrival_rate=1.5,
            horizon=Horizon.arrivals(20_000), check_invariants=True)
    r = run(c)
    # P(X_min = 0) = 1 - 1/K^2 = 0.99
    zero_frac = np.mean(r.latencies == 0.0)
    assert zero_frac == pytest.approx(0.99, abs=0.01)
    r_fs = run(replace(c, variant=Variant.FULLY_SERVED))
    assert np.mean(r_fs.latencies == 0.0) == pytest.approx(0.81, abs=0.02)


# -- coupling -------------------------------------------------------------------

def test_run_coupled_rejects_mismatch():
    a = cfg()
    b = cfg(arrival_rate=0.6, variant=Variant.UPPER_BOUND)
    with pytest.raises(ValueError):
        run_coupled([a, b])


def test_coupled_ordering_small():
    base = cfg(arrival_rate=0.8, horizon=Horizon.arrivals(6000),
               model=Weibull(0.5, 1.0), dep=IID())
    recs = run_coupled([replace(base, variant=v) for v in ALL_VARIANTS])
    lo, orig, up, fs = (recs[v] for v in ALL_VARIANTS)
    assert np.array_equal(lo.job_ids, orig.job_ids)
    assert np.all(lo.latencies <= orig.latencies + 1e-9)
    assert np.all(orig.latencies <= up.latencies + 1e-9)
    assert np.all(orig.latencies <= fs.latencies + 1e-9)


def test_degenerate_coincidence_d1():
    base = cfg(n_servers=3, d=1, arrival_rate=1.0, dep=IID(),
               horizon=Horizon.arrivals(5000))
    recs = run_coupled([replace(base, variant=v) for v in ALL_VARIANTS])
    ref = recs[Variant.ORIGINAL].latencies
    for v in ALL_VARIANTS:
        assert np.allclose(recs[v].latencies, ref, atol=1e-9, rtol=0)


def test_degenerate_coincidence_d_equals_n():
    base = cfg(n_servers=3, d=3, arrival_rate=0.45, dep=Identical(),
               model=Weibull(0.5, 1.0), horizon=Horizon.arrivals(5000))
    recs = run_coupled([replace(base, variant=v) for v in ALL_VARIANTS])
    ref = recs[Variant.ORIGINAL].latencies
    for v in ALL_VARIANTS:
        assert np.allclose(recs[v].latencies, ref, atol=1e-9, rtol=0)
    # with i.i.d. sizes the three c.o.c. variants still coincide at d=N
    base = replace(base, dep=IID())
    recs = run_coupled([replace(base, variant=v) for v in
                        (Variant.LOWER_BOUND, Variant.ORIGINAL, Variant.UPPER_BOUND)])
    ref = recs[Variant.ORIGINAL].latencies
    for v in (Variant.LOWER_BOUND, Variant.UPPER_BOUND):
        assert np.allclose(recs[v].latencies, ref, atol=1e-9, rtol=0)


def test_residual_snapshot_ordering():
    base = cfg(arrival_rate=0.7, horizon=Horizon.arrivals(1200),
               record_snapshots=True, check_invariants=True)
    variants = (Variant.LOWER_BOUND, Variant.ORIGINAL, Variant.UPPER_BOUND)
    recs = run_coupled([replace(base, variant=v) for v in variants])
    r_lo, r_or, r_up = (recs[v].snapshots["residuals"] for v in variants)
    q_lo, q_or, q_up = (recs[v].snapshots["queues"] for v in variants)
    assert np.all(r_lo <= r_or + 1e-9)
    mins = [r.reshape(r.shape[0], -1, base.d).min(axis=2) for r in (r_lo, r_or, r_up)]
    assert np.all(mins[0] <= mins[1] + 1e-9)
    assert np.all(mins[1] <= mins[2] + 1e-9)
    assert np.all(q_lo <= q_or) and np.all(q_or <= q_up)
