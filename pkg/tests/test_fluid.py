import math

import numpy as np
import pytest

from redps.distributions import (
    Deterministic,
    Exponential,
    IID,
    Identical,
    Weibull,
    min_size_distribution,
)
from redps.fluid import (
    FluidConfig,
    classify_fluid,
    solve,
    solve_scalar,
    solve_vector,
    write_fluid_csv,
)
from redps.virtual_queues import build_class_index


def scalar_cfg(**kw):
    base = dict(n_servers=4, d=2, arrival_rate=0.8, min_dist=Exponential(2.0),
                q0=2.0, step=0.05, horizon=60.0, stop_on_drain=False)
    base.update(kw)
    return FluidConfig(**base)


# -- particle oracle ----------------------------------------------------------

def particle_drain_time(lam, c_shared, m_classes, dist, q0, dt=0.02, horizon=80.0,
                        n0=400, cycle=64):
    """Lagrangian discretization of one fluid class: mass parcels with residual
    sizes, each served at 1/(c_shared * total mass). Independent of the
    Volterra solver; used as a brute-force oracle."""
    a = lam / m_classes
    levels = (np.arange(cycle) + 0.5) / cycle
    sizes = list(np.asarray(dist.ppf((np.arange(n0) + 0.5) / n0), dtype=float))
    weights = [q0 / n0] * n0
    res = np.array(sizes)
    w = np.array(weights)
    t = 0.0
    k = 0
    floor = 3 * a * dt  # sits just above the fresh-arrival sliver added every step
    while t < horizon:
        q = w.sum()
        if q <= floor:
            return t
        rate = 1.0 / (c_shared * q)
        res = res - rate * dt
        alive = res > 0
        res, w = res[alive], w[alive]
        new_size = float(dist.ppf(levels[k % cycle]))
        res = np.append(res, new_size)
        w = np.append(w, a * dt)
        k += 1
        t += dt
    return None


def test_d1_drain_matches_linear_estimate_and_particle_oracle():
    # N=1, d=1: plain M/G/1/PS fluid; drain ~ q0 E[X] / (1 - rho)
    lam, q0 = 0.3, 3.0
    dist = Exponential(2.0)
    rho = lam * 2.0
    estimate = q0 * 2.0 / (1 - rho)
    cfg = FluidConfig(1, 1, lam, dist, q0=q0, step=0.01, horizon=40.0)
    path = solve_scalar(cfg)
    assert path.drain_time is not None
    assert path.drain_time == pytest.approx(estimate, rel=0.10)
    oracle = particle_drain_time(lam, 1, 1, dist, q0)
    assert oracle is not None
    assert path.drain_time == pytest.approx(oracle, rel=0.05)


# -- stability behavior --------------------------------------------------------

def test_unstable_slope_matches_drain_rate_arithmetic():
    # N=4, d=2 => M=6, C(3,1)=3; E[X_min]=2: slope = 1.2/6 - 1/6 = 1/30
    cfg = scalar_cfg(arrival_rate=1.2, q0=5.0, horizon=400.0, stop_on_drain=True)
    verdict = classify_fluid(solve_scalar(cfg))
    assert verdict.status == "unstable"
    assert verdict.slope == pytest.approx(1 / 30, rel=0.01)


def test_stable_drains_in_finite_time():
    cfg = scalar_cfg(arrival_rate=0.9, q0=5.0, horizon=400.0, stop_on_drain=True)
    verdict = classify_fluid(solve_scalar(cfg))
    assert verdict.status == "stable"
    assert verdict.drain_time is not None and verdict.drain_time < 400.0


def test_empty_start_subcritical_stays_near_zero():
    # fluid from empty at rho_tilde < 1 stays far below the stationary level
    cfg = scalar_cfg(arrival_rate=0.9, q0=0.0, horizon=120.0, stop_on_drain=False)
    path = solve_scalar(cfg)
    stationary = 0.9 / (1 - 0.9)  # per-class M/G/1/PS mean, rho_q = rho_tilde
    tail = path.q[path.times > 20.0]
    assert tail.max() < 0.1 * stationary
    assert tail.max() < 0.2


def test_critical_point_is_inconclusive():
    cfg = scalar_cfg(arrival_rate=1.0, q0=1.0, horizon=250.0, stop_on_drain=True)
    verdict = classify_fluid(solve_scalar(cfg))
    assert verdict.status == "inconclusive"


# -- Property 1 / vector behavior ----------------------------------------------

@pytest.mark.parametrize("mode", ["min", "max"])
def test_vector_equals_scalar_under_equal_initials(mode):
    s = solve_scalar(scalar_cfg())
    v = solve_vector(scalar_cfg(mode=mode))
    assert v.q.shape == (s.q.size, 6)
    assert np.max(np.abs(v.q - s.q[:, None])) < 1e-8
    assert np.max(np.abs(v.phi - s.phi[:, None])) < 1e-8


def test_min_max_modes_coincide_under_equal_initials():
    v_min = solve_vector(scalar_cfg(mode="min"))
    v_max = solve_vector(scalar_cfg(mode="max"))
    assert np.array_equal(v_min.q, v_max.q)


def test_monotonicity_in_initial_condition():
    # componentwise-ordered initials keep per-job rates ordered (Lemma-1 shape)
    ix = build_class_index(4, 2)
    q0a = np.array([1.0, 0.8, 2.0, 1.2, 1.6, 0.9])
    q0b = q0a + 0.7
    pa = solve_vector(scalar_cfg(mode="min", q0=q0a, horizon=40.0))
    pb = solve_vector(scalar_cfg(mode="min", q0=q0b, horizon=40.0))
    assert np.all(pa.q <= pb.q + 1e-10)
    eps = pa.config.epsilon
    for k in range(pa.q.shape[0]):
        ssa = np.array([pa.q[k][ix.classes_by_server[s]].sum() for s in range(4)])
        ssb = np.array([pb.q[k][ix.classes_by_server[s]].sum() for s in range(4)])
        rate_a = 1.0 / ssa[ix.server_sets].min(axis=1)
        rate_b = 1.0 / ssb[ix.server_sets].min(axis=1)
        active = pa.q[k] > eps
        assert np.all(rate_a[active] >= rate_b[active] - 1e-12)


def test_phi_monotone_and_attained_service_nonnegative():
    path = solve_vector(scalar_cfg(mode="min", q0=np.array([1, 2, 3, 1, 2, 3.0]),
                                   horizon=50.0))
    assert np.all(np.diff(path.phi, axis=0) >= 0)
    assert np.all(path.q >= 0)


def test_grid_refinement_self_check():
    from redps.fluid import refinement_self_check

    # mid-drain, unstable-growth, and fully-drained endpoints all converge
    cases = [scalar_cfg(arrival_rate=0.9, q0=1.5, step=0.05, horizon=50.0),
             scalar_cfg(arrival_rate=1.2, min_dist=Deterministic(2.0), q0=1.5,
                        step=0.05, horizon=50.0),
             scalar_cfg(arrival_rate=0.8 * 4,
                        min_dist=min_size_distribution(IID(), Weibull(0.5, 1.0), 2),
                        q0=1.5, step=0.0125, horizon=20.0, stop_on_drain=True)]
    for cfg in cases:
        ok, detail = refinement_self_check(cfg)
        assert ok, (cfg.min_dist.name, detail)


def test_classify_validation_errors():
    path = solve_scalar(scalar_cfg(horizon=20.0))
    with pytest.raises(ValueError):
        classify_fluid(path, growth_window=100.0)


def test_config_validation():
    with pytest.raises(ValueError):
        scalar_cfg(step=0.0)
    with pytest.raises(ValueError):
        scalar_cfg(q0=-1.0)
    with pytest.raises(ValueError):
        FluidConfig(4, 2, 0.5, Exponential(2.0), mode="avg")
    with pytest.raises(ValueError):
        solve_vector(scalar_cfg(mode="min", q0=np.ones(5)))


def test_fluid_csv(tmp_path):
    path = solve_vector(scalar_cfg(mode="min", horizon=5.0))
    f = tmp_path / "fluid.csv"
    write_fluid_csv(path, f)
    header = f.read_text().splitlines()[0].split(",")
    assert header == ["t"] + [f"q_{i}" for i in range(1, 7)] + [f"Phi_{i}" for i in range(1, 7)]
