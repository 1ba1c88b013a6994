import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from obstacle_bbm.bbm import (
    ConfigError,
    SimConfig,
    dominates,
    range_hits_good_point,
    run_coupled,
    run_deactivated,
    run_replicate,
    survival_horizon,
)
from obstacle_bbm.env import Environment, EnvironmentSpec, KillingFunction, empty_environment
from obstacle_bbm.estimators import run_replicates
from obstacle_bbm.theory import ModelConstants

from conftest import single_atom_env
from reference_engine import reference_run

MC = ModelConstants(2, 1.0, 1.0)


def cfg(**kw):
    base = dict(mode="soft", beta=2.0, t_end=0.5, dt=0.01, seeds=(11, 22, 33))
    base.update(kw)
    return SimConfig(**base)


def particle_map(summary):
    return {p.id: p.position for p in summary.particles}


class TestConfig:
    def test_rate_bound(self):
        with pytest.raises(ConfigError):
            SimConfig(beta=20.0, dt=0.01)

    def test_mild_requires_lower_inside_rate(self):
        with pytest.raises(ConfigError):
            SimConfig(mode="mild", beta=1.0, beta_inside=2.0)
        with pytest.raises(ConfigError):
            SimConfig(mode="mild", beta=1.0, beta_inside=1.0)
        SimConfig(mode="mild", beta=1.0, beta_inside=0.5)

    @pytest.mark.parametrize("kw", [dict(mode="weird"), dict(dt=0.0), dict(t_end=-1.0), dict(max_particles=0),
                                    dict(seeds=(1, 2)), dict(beta=-1.0)])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            SimConfig(**kw)

    def test_stiff_kill_rates(self, env7):
        stiff = Environment(EnvironmentSpec(2, 1.0, KillingFunction(1e6, 0.5), master_seed=7))
        with pytest.raises(ConfigError):
            run_replicate(stiff, SimConfig(mode="soft", t_end=0.01))
        run_replicate(stiff, SimConfig(mode="soft", t_end=0.01, strict_rates=False))

    def test_free_needs_dimension_without_env(self):
        with pytest.raises(ConfigError):
            run_replicate(None, SimConfig(mode="free"))
        with pytest.raises(ConfigError):
            run_replicate(None, SimConfig(mode="soft"), d=2)


class TestReferenceEngine:
    @pytest.mark.parametrize("mode", ["free", "mild", "soft", "hard"])
    @pytest.mark.parametrize("order", [0, 1])
    def test_matches_breadth_first_in_shuffled_order(self, env7, mode, order):
        c = cfg(mode=mode, beta_inside=0.7 if mode == "mild" else 0.0, t_end=0.6)
        start = np.array([0.2, -0.4])
        counts, final, kills = reference_run(env7, c, start, shuffle_seed=5)
        s = run_replicate(env7, c, start, collect_particles=True, order=order)
        assert s.N_t == counts[-1]
        assert s.kills == kills
        got = particle_map(s)
        assert set(got) == set(final)
        for i, p in final.items():
            assert np.array_equal(got[i], p)

    @given(st.integers(0, 2**64 - 1), st.integers(0, 2**32))
    def test_random_seeds(self, seed, shuffle):
        env = Environment(EnvironmentSpec(2, 1.5, KillingFunction(2.0, 0.4), master_seed=seed))
        c = cfg(seeds=(seed, seed ^ 1, seed ^ 2), t_end=0.4)
        counts, final, _ = reference_run(env, c, np.zeros(2), shuffle_seed=shuffle)
        s = run_replicate(env, c, collect_particles=True)
        assert s.N_t == counts[-1] and set(particle_map(s)) == set(final)

    def test_three_dimensions(self):
        env = Environment(EnvironmentSpec(3, 1.0, KillingFunction(1.0, 0.5), master_seed=3))
        c = cfg(t_end=0.4)
        counts, final, _ = reference_run(env, c, np.zeros(3), shuffle_seed=1)
        s = run_replicate(env, c, collect_particles=True)
        assert s.N_t == counts[-1]
        assert all(np.array_equal(particle_map(s)[i], p) for i, p in final.items())


class TestSemantics:
    def test_no_branching_single_path(self, env7):
        c = cfg(mode="free", beta=0.0, t_end=1.0)
        s = run_replicate(None, c, d=2, collect_particles=True)
        assert s.N_t == 1 and s.survived
        # M_t is the running max of |X_s| along the single path
        radii = []
        for n in range(1, c.n_steps + 1):
            _, final, _ = reference_run(None, replace(c, t_end=n * c.dt), np.zeros(2))
            radii.append(np.linalg.norm(final[0]))
        assert s.M_t == pytest.approx(max(radii), rel=1e-12)
        assert s.particles[0].lineage_max_dist == pytest.approx(s.M_t, rel=1e-12)

    def test_soft_without_atoms_equals_free(self, blank2):
        for seed in range(5):
            c = cfg(seeds=(seed, seed + 1, seed + 2), t_end=1.0)
            soft = run_replicate(blank2, c, collect_particles=True)
            free = run_replicate(blank2, replace(c, mode="free"), collect_particles=True)
            assert soft.N_t == free.N_t and soft.M_t == free.M_t
            assert all(np.array_equal(particle_map(soft)[i], p) for i, p in particle_map(free).items())

    def test_lineage_max_bounds(self, env7):
        s = run_replicate(env7, cfg(mode="free", t_end=1.5), collect_particles=True)
        assert s.N_t > 1
        for p in s.particles:
            assert np.linalg.norm(p.position) <= p.lineage_max_dist + 1e-12
            assert p.lineage_max_dist <= s.M_t
        assert max(p.lineage_max_dist for p in s.particles) <= s.M_t

    def test_summary_invariants(self, env7):
        for i in range(30):
            s = run_replicate(env7, cfg().for_replicate(i))
            assert s.survived == (s.N_t >= 1)
            assert (s.extinction_time is None) == s.survived

    def test_censoring(self):
        c = SimConfig(mode="free", beta=1.0, t_end=6.0, dt=1e-2, max_particles=50)
        s = run_replicate(None, c, d=2)
        assert s.censored

    def test_start_inside_trap_hard_dies(self):
        env = single_atom_env([0.0, 0.0], a=0.5)
        s = run_replicate(env, cfg(mode="hard", t_end=0.1))
        assert s.N_t == 0 and s.kills == 1 and s.extinction_time == pytest.approx(0.01)

    def test_survival_horizon_agrees(self, env7):
        c = cfg(beta=1.0, t_end=2.0)
        for i in range(40):
            ci = c.for_replicate(i)
            last, cens = survival_horizon(env7, ci)
            s = run_replicate(env7, ci)
            assert not cens
            assert (last >= ci.n_steps) == s.survived
            if not s.survived:
                assert (last + 1) * ci.dt == pytest.approx(s.extinction_time)

    def test_kill_probability_per_step(self):
        # particle starting on a single atom stays inside the trap over one step
        alpha, dt = 50.0, 1e-3
        env = single_atom_env([0.0, 0.0], alpha=alpha, a=0.5)
        c = SimConfig(mode="soft", beta=0.0, t_end=dt, dt=dt)
        n = 100_000
        res = run_replicates(env, c, n)
        died = np.array([r[0] == 0 for r in res], dtype=float)
        p = -math.expm1(-alpha * dt)
        se = math.sqrt(p * (1 - p) / n)
        assert abs(died.mean() - p) <= 3 * se

    def test_free_mean_matches_discrete_growth(self):
        c = SimConfig(mode="free", beta=1.0, t_end=2.0, dt=1e-2)
        N = np.array([r[0] for r in run_replicates(empty_environment(2), c, 4000)], dtype=float)
        target = (2 - math.exp(-c.beta * c.dt)) ** c.n_steps
        assert abs(N.mean() - target) <= 3 * N.std(ddof=1) / math.sqrt(N.size)

    @pytest.mark.slow
    def test_free_speed_bound(self):
        # M_t / t <= sqrt(3 beta) in at least 99% of replicates at t = 10
        c = SimConfig(mode="free", beta=1.0, t_end=10.0, dt=1e-2)
        res = run_replicates(empty_environment(2), c, 100)
        ok = np.array([r[2] / 10.0 <= math.sqrt(3.0) for r in res])
        assert ok.mean() >= 0.99


class TestCoupling:
    def test_dominates_table(self):
        f, m0, m5, s, h = (cfg(mode="free"), cfg(mode="mild"), cfg(mode="mild", beta_inside=0.5),
                           cfg(mode="soft"), cfg(mode="hard"))
        assert dominates(f, s) and dominates(f, h) and dominates(m0, s) and dominates(m5, m0)
        assert not dominates(s, f) and not dominates(m0, m5) and not dominates(s, h)

    @pytest.mark.parametrize("harsh", ["soft", "hard", "mild"])
    def test_subset_by_id(self, env7, harsh):
        for i in range(20):
            c = cfg(beta=2.0, t_end=1.0).for_replicate(i)
            sf, sh = run_coupled(env7, (replace(c, mode="free"), replace(c, mode=harsh)))
            assert sh.N_t <= sf.N_t
            fm = particle_map(sf)
            assert all(np.array_equal(fm[k], v) for k, v in particle_map(sh).items())

    def test_mild_rates_ordered(self, env7):
        for i in range(20):
            c = cfg(mode="mild", beta=2.0, t_end=1.0).for_replicate(i)
            lo, hi = run_coupled(env7, (c, replace(c, beta_inside=1.5)))
            assert lo.N_t <= hi.N_t
            assert set(particle_map(lo)) <= set(particle_map(hi))

    def test_empty_environment_identical(self, blank2):
        c = cfg(t_end=1.0)
        a, b = run_coupled(blank2, (c, replace(c, mode="free")))
        assert a.N_t == b.N_t and a.M_t == b.M_t and a.kills == b.kills == 0

    def test_mismatched_configs(self, env7):
        with pytest.raises(ConfigError):
            run_coupled(env7, (cfg(), cfg(mode="free", t_end=0.7)))

    def test_hard_and_stiff_soft_agree(self):
        env = Environment(EnvironmentSpec(2, 1.0, KillingFunction(1e6, 0.5), master_seed=7))
        c = SimConfig(mode="soft", beta=1.0, t_end=1.0, dt=1e-3, strict_rates=False)
        same = 0
        for i in range(200):
            ci = c.for_replicate(i)
            a, b = run_coupled(env, (ci, replace(ci, mode="hard")))
            same += a.N_t == b.N_t
        assert same / 200 > 0.9


class TestDeactivated:
    def test_huge_radius_is_free(self):
        c = SimConfig(mode="free", beta=1.0, t_end=3.0, dt=1e-2, seeds=(4, 5, 6))
        for i in range(10):
            ci = c.for_replicate(i)
            res = run_deactivated(ci, lambda t: 1e9, 0.5, 1.0, d=2)
            assert res.n_t == run_replicate(None, ci, d=2).N_t

    def test_zero_radius(self):
        res = run_deactivated(SimConfig(mode="free", t_end=1.0, dt=1e-2), lambda t: 0.0, 0.5, 1.0, d=2)
        assert res.n_t == 0

    def test_threshold(self):
        t = 4.0
        res = run_deactivated(SimConfig(mode="free", t_end=t, dt=1e-2), lambda u: u ** 0.4, math.sqrt(0.5), 0.03, d=2)
        assert res.threshold == math.ceil(math.exp(-math.sqrt(0.5) * t ** 0.4) * 0.03 * math.exp(t))

    @pytest.mark.parametrize("kappa", [0.0, -1.0, 0.8])
    def test_kappa_range(self, kappa):
        with pytest.raises(ConfigError):
            run_deactivated(SimConfig(mode="free", t_end=1.0, dt=1e-2), lambda t: 1.0, kappa, 1.0, d=2)


class TestGoodPointHits:
    def test_empty_environment_hits_at_zero(self, blank2):
        s = range_hits_good_point(blank2, cfg(t_end=3.0), MC)
        assert s.hit_good_point_time == 0.0

    def test_good_start(self, env7):
        start = np.array([30.0, 30.0])
        env = env7.without_atoms_in_ball(start, 2.0)
        s = range_hits_good_point(env, cfg(t_end=3.0), MC, start=start, k=20.0)
        assert s.hit_good_point_time == 0.0

    def test_outside_box_never_hits(self, env7):
        start = np.array([30.0, 30.0])
        env = env7.without_atoms_in_ball(start, 2.0)
        s = range_hits_good_point(env, cfg(t_end=3.0), MC, start=start, k=1.0)
        assert s.hit_good_point_time is None

    def test_requires_soft_and_long_horizon(self, env7):
        with pytest.raises(ConfigError):
            range_hits_good_point(env7, cfg(mode="free", t_end=3.0), MC)
        with pytest.raises(ConfigError):
            range_hits_good_point(env7, cfg(t_end=2.0), MC)
