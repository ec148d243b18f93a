import math

import numpy as np
import pytest

from ergwalk.bdp import (EventPath, estimate_velocity_bdp, extract_skeleton,
                         h_consistency, ladder_stats, simulate_bdp,
                         simulate_until_positive, skeleton_tail_check,
                         small_h_rates, tail_constants)
from ergwalk.environments import EnvironmentEnsemble
from ergwalk.errors import ConfigError, ExplosionGuardError
from ergwalk.reporting import binomial_se

from conftest import bdp_spec


def manual_path(times, states, t_max):
    times = np.asarray(times, dtype=float)
    return EventPath(times=times, states=np.asarray(states, dtype=np.int64),
                     holds=np.diff(times), t_max=t_max, seed=0)


class TestSimulate:
    def test_replay(self, drift2_env):
        a = simulate_bdp(drift2_env, 50.0, seed=1)
        b = simulate_bdp(drift2_env, 50.0, seed=1)
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.times, b.times)

    def test_path_validity(self, drift2_env):
        path = simulate_bdp(drift2_env, 200.0, seed=2)
        steps = np.diff(path.states)
        assert set(np.unique(steps)) <= {-2, -1, 1, 2}
        assert (np.diff(path.times) > 0).all()
        assert path.times[-1] <= 200.0

    def test_holding_time_mean(self, drift2_env):
        # holding times are exponential with mean 1/5 at every site
        path = simulate_bdp(drift2_env, 4000.0, seed=3)
        holds = path.holds
        se = holds.std(ddof=1) / math.sqrt(len(holds))
        assert abs(holds.mean() - 0.2) < 3 * se

    def test_jump_distribution(self, drift2_env):
        path = simulate_bdp(drift2_env, 4000.0, seed=4)
        steps = np.diff(path.states)
        n = len(steps)
        for j, p in ((2, 0.4), (1, 0.2), (-1, 0.2), (-2, 0.2)):
            p_hat = float(np.mean(steps == j))
            assert abs(p_hat - p) < 3 * binomial_se(p, n)

    def test_general_path_matches_quenched_law(self):
        # iid environment: steps at a site follow that site's embedded law
        spec = bdp_spec([1.0, 1.0], [1.0, 2.0], mode="iid", weights=None,
                        seed=3)
        spec = spec  # homogeneous pool of one site: iid == homogeneous
        env = EnvironmentEnsemble(
            bdp_spec([1.0, 1.0], [1.0, 2.0], mode="iid", seed=3), 1)
        path = simulate_bdp(env, 500.0, seed=5)
        assert path.n_events > 0

    def test_explosion_guard(self, drift2_env):
        with pytest.raises(ExplosionGuardError):
            simulate_bdp(drift2_env, 1e9, seed=6, max_events=10000)

    def test_bad_horizon(self, drift2_env):
        with pytest.raises(ConfigError):
            simulate_bdp(drift2_env, 0.0, seed=0)


class TestSkeleton:
    def test_constant_path(self):
        path = manual_path([0.0], [0], t_max=1.0)
        sk = extract_skeleton(path, 0.25)
        assert sk.values.tolist() == [0, 0, 0, 0, 0]

    def test_right_continuity(self):
        path = manual_path([0.0, 0.3], [0, 1], t_max=1.0)
        sk = extract_skeleton(path, 0.5)
        assert sk.values.tolist()[:2] == [0, 1]

    def test_exact_vs_brute_force(self, drift2_env):
        path = simulate_bdp(drift2_env, 20.0, seed=7)
        sk = extract_skeleton(path, 0.3)
        brute = [path.state_at(k * 0.3) for k in range(len(sk.values))]
        assert sk.values.tolist() == brute

    def test_no_event_lower_bound(self, drift2_env):
        h = 0.1
        path = simulate_bdp(drift2_env, 20000.0, seed=8)
        sk = extract_skeleton(path, h)
        inc = sk.increments()
        stay = float(np.mean(inc == 0))
        floor = math.exp(-5.0 * h)  # P(no event in a mesh step)
        assert stay + 3 * binomial_se(stay, len(inc)) >= floor


class TestLadder:
    def test_single_jump(self):
        path = manual_path([0.0, 0.3], [0, 1], t_max=1.0)
        ls = ladder_stats(path)
        assert ls.t1 == 0.3 and ls.overshoot == 1
        assert ls.visit_counts == {0: 1} and ls.embedded_index == 1

    def test_excursion(self):
        path = manual_path([0.0, 0.2, 0.5, 0.9], [0, -1, 0, 2], t_max=1.0)
        ls = ladder_stats(path)
        assert math.isclose(ls.t1, 0.9)
        assert ls.overshoot == 2
        assert ls.visit_counts == {0: 2, -1: 1}
        assert ls.embedded_index == 3
        assert math.isclose(ls.occupation_times[0], 0.2 + 0.4)
        assert math.isclose(ls.occupation_times[-1], 0.3)

    def test_identities_on_simulated_paths(self, drift2_env):
        for seed in range(40):
            path = simulate_until_positive(drift2_env, 500.0, seed=seed)
            ls = ladder_stats(path)
            assert not ls.truncated
            assert sum(ls.visit_counts.values()) == ls.embedded_index
            assert all(k <= 0 for k in ls.visit_counts)
            occupation_total = math.fsum(ls.occupation_times.values())
            assert abs(ls.t1 - occupation_total) < 1e-12
            assert 1 <= ls.overshoot <= 2

    def test_truncation_flag(self):
        env = EnvironmentEnsemble(bdp_spec([1.0, 2.0], [0.5, 0.5]), 0)
        path = simulate_until_positive(env, 5.0, seed=1)
        ls = ladder_stats(path)
        if path.states[-1] <= 0:
            assert ls.truncated and math.isnan(ls.t1)


class TestVelocity:
    def test_drift_two(self):
        rep = estimate_velocity_bdp(bdp_spec([1.0, 1.0], [1.0, 2.0]),
                                    t_max=2000.0, replicas=100, seed=1)
        assert abs(rep.velocity - 2.0) < 3 * rep.se

    def test_balanced_is_zero(self):
        rep = estimate_velocity_bdp(bdp_spec([1.0, 1.0], [1.0, 1.0]),
                                    t_max=2000.0, replicas=100, seed=2)
        assert abs(rep.velocity) < 3 * rep.se

    def test_mixed_rates(self):
        rep = estimate_velocity_bdp(bdp_spec([0.5, 0.5], [0.5, 1.0]),
                                    t_max=2000.0, replicas=100, seed=3)
        # 2*1 + 0.5 - 0.5 - 2*0.5 = 1
        assert abs(rep.velocity - 1.0) < 3 * rep.se

    def test_stability_under_replica_doubling(self):
        spec = bdp_spec([1.0, 1.0], [1.0, 2.0])
        a = estimate_velocity_bdp(spec, t_max=500.0, replicas=100, seed=4)
        b = estimate_velocity_bdp(spec, t_max=500.0, replicas=200, seed=5)
        assert abs(a.velocity - b.velocity) < 3 * math.hypot(a.se, b.se)


class TestTailCheck:
    def test_constants(self):
        kappa, K, c0, c1 = tail_constants(2, 2, 0.9, 2.1, -20.0)
        assert kappa == pytest.approx(3.6) and K == pytest.approx(8.4)
        assert c0 == 20.0
        assert c1 == pytest.approx((math.log(23.6) - math.log(8.4)) / 2)

    def test_mild_lam_bar_rejected(self):
        with pytest.raises(ConfigError):
            tail_constants(2, 2, 0.9, 2.1, -1.0)

    def test_report(self):
        spec = bdp_spec([1.0, 1.0], [1.0, 2.0],
                        bounds={"epsilon": 0.9, "M": 2.1})
        rep = skeleton_tail_check(spec, h=0.1, n_steps=200000, seed=11)
        assert rep.m[0] == 3  # bound asserted only above max(L, R)
        assert rep.passed
        assert rep.slope < 0
        for m, b in zip(rep.m, rep.bound):
            assert b == pytest.approx(math.exp(rep.c0 * 0.1 - rep.c1 * m),
                                      rel=1e-12)

    def test_needs_bounds(self):
        with pytest.raises(ConfigError):
            skeleton_tail_check(bdp_spec([1.0, 1.0], [1.0, 2.0]), 0.1, 1000, 0)


class TestHConsistency:
    def test_flat_across_meshes(self):
        rep = h_consistency(bdp_spec([1.0, 1.0], [1.0, 2.0]),
                            [0.1, 0.05, 0.01], t_max=200.0, replicas=150,
                            seed=2)
        assert rep.consistent
        for row in rep.rows:
            assert abs(row["v_h_over_h"] - 2.0) < 4 * row["se_over_h"]

    def test_replica_halves_agree(self):
        spec = bdp_spec([1.0, 1.0], [1.0, 2.0])
        a = h_consistency(spec, [0.1], t_max=200.0, replicas=100, seed=31)
        b = h_consistency(spec, [0.1], t_max=200.0, replicas=100, seed=32)
        gap = abs(a.rows[0]["v_h_over_h"] - b.rows[0]["v_h_over_h"])
        comb = math.hypot(a.rows[0]["se_over_h"], b.rows[0]["se_over_h"])
        assert gap < 3 * comb

    def test_rejects_bad_mesh(self):
        with pytest.raises(ConfigError):
            h_consistency(bdp_spec([1.0], [1.0]), [0.0], 10.0, 10, 0)


class TestSmallH:
    def test_rates_recovered(self):
        spec = bdp_spec([1.0, 1.0], [1.0, 2.0])
        rep = small_h_rates(spec, [0.001], replicas=200000, seed=0)
        want = {-2: 1.0, -1: 1.0, 1: 1.0, 2: 2.0}
        for row in rep.rows:
            j = row["offset"]
            if j in want:
                assert abs(row["rate_hat"] - want[j]) < 3 * row["se"]

    def test_unreachable_offset_vanishes(self):
        spec = bdp_spec([1.0, 1.0], [1.0, 2.0])
        rep = small_h_rates(spec, [0.001], replicas=200000, seed=6)
        for row in rep.rows:
            if abs(row["offset"]) > 2:
                # needs two or more events: O(h^2) probability
                assert row["rate_hat"] < max(3 * row["se"], 0.02)
