import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ergwalk.bdp import ladder_stats, simulate_until_positive
from ergwalk.environments import EnvSpec, EnvironmentEnsemble
from ergwalk.errors import ConfigError, SeriesDivergenceError, TruncationError
from ergwalk.rwre import hitting_time_T
from ergwalk.velocity2 import (BundleCache, V1, V2, coefficient_bundle,
                               d_omega, drift_rate, exit_probs_finite,
                               exit_probs_recursion, exit_profiles,
                               expected_occupation, f_pair_at_depth, f_values,
                               pi_omega, transfer_matrix,
                               velocity_decomposition, velocity_theorem51)

from conftest import bdp_spec, random_right_env, rwre_spec


def table_env(site_dicts, origin):
    return EnvironmentEnsemble(EnvSpec.from_dict({
        "model": "bdp", "mode": "table", "sites": site_dicts,
        "origin": origin}), 0)


def rates_env(mu, lam):
    return EnvironmentEnsemble(bdp_spec(mu, lam), 0)


def random_env(rng, lo=0.5, hi=3.0):
    seed = int(rng.integers(2**31))
    spec = EnvSpec.from_dict({
        "model": "bdp", "mode": "iid", "L": 2, "R": 2, "sites": [],
        "rate_range": [lo, hi], "seed": seed})
    return EnvironmentEnsemble(spec, seed)


class TestExitProbs:
    def test_symmetric_nearest_neighbor(self):
        # second-order rates zero: embedded chain is simple symmetric
        env = rates_env([1.0, 0.0], [1.0, 0.0])
        e = exit_probs_finite(env, 0, 10, 5)
        assert e.probs[10] == pytest.approx(0.5, abs=1e-12)
        assert e.probs[11] == 0.0
        assert e.probs[0] == pytest.approx(0.5, abs=1e-12)
        assert e.probs[-1] == 0.0

    def test_gamblers_ruin_oracle(self):
        # p = 2/3 right, q = 1/3 left; classical ruin formula as the oracle
        env = rates_env([1.0, 0.0], [2.0, 0.0])
        N = 12
        r = 0.5  # q/p
        for k in range(1, N):
            want = (1 - r**k) / (1 - r**N)
            e = exit_probs_finite(env, 0, N, k)
            assert e.probs[N] == pytest.approx(want, abs=1e-12)
            assert e.probs[N + 1] == 0.0

    def test_one_jump_lower_bound(self, drift2_env):
        e = exit_probs_finite(drift2_env, 0, 10, 9)
        p2 = 2.0 / 5.0
        assert e.probs[11] >= p2

    def test_quartet_sums_to_one(self, drift2_env):
        for start in range(1, 10):
            e = exit_probs_finite(drift2_env, 0, 10, start)
            assert abs(e.total() - 1.0) < 1e-10

    @given(st.integers(0, 10**6))
    @settings(max_examples=20, deadline=None)
    def test_recursion_equals_solve(self, seed):
        rng = np.random.default_rng(seed)
        env = random_env(rng)
        a = int(rng.integers(-15, 0))
        b = a + int(rng.integers(3, 31))
        start = int(rng.integers(a + 1, b))
        e1 = exit_probs_finite(env, a, b, start)
        e2 = exit_probs_recursion(env, a, b, start)
        for key in e1.probs:
            assert abs(e1.probs[key] - e2.probs[key]) < 1e-10
        assert abs(e2.total() - 1.0) < 1e-10

    def test_start_outside_interior_rejected(self, drift2_env):
        with pytest.raises(ConfigError):
            exit_probs_finite(drift2_env, 0, 10, 0)


class TestTransferMatrix:
    def test_entries(self, drift2_env):
        M = transfer_matrix(drift2_env.site(0))
        assert np.allclose(M[0], [-2.0, 3.0, 2.0])
        assert np.allclose(M[1], [1.0, 0.0, 0.0])
        assert np.allclose(M[2], [0.0, 1.0, 0.0])

    def test_recursion_holds_on_solved_profiles(self):
        rng = np.random.default_rng(3)
        env = random_env(rng)
        a, b = -4, 9
        positions, profiles = exit_profiles(env, a, b)
        pos_of = {p: idx for idx, p in enumerate(positions)}
        for target, g in profiles.items():
            for k in range(a + 1, b):
                V_k = np.array([g[pos_of[k - 1]] - g[pos_of[k - 2]],
                                g[pos_of[k]] - g[pos_of[k - 1]],
                                g[pos_of[k + 1]] - g[pos_of[k]]]) \
                    if k - 2 >= a - 1 else None
                V_k1 = np.array([g[pos_of[k]] - g[pos_of[k - 1]],
                                 g[pos_of[k + 1]] - g[pos_of[k]],
                                 g[pos_of[k + 2]] - g[pos_of[k + 1]]]) \
                    if k + 2 <= b + 1 else None
                if V_k is None or V_k1 is None:
                    continue
                M = transfer_matrix(env.site(k))
                assert np.max(np.abs(M @ V_k1 - V_k)) < 1e-8


class TestFValues:
    def test_transient_right_mass_one(self, drift2_env):
        fv = f_values(drift2_env, 0, tol=1e-12)
        assert abs(fv.f1 + fv.f2 - 1.0) < 1e-10
        assert 0 <= fv.f1 <= 1 and 0 <= fv.f2 <= 1

    def test_monte_carlo_overshoot_oracle(self, drift2_env):
        # the embedded chain of the jump process is a walk whose first
        # ascent overshoot distributes exactly as the exit split
        fv = f_values(drift2_env, 0, tol=1e-12)
        walk = EnvironmentEnsemble(
            rwre_spec({-2: 0.2, -1: 0.2, 1: 0.2, 2: 0.4}), 0)
        n = 20000
        hits = np.array([hitting_time_T(walk, seed=s).overshoot
                         for s in range(n)])
        p1 = float(np.mean(hits == 1))
        se = math.sqrt(p1 * (1 - p1) / n)
        assert abs(fv.f1 - p1) < 3 * se

    def test_deterministic_right_chain(self):
        env = rates_env([1e-12, 1e-12], [1.0, 2.0])
        f1, f2 = f_pair_at_depth(env, 0, 0, depth=1)
        assert f1 + f2 == pytest.approx(1.0, abs=1e-9)
        assert f1 == pytest.approx(1.0 / 3.0, abs=1e-9)

    def test_truncation_monotone(self, drift2_env):
        prev = -1.0
        for depth in (2, 4, 8, 16, 32, 64):
            f1, f2 = f_pair_at_depth(drift2_env, 0, 0, depth)
            assert f1 + f2 >= prev - 1e-15
            prev = f1 + f2

    def test_matches_finite_solve_at_each_depth(self, drift2_env):
        for depth in (4, 16, 64):
            f1, f2 = f_pair_at_depth(drift2_env, 0, -1, depth)
            e = exit_probs_finite(drift2_env, -depth, 1, -1)
            assert abs(f1 - e.probs[1]) < 1e-10
            assert abs(f2 - e.probs[2]) < 1e-10

    def test_left_transient_mass_deficit(self):
        # drift -1: the chain may never exit upward, so the split mass
        # converges to a strict sub-unit total
        env = rates_env([2.0, 1.0], [1.0, 1.0])
        fv = f_values(env, 0, tol=1e-10)
        assert fv.f1 + fv.f2 < 0.999

    def test_zero_drift_boundary_raises(self, balanced_env):
        # critical case: truncation converges only algebraically
        with pytest.raises(TruncationError):
            f_values(balanced_env, 0, tol=1e-10, max_depth=8192)

    def test_deep_start(self, drift2_env):
        fv = f_values(drift2_env, 0, k=-3, tol=1e-12)
        e = exit_probs_finite(drift2_env, -fv.depth, 1, -3)
        assert fv.f1 == pytest.approx(e.probs[1], abs=1e-9)


class TestCoefficients:
    def test_identities_drift2(self, drift2_env):
        cache = BundleCache(drift2_env)
        for i in (-3, 0, 1, 4):
            b = cache.bundle(i)
            p1, p2, q1, q2 = cache.emb(i)
            _, _, _, q2_next = cache.emb(i + 1)
            assert abs(b.alpha.sum() - q1) < 1e-12
            assert abs(b.beta.sum() - q2) < 1e-12
            assert abs(b.gamma.sum() - q2_next) < 1e-12

    def test_identities_random_sites(self):
        rng = np.random.default_rng(8)
        env = random_right_env(rng, 3000, origin=-1500)
        cache = BundleCache(env, tol=1e-10, max_depth=1024)
        for i in range(-20, 21):
            b = cache.bundle(i)
            p1, p2, q1, q2 = cache.emb(i)
            _, _, _, q2n = cache.emb(i + 1)
            assert abs(b.alpha.sum() - q1) < 1e-12
            assert abs(b.beta.sum() - q2) < 1e-12
            assert abs(b.gamma.sum() - q2n) < 1e-12

    def test_zero_exit_split_collapses_beta(self):
        # pure-death sites far below make the upward split vanish, so the
        # second-type coefficients collapse and z = w = 0
        sites = [{"mu": [1.0, 1.0], "lam": [1e-14, 1e-14]}] * 40 \
            + [{"mu": [1.0, 1.0], "lam": [1.0, 2.0]}] * 8
        env = table_env(sites, origin=-44)
        cache = BundleCache(env, max_depth=32)
        b = cache.bundle(0)
        p1m, p2m, _, _ = cache.emb(-1)
        _, _, q1, _ = cache.emb(0)
        assert b.alpha[0] == pytest.approx(q1 * p1m, abs=1e-10)
        assert np.allclose(b.beta, 0.0, atol=1e-10)
        assert b.z == pytest.approx(0.0, abs=1e-10)
        assert b.w == pytest.approx(0.0, abs=1e-10)

    def test_Q_structure(self, drift2_env):
        Q = coefficient_bundle(drift2_env, 0).Q
        assert Q.shape == (9, 9)
        assert (Q >= 0).all() and np.isfinite(Q).all()
        for r in (2, 6, 8):
            assert np.array_equal(Q[r], Q[0])
        assert np.array_equal(Q[5], Q[3])
        assert np.array_equal(Q[7], Q[1])
        # zero positions of the plain rows
        assert Q[0, 2] == Q[0, 5] == 0.0
        assert np.array_equal(Q[0, 6:], np.zeros(3))
        # the scaled row carries the leftover mass in its last column
        b = coefficient_bundle(drift2_env, 0)
        assert Q[4, 8] == pytest.approx(1.0 - b.v)
        assert np.allclose(Q[4, :8],
                           b.v * np.array([b.x, b.y, b.s, b.z, b.w,
                                           1 - b.s, b.t, 1 - b.t]))

    def test_bundle_scalars_in_range(self):
        rng = np.random.default_rng(21)
        env = random_right_env(rng, 3000, origin=-1500)
        cache = BundleCache(env, tol=1e-10, max_depth=1024)
        for i in range(-10, 11):
            b = cache.bundle(i)
            for name in "xyzw":
                assert getattr(b, name) >= 0
            for name in "vst":
                assert -1e-12 <= getattr(b, name) <= 1 + 1e-12

    def test_u_vectors(self, drift2_env):
        cache = BundleCache(drift2_env)
        u1 = cache.u1()
        assert u1[:3].sum() == pytest.approx(1.0, abs=1e-12)
        assert np.array_equal(u1[3:], np.zeros(6))
        us = cache.ustar(1)
        assert us[0] + us[1] == pytest.approx(1.0, abs=1e-12)
        assert us[2] == 1.0 and np.array_equal(us[3:], np.zeros(6))


class TestSeries:
    def test_homogeneous_geometric_oracle(self, drift2_env):
        cache = BundleCache(drift2_env)
        Q = cache.bundle(0).Q
        assert max(abs(np.linalg.eigvals(Q))) < 1.0  # series must converge
        ustar = cache.ustar(1)
        zeta = drift2_env.site(0).total_rate
        closed = ustar @ np.linalg.solve(np.eye(9) - Q, V1 + Q @ V2) / zeta
        D, _ = d_omega(drift2_env, tol=1e-12)
        assert D == pytest.approx(closed, rel=1e-9)

    def test_first_term(self, drift2_env):
        cache = BundleCache(drift2_env)
        Q = cache.bundle(0).Q
        ustar = cache.ustar(1)
        zeta = drift2_env.site(0).total_rate
        first = float(ustar @ (V1 + Q @ V2)) / zeta
        D, diag = d_omega(drift2_env, tol=1e-12)
        assert first < D
        pi0 = float(cache.ustar(1) @ (V1 + Q @ V2)) / zeta
        assert pi0 == pytest.approx(first)  # same k=0 term shape

    def test_pi_equals_D_homogeneous(self, drift2_env):
        dec = velocity_decomposition(drift2_env, tol=1e-11)
        assert dec.pi == pytest.approx(dec.D, rel=1e-8)
        assert dec.velocity == pytest.approx(2.0, abs=1e-6)

    def test_D_against_ladder_monte_carlo(self, drift2_env):
        D, _ = d_omega(drift2_env, tol=1e-11)
        n = 30000
        by_overshoot = {1: [], 2: []}
        for s in range(n):
            ls = ladder_stats(simulate_until_positive(drift2_env, 200.0, s))
            assert not ls.truncated
            by_overshoot[ls.overshoot].append(ls.t1)
        total, var = 0.0, 0.0
        for r in (1, 2):
            v = np.asarray(by_overshoot[r])
            total += v.mean()
            var += v.var(ddof=1) / len(v)
        assert abs(D - total) < 3 * math.sqrt(var)

    def test_divergence_zero_drift(self, balanced_env):
        with pytest.raises((SeriesDivergenceError, TruncationError)):
            d_omega(balanced_env, tol=1e-10, k_max=400)


class TestExpectedOccupation:
    def test_nonnegative(self, drift2_env):
        for k in (0, -1, -2, -5):
            assert expected_occupation(drift2_env, k) >= 0.0

    def test_site_zero_monte_carlo(self, drift2_env):
        want = expected_occupation(drift2_env, 0, tol=1e-11)
        n = 30000
        by_overshoot = {1: [], 2: []}
        for s in range(n):
            ls = ladder_stats(simulate_until_positive(drift2_env, 200.0, s))
            by_overshoot[ls.overshoot].append(ls.visit_counts.get(0, 0))
        total, var = 0.0, 0.0
        for r in (1, 2):
            v = np.asarray(by_overshoot[r], dtype=float)
            total += v.mean()
            var += v.var(ddof=1) / len(v)
        assert abs(want - total) < 3 * math.sqrt(var)

    def test_deterministic_right_value(self):
        # single possible overshoot: the other conditional term is skipped
        env = rates_env([1e-13, 1e-13], [1.0, 1e-13])
        assert expected_occupation(env, 0) == pytest.approx(1.0, abs=1e-9)

    def test_positive_k_rejected(self, drift2_env):
        with pytest.raises(ConfigError):
            expected_occupation(drift2_env, 1)


class TestTheorem51:
    def test_homogeneous_velocity(self):
        rep = velocity_theorem51(bdp_spec([1.0, 1.0], [1.0, 2.0]), tol=1e-10)
        assert rep.verdict == "ok"
        assert rep.velocity == pytest.approx(2.0, abs=1e-6)
        assert rep.se == 0.0

    def test_balanced_divergence_verdict(self):
        rep = velocity_theorem51(bdp_spec([1.0, 1.0], [1.0, 1.0]),
                                 tol=1e-10, k_max=500)
        assert rep.verdict == "zero-or-undefined"
        assert rep.velocity == 0.0

    def test_periodic_mode(self):
        spec = EnvSpec.from_dict({
            "model": "bdp", "mode": "periodic",
            "sites": [{"mu": [1.0, 1.0], "lam": [1.0, 2.0]},
                      {"mu": [0.8, 0.9], "lam": [1.1, 1.9]}]})
        rep = velocity_theorem51(spec, tol=1e-9)
        assert rep.verdict == "ok"
        assert rep.se == 0.0
        assert 1.5 < rep.velocity < 3.0

    def test_wrong_shape_rejected(self):
        spec = EnvSpec.from_dict({
            "model": "bdp", "mode": "homogeneous",
            "sites": [{"mu": [1.0], "lam": [1.0]}]})
        with pytest.raises(ConfigError):
            velocity_theorem51(spec)

    def test_drift_rate(self, drift2_env):
        assert drift_rate(drift2_env.site(0)) == 2.0
