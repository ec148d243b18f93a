"""Event-driven engine for the continuous-time jump process.

Covers path simulation, the embedded chain and its ladder statistics, the
grid-sampled (skeleton) chain, Monte Carlo velocity, the exponential tail
check for skeleton jumps, and the mesh-consistency diagnostics.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .environments import EnvSpec, EnvironmentEnsemble
from .errors import ConfigError, ExplosionGuardError
from .parallel import pmap
from .reporting import binomial_se, mean_and_se, VelocityReport
from .seeding import ENV_DRAW_STREAM, REPLICA_STREAM, WALK_STREAM, spawn_seed, substream

_BLOCKS = (16, 64, 256, 1024, 4096, 16384, 65536)


@dataclass
class EventPath:
    """Jump epochs and states of one realized path on [0, t_max].

    ``holds[n]`` is the exact stored holding time between epochs n and n+1;
    epochs are their running sum.  Derived series (skeleton, ladder sums)
    are computed from the holds so occupation identities stay exact.
    """

    times: np.ndarray   # epochs, times[0] == 0.0
    states: np.ndarray  # states[n] = state on [times[n], times[n+1])
    holds: np.ndarray   # len(times) - 1
    t_max: float
    seed: int

    def __post_init__(self):
        if len(self.times) != len(self.states) or len(self.holds) != len(self.times) - 1:
            raise ValueError("inconsistent path arrays")
        if len(self.times) > 1:
            if not (np.diff(self.times) > 0).all():
                raise ValueError("epochs must be strictly increasing")
            if (np.diff(self.states) == 0).any():
                raise ValueError("states must change at every jump")

    @property
    def n_events(self) -> int:
        return len(self.times) - 1

    def state_at(self, t: float) -> int:
        """Right-continuous evaluation of the step function."""
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return int(self.states[idx])


@dataclass
class LadderStats:
    """First strict ascent above 0 and the pre-ascent occupation profile."""

    t1: float
    overshoot: int
    visit_counts: dict         # site -> embedded visits before the ascent
    occupation_times: dict     # site -> total holding time before the ascent
    embedded_index: int        # embedded-chain index of the ascent
    truncated: bool = False


@dataclass
class SkeletonSeries:
    """States sampled on the grid kh, k = 0..n."""

    h: float
    values: np.ndarray

    def increments(self) -> np.ndarray:
        return np.diff(self.values)


def _site_table(env, cache, x):
    t = cache.get(x)
    if t is None:
        site = env.site(x)
        zeta = site.total_rate
        offsets = np.concatenate([np.arange(-site.L, 0), np.arange(1, site.R + 1)])
        probs = np.concatenate([np.asarray(site.mu[::-1], dtype=float),
                                np.asarray(site.lam, dtype=float)]) / zeta
        cdf = np.cumsum(probs)
        cdf[-1] = 1.0
        cache[x] = t = (zeta, offsets.astype(np.int64), cdf)
    return t


def _site_table_py(env, cache, x):
    """bisect-friendly variant for the sequential event loop."""
    t = cache.get(x)
    if t is None:
        zeta, offsets, cdf = _site_table(env, {}, x)
        cache[x] = t = (zeta, offsets.tolist(), cdf.tolist())
    return t


def _blocks():
    i = 0
    while True:
        yield _BLOCKS[min(i, len(_BLOCKS) - 1)]
        i += 1


def _simulate(env, t_max, seed, record, max_events, stop_when_positive=False):
    """Shared event loop.  Returns an EventPath when ``record`` else the
    tuple (final state, event count, stopped_positive)."""
    rng = substream(seed, WALK_STREAM)
    cache = {}
    state = 0
    t = 0.0
    comp = 0.0  # Kahan compensation for the sequential path
    n_events = 0
    rec_times, rec_states, rec_holds = [], [], []
    homogeneous = env.mode == "homogeneous"
    if homogeneous:
        zeta, offsets, cdf = _site_table(env, cache, 0)
    for block in _blocks():
        if n_events > max_events:
            raise ExplosionGuardError(
                f"more than {max_events} events before t_max={t_max}")
        u1 = rng.random(block)
        u2 = rng.random(block)
        if homogeneous:
            holds = -np.log1p(-u1) / zeta
            epochs = t + np.cumsum(holds)
            take = int(np.searchsorted(epochs, t_max, side="right"))
            done = take < block
            steps = offsets[np.searchsorted(cdf, u2[:take], side="right")]
            if stop_when_positive and take:
                running = state + np.cumsum(steps)
                hit = np.nonzero(running > 0)[0]
                if hit.size:
                    take = int(hit[0]) + 1
                    steps = steps[:take]
                    running = running[:take]
                    done = True
            if take:
                if record:
                    rec_times.append(epochs[:take])
                    rec_holds.append(holds[:take])
                    rec_states.append(state + np.cumsum(steps))
                state = int(state + steps.sum()) if not stop_when_positive \
                    else int((state + np.cumsum(steps))[-1])
                n_events += take
                t = float(epochs[take - 1])
            if done:
                stopped = stop_when_positive and state > 0
                break
        else:
            done = False
            w1 = u1.tolist()
            w2 = u2.tolist()
            for i in range(block):
                zeta, offsets, cdf = _site_table_py(env, cache, state)
                hold = -math.log1p(-w1[i]) / zeta
                y = hold - comp
                t_next = t + y
                if t_next > t_max:
                    done = True
                    break
                comp = (t_next - t) - y
                t = t_next
                state += offsets[bisect_right(cdf, w2[i])]
                n_events += 1
                if record:
                    rec_times.append(t)
                    rec_holds.append(hold)
                    rec_states.append(state)
                if stop_when_positive and state > 0:
                    done = True
                    break
            if done:
                stopped = stop_when_positive and state > 0
                break
    if not record:
        return state, n_events, stopped
    if homogeneous:
        times = np.concatenate([[0.0]] + rec_times) if rec_times else np.zeros(1)
        states = np.concatenate([[0]] + rec_states).astype(np.int64) \
            if rec_states else np.zeros(1, dtype=np.int64)
        holds = np.concatenate(rec_holds) if rec_holds else np.zeros(0)
    else:
        times = np.concatenate([[0.0], np.asarray(rec_times)])
        states = np.concatenate([[0], np.asarray(rec_states, dtype=np.int64)])
        holds = np.asarray(rec_holds)
    return EventPath(times=times, states=states, holds=holds,
                     t_max=float(t_max), seed=seed)


def simulate_bdp(env: EnvironmentEnsemble, t_max: float, seed: int,
                 max_events: int = 10**9) -> EventPath:
    """Simulate the jump process from 0 on [0, t_max].

    Holding times are exponential in the site's total rate; the jump law is
    the embedded distribution.  Deterministic in (env, seed).
    """
    if t_max <= 0:
        raise ConfigError("t_max must be positive")
    return _simulate(env, t_max, seed, record=True, max_events=max_events)


def simulate_until_positive(env: EnvironmentEnsemble, t_max: float, seed: int,
                            max_events: int = 10**9) -> EventPath:
    """Like simulate_bdp but stops at the first strict ascent above 0."""
    if t_max <= 0:
        raise ConfigError("t_max must be positive")
    return _simulate(env, t_max, seed, record=True, max_events=max_events,
                     stop_when_positive=True)


def final_state(env: EnvironmentEnsemble, t_max: float, seed: int,
                max_events: int = 10**9) -> int:
    state, _, _ = _simulate(env, t_max, seed, record=False, max_events=max_events)
    return state


def extract_skeleton(path: EventPath, h: float) -> SkeletonSeries:
    """Sample the path on the grid kh (right-continuous, no discretization
    error: states are read off the stored event list)."""
    if not 0 < h <= path.t_max:
        raise ConfigError("need 0 < h <= t_max")
    n = int(math.floor(path.t_max / h + 1e-12))
    grid = h * np.arange(n + 1)
    idx = np.searchsorted(path.times, grid, side="right") - 1
    return SkeletonSeries(h=float(h), values=path.states[idx].copy())


def ladder_stats(path: EventPath) -> LadderStats:
    """First passage of the positive half-lattice along one path.

    The passage time equals the summed pre-passage holding times exactly
    (both sides are exactly-rounded sums of the same stored values).
    """
    positive = np.nonzero(path.states > 0)[0]
    if positive.size == 0:
        pre = path.states[:-1] if path.n_events else path.states[:1]
        return LadderStats(
            t1=math.nan, overshoot=0,
            visit_counts=dict(Counter(int(s) for s in pre)),
            occupation_times=_group_holds(path, len(path.holds)),
            embedded_index=path.n_events, truncated=True)
    idx = int(positive[0])
    t1 = math.fsum(path.holds[:idx])
    pre = path.states[:idx]
    return LadderStats(
        t1=t1,
        overshoot=int(path.states[idx]),
        visit_counts=dict(Counter(int(s) for s in pre)),
        occupation_times=_group_holds(path, idx),
        embedded_index=idx,
        truncated=False)


def _group_holds(path: EventPath, upto: int) -> dict:
    groups = {}
    for s, hold in zip(path.states[:upto], path.holds[:upto]):
        groups.setdefault(int(s), []).append(float(hold))
    return {s: math.fsum(v) for s, v in groups.items()}


def _velocity_replica(args):
    spec, seed, t_max, replica, annealed = args
    env_seed = seed
    if annealed and spec.mode in ("iid", "markov"):
        env_seed = spawn_seed(seed, ENV_DRAW_STREAM, replica)
    env = EnvironmentEnsemble(spec, env_seed)
    path_seed = spawn_seed(seed, REPLICA_STREAM, replica)
    return final_state(env, t_max, path_seed) / t_max


def estimate_velocity_bdp(env_spec: EnvSpec, t_max: float, replicas: int,
                          seed: int, annealed: bool = True,
                          jobs: int = 1) -> VelocityReport:
    """Monte Carlo estimate of the long-run speed N_t/t, annealed over
    environment draws for iid/markov specs."""
    if replicas < 1:
        raise ConfigError("replicas must be >= 1")
    tasks = [(env_spec, seed, t_max, r, annealed) for r in range(replicas)]
    values = pmap(_velocity_replica, tasks, jobs)
    mean, se = mean_and_se(values)
    return VelocityReport(
        velocity=mean, se=se, method="mc-bdp", replicas=replicas, seed=seed,
        params={"t_max": t_max, "annealed": annealed},
        diagnostics={"per_replica_mean_of": "N_t/t"},
        values=[float(v) for v in values],
    )


# -- skeleton diagnostics ---------------------------------------------------


@dataclass
class TailReport:
    """Empirical skeleton-jump tail against the plug-in exponential bound."""

    h: float
    lam_bar: float
    epsilon: float
    M: float
    kappa: float
    K: float
    c0: float
    c1: float
    m: list
    freq: list
    se: list
    bound: list
    n_steps: int
    slope: float
    passed: bool

    def to_dict(self):
        return {
            "h": self.h, "lam_bar": self.lam_bar,
            "epsilon": self.epsilon, "M": self.M,
            "kappa": self.kappa, "K": self.K, "c0": self.c0, "c1": self.c1,
            "m": list(self.m), "freq": list(self.freq), "se": list(self.se),
            "bound": list(self.bound), "n_steps": self.n_steps,
            "slope": self.slope, "passed": self.passed,
        }


def tail_constants(L: int, R: int, epsilon: float, M: float, lam_bar: float):
    """Plug-in constants for the skeleton-jump tail bound."""
    if lam_bar >= 0:
        raise ConfigError("lam_bar must be negative")
    kappa = (L + R) * epsilon
    K = (L + R) * M
    if kappa - lam_bar <= K:
        raise ConfigError(
            f"lam_bar={lam_bar} too mild: need kappa - lam_bar > K "
            f"({kappa} - {lam_bar} <= {K})")
    c0 = -lam_bar
    c1 = (math.log(kappa - lam_bar) - math.log(K)) / R
    return kappa, K, c0, c1


def skeleton_tail_check(env_spec: EnvSpec, h: float, n_steps: int, seed: int,
                        lam_bar: float = -20.0, m_max: int = None) -> TailReport:
    """Check that skeleton jumps beyond the one-event range are exponentially
    rare, against the bound exp(c0*h - c1*m) evaluated at the declared
    ellipticity constants.

    The bound applies for m > max(L, R) only; smaller offsets are one-event
    reachable and are not asserted.  Standard errors are binomial (exact for
    homogeneous environments where skeleton increments are iid).
    """
    if env_spec.bounds is None:
        raise ConfigError("tail check needs declared bounds {epsilon, M}")
    env = EnvironmentEnsemble(env_spec, env_spec.seed)
    L, R = env.L, env.R
    epsilon, M = env_spec.bounds
    kappa, K, c0, c1 = tail_constants(L, R, epsilon, M, lam_bar)
    m_lo = max(L, R) + 1
    if m_max is None:
        m_max = max(L, R) + 6
    if m_max < m_lo:
        raise ConfigError(f"m_max={m_max} leaves no offsets above max(L,R)")
    path = simulate_bdp(env, t_max=n_steps * h, seed=seed)
    jumps = np.abs(extract_skeleton(path, h).increments())
    n = len(jumps)
    ms = list(range(m_lo, m_max + 1))
    freq = [float(np.mean(jumps >= m)) for m in ms]
    se = [binomial_se(f, n) for f in freq]
    bound = [math.exp(c0 * h) * math.exp(-c1 * m) for m in ms]
    passed = all(f + 3 * s < b for f, s, b in zip(freq, se, bound))
    positive = [(m, f) for m, f in zip(ms, freq) if f > 0]
    if len(positive) >= 2:
        slope = float(np.polyfit([m for m, _ in positive],
                                 [math.log(f) for _, f in positive], 1)[0])
    else:
        slope = math.nan
    return TailReport(h=float(h), lam_bar=float(lam_bar), epsilon=epsilon, M=M,
                      kappa=kappa, K=K, c0=c0, c1=c1, m=ms, freq=freq, se=se,
                      bound=bound, n_steps=n, slope=slope, passed=passed)


@dataclass
class HConsistencyReport:
    """Skeleton velocity over mesh for several meshes; all rows must agree."""

    rows: list  # dicts: h, n, v_h, se, v_h_over_h, se_over_h
    max_sigma: float
    consistent: bool

    def to_dict(self):
        return {"rows": [dict(r) for r in self.rows],
                "max_sigma": self.max_sigma, "consistent": self.consistent}


def _skeleton_velocity_replica(args):
    spec, seed, horizon, n, replica, annealed = args
    env_seed = seed
    if annealed and spec.mode in ("iid", "markov"):
        env_seed = spawn_seed(seed, ENV_DRAW_STREAM, replica)
    env = EnvironmentEnsemble(spec, env_seed)
    path_seed = spawn_seed(seed, REPLICA_STREAM, replica)
    return final_state(env, horizon, path_seed) / n


def h_consistency(env_spec: EnvSpec, h_list, t_max: float, replicas: int,
                  seed: int, jobs: int = 1) -> HConsistencyReport:
    """Estimate the skeleton velocity for each mesh and compare the
    mesh-normalized values pairwise at 3 combined standard errors."""
    rows = []
    for hi, h in enumerate(h_list):
        if h <= 0:
            raise ConfigError("all h must be positive")
        n = int(math.floor(t_max / h + 1e-12))
        if n < 1:
            raise ConfigError(f"t_max={t_max} too small for h={h}")
        horizon = n * h
        tasks = [(env_spec, spawn_seed(seed, 100 + hi), horizon, n, r, True)
                 for r in range(replicas)]
        values = pmap(_skeleton_velocity_replica, tasks, jobs)
        mean, se = mean_and_se(values)
        rows.append({"h": float(h), "n": n, "v_h": mean, "se": se,
                     "v_h_over_h": mean / h, "se_over_h": se / h})
    max_sigma = 0.0
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            gap = abs(rows[i]["v_h_over_h"] - rows[j]["v_h_over_h"])
            comb = math.hypot(rows[i]["se_over_h"], rows[j]["se_over_h"])
            if comb > 0:
                max_sigma = max(max_sigma, gap / comb)
    return HConsistencyReport(rows=rows, max_sigma=max_sigma,
                              consistent=max_sigma < 3.0)


@dataclass
class SmallHReport:
    """One-step skeleton jump frequencies over mesh, per offset."""

    rows: list  # dicts: h, offset, rate_hat, se, n
    offsets: list

    def to_dict(self):
        return {"rows": [dict(r) for r in self.rows], "offsets": list(self.offsets)}


def _one_step_offsets(env, h, n, seed):
    """Offsets N_h - N_0 over n independent starts at 0."""
    rng = substream(seed, WALK_STREAM)
    cache = {}
    if env.mode == "homogeneous":
        zeta, offsets, cdf = _site_table(env, cache, 0)
        pos = np.zeros(n, dtype=np.int64)
        left = np.full(n, float(h))
        active = np.arange(n)
        while active.size:
            u1 = rng.random(active.size)
            u2 = rng.random(active.size)
            holds = -np.log1p(-u1) / zeta
            jumped = holds < left[active]
            idx = active[jumped]
            pos[idx] += offsets[np.searchsorted(cdf, u2[jumped], side="right")]
            left[idx] -= holds[jumped]
            active = idx
        return pos
    out = np.empty(n, dtype=np.int64)
    for r in range(n):
        out[r] = final_state(env, h, spawn_seed(seed, REPLICA_STREAM, r))
    return out


def small_h_rates(env_spec: EnvSpec, h_list, replicas: int, seed: int,
                  jobs: int = 1) -> SmallHReport:
    """Empirical one-step skeleton jump frequencies divided by the mesh.

    As the mesh shrinks these recover the per-offset jump rates at site 0
    (and vanish for offsets needing more than one event).
    """
    env = EnvironmentEnsemble(env_spec, env_spec.seed)
    L, R = env.L, env.R
    offsets = [j for j in range(-L - 2, R + 3) if j != 0]
    rows = []
    for hi, h in enumerate(h_list):
        if h <= 0:
            raise ConfigError("all h must be positive")
        sample = _one_step_offsets(env, h, replicas, spawn_seed(seed, 200 + hi))
        for j in offsets:
            p_hat = float(np.mean(sample == j))
            rows.append({"h": float(h), "offset": j,
                         "rate_hat": p_hat / h,
                         "se": binomial_se(p_hat, replicas) / h,
                         "n": replicas})
    return SmallHReport(rows=rows, offsets=offsets)


def path_rows(path: EventPath):
    """(tau, chi) rows for CSV export."""
    return [(float(t), int(s)) for t, s in zip(path.times, path.states)]
