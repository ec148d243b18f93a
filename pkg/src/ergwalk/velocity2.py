"""Exact velocity machinery for two-step jumps (L = R = 2).

The embedded chain's upward exit-split probabilities satisfy a three-term
transfer recursion; evaluated naively, its matrix products mix growing and
decaying modes and lose all precision, so this module propagates them in
first-passage form (the stable UL factorization of the same recursion): a
level sweep of 2x2 exit-split matrices followed by a descent pass.  The
absorbing-chain linear solve ships alongside as the independent oracle.

On top of the exit splits sit the per-site coefficient bundles, the 9x9
mean offspring matrices of the associated branching process, and the two
series whose ratio gives the exact long-run speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .environments import EnvSpec, EnvironmentEnsemble, embedded_jump_probs, shift
from .errors import (ConfigError, DegenerateSiteError, InfeasibleCoefficientError,
                     SeriesDivergenceError, TruncationError,
                     WindowExhaustionError)
from .parallel import pmap
from .reporting import VelocityReport, ratio_mean_se
from .seeding import ENV_DRAW_STREAM, spawn_seed

V1 = np.array([1, 1, 1, 0, 0, 0, 1, 1, 1], dtype=float)
V2 = np.array([1, 1, 0, 1, 1, 0, 1, 1, 0], dtype=float)


def _require_22(env):
    if env.L != 2 or env.R != 2:
        raise ConfigError(f"this engine needs L = R = 2, got L={env.L}, R={env.R}")


def embedded4(env, i: int):
    """Embedded-chain jump probabilities (p1, p2, q1, q2) at site i."""
    site = env.site(i)
    zeta = site.mu[0] + site.mu[1] + site.lam[0] + site.lam[1]
    if zeta <= 0:
        raise DegenerateSiteError(f"zero total rate at site {i}")
    return site.lam[0] / zeta, site.lam[1] / zeta, site.mu[0] / zeta, site.mu[1] / zeta


def transfer_matrix(site) -> np.ndarray:
    """3x3 transfer matrix of the exit-probability recursion at one site."""
    mu1, mu2 = site.mu
    lam1, lam2 = site.lam
    if mu2 <= 0:
        raise DegenerateSiteError("transfer matrix needs mu2 > 0")
    return np.array([
        [-(mu1 + mu2) / mu2, (lam1 + lam2) / mu2, lam2 / mu2],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
    ])


# -- exit probabilities ------------------------------------------------------


@dataclass
class ExitProbs:
    """Four-way exit distribution of the chain confined to [a+1, b-1]."""

    a: int
    b: int
    start: int
    probs: dict  # keys b, b+1, a, a-1

    def total(self) -> float:
        return math.fsum(self.probs.values())


def _exit_system(env, a, b):
    """Absorbing-chain linear system over interior states a+1..b-1."""
    width = b - 1 - a
    if width < 1:
        raise ConfigError("interval must have interior width >= 1")
    absorbing = [b, b + 1, a, a - 1]
    col_of = {s: c for c, s in enumerate(absorbing)}
    rows, cols, vals = [], [], []
    rhs = np.zeros((width, 4))
    for idx in range(width):
        k = a + 1 + idx
        p1, p2, q1, q2 = embedded4(env, k)
        for j, prob in ((1, p1), (2, p2), (-1, q1), (-2, q2)):
            t = k + j
            if a + 1 <= t <= b - 1:
                rows.append(idx)
                cols.append(t - (a + 1))
                vals.append(prob)
            else:
                t = min(max(t, a - 1), b + 1)
                rhs[idx, col_of[t]] += prob
    P = sp.csc_matrix((vals, (rows, cols)), shape=(width, width))
    A = sp.eye(width, format="csc") - P
    return A, rhs


def exit_probs_finite(env, a: int, b: int, start: int) -> ExitProbs:
    """Exit distribution by the absorbing-chain linear solve (the oracle)."""
    if not a + 1 <= start <= b - 1:
        raise ConfigError(f"start {start} outside interior ({a + 1}..{b - 1})")
    A, rhs = _exit_system(env, a, b)
    try:
        lu = spla.splu(A)
    except RuntimeError as err:
        raise DegenerateSiteError(f"singular exit system on [{a}, {b}]: {err}")
    H = lu.solve(rhs)
    row = H[start - (a + 1)]
    return ExitProbs(a=a, b=b, start=start,
                     probs={b: float(row[0]), b + 1: float(row[1]),
                            a: float(row[2]), a - 1: float(row[3])})


def exit_profiles(env, a: int, b: int):
    """Full absorption-probability profiles g_target(k) for k in [a-1, b+1].

    Used to check the transfer recursion locally on solved values."""
    A, rhs = _exit_system(env, a, b)
    H = spla.splu(A).solve(rhs)
    positions = list(range(a - 1, b + 2))
    profiles = {}
    for c, target in enumerate([b, b + 1, a, a - 1]):
        g = np.zeros(len(positions))
        for k in range(a + 1, b):
            g[k - (a - 1)] = H[k - (a + 1), c]
        g[target - (a - 1)] = 1.0
        profiles[target] = g
    return positions, profiles


def _sweep(emb, lo: int, hi: int) -> dict:
    """Level sweep of 2x2 upward exit-split matrices.

    G[m] = (g00, g01, g10, g11) with g[s*2+t] = P(start at m-s, leave
    (-inf, m] landing at m+1+t), for the chain killed below level lo
    (starts at lo-1, lo-2 never exit).  All quantities are probabilities,
    so the sweep is unconditionally stable.
    """
    p00 = p01 = p10 = p11 = 0.0
    out = {}
    for m in range(lo, hi + 1):
        p1, p2, q1, q2 = emb(m)
        den = 1.0 - q1 * p00 - q2 * p10
        if den <= 0:
            raise InfeasibleCoefficientError(f"nonpositive return denominator at level {m}")
        # entries are probabilities; the clamp stops rounding creep from
        # compounding over very deep sweeps near the critical regime
        g00 = min((p1 + q1 * p01 + q2 * p11) / den, 1.0)
        g01 = min(p2 / den, 1.0)
        g10 = min(p01 + p00 * g00, 1.0)
        g11 = min(p00 * g01, 1.0)
        out[m] = (g00, g01, g10, g11)
        p00, p01, p10, p11 = g00, g01, g10, g11
    return out


def _descend(G: dict, k: int, top: int) -> tuple:
    """(P(exit at top+1), P(exit at top+2)) from start k <= top."""
    r1 = (1.0, 0.0)   # landing one above the top
    r2 = (0.0, 1.0)   # landing two above
    for m in range(top, k - 1, -1):
        g00, g01, _, _ = G[m]
        r1, r2 = (g00 * r1[0] + g01 * r2[0], g00 * r1[1] + g01 * r2[1]), r1
    return r1


def exit_probs_recursion(env, a: int, b: int, start: int) -> ExitProbs:
    """Exit distribution by the stabilized transfer recursion (sweep+descend).

    Must agree with exit_probs_finite to solver precision; both routes ship
    so each validates the other.
    """
    if not a + 1 <= start <= b - 1:
        raise ConfigError(f"start {start} outside interior ({a + 1}..{b - 1})")
    emb = lambda m: embedded4(env, m)
    top = _descend(_sweep(emb, a + 1, b - 1), start, b - 1)

    def emb_mirror(m):
        p1, p2, q1, q2 = embedded4(env, a + b - m)
        return q1, q2, p1, p2

    bottom = _descend(_sweep(emb_mirror, a + 1, b - 1), a + b - start, b - 1)
    return ExitProbs(a=a, b=b, start=start,
                     probs={b: float(top[0]), b + 1: float(top[1]),
                            a: float(bottom[0]), a - 1: float(bottom[1])})


@dataclass
class FValues:
    """Upward exit-split probabilities on the half line below a level.

    f1 = P(start k, leave (-inf, i] at i+1), f2 = same at i+2, computed on
    truncated intervals with the bottom doubled until Cauchy-stable.
    """

    i: int
    k: int
    f1: float
    f2: float
    depth: int
    residual: float


def f_pair_at_depth(env, i: int, k: int, depth: int) -> tuple:
    """Exit-split pair on the interval truncated ``depth`` levels below i."""
    lo = i - depth + 1
    if k < lo:
        raise ConfigError(f"start {k} below the truncated interval ({lo})")
    emb = lambda m: embedded4(env, m)
    val = _descend(_sweep(emb, lo, i), k, i)
    return float(val[0]), float(val[1])


def f_values(env, i: int, k: int = None, tol: float = 1e-10,
             start_depth: int = 32, max_depth: int = 2**15) -> FValues:
    """Half-line exit split by downward truncation with depth doubling.

    Right transience plus ellipticity make the truncation error decay
    geometrically; in the recurrent or left-transient regime the doubling
    never stabilizes and a TruncationError carries the partial values.
    """
    if k is None:
        k = i
    if k > i:
        raise ConfigError("need k <= i")
    depth = max(start_depth, i - k + 2)
    prev = None
    while depth <= max_depth:
        cur = f_pair_at_depth(env, i, k, depth)
        if prev is not None:
            residual = max(abs(cur[0] - prev[0]), abs(cur[1] - prev[1]))
            if residual < tol:
                return FValues(i=i, k=k, f1=cur[0], f2=cur[1],
                               depth=depth, residual=residual)
        prev = cur
        depth *= 2
    raise TruncationError(
        "exit-split values did not stabilize under depth doubling",
        {"i": i, "k": k, "last": prev, "max_depth": max_depth, "tol": tol})


# -- coefficient bundles and mean matrices -----------------------------------


@dataclass
class CoefficientBundle:
    """Per-site branching coefficients and the 9x9 mean offspring matrix."""

    i: int
    alpha: np.ndarray  # (3,)
    beta: np.ndarray   # (3,)
    gamma: np.ndarray  # (3,)
    x: float
    y: float
    z: float
    w: float
    v: float
    s: float
    t: float
    Q: np.ndarray = field(repr=False)  # (9, 9)


def _ratio(num: float, den: float, default: float) -> float:
    if den == 0.0:
        if abs(num) > 1e-14:
            raise InfeasibleCoefficientError(
                f"ratio {num}/{den} has zero denominator with nonzero numerator")
        return default
    return num / den


def _build_Q(x, y, z, w, v, s, t) -> np.ndarray:
    plain = np.array([x, y, 0.0, z, w, 0.0, 0.0, 0.0, 0.0])
    with_s = np.array([x, y, s, z, w, 1.0 - s, 0.0, 0.0, 0.0])
    with_t = np.array([x, y, 0.0, z, w, 0.0, t, 1.0 - t, 0.0])
    scaled = v * np.array([x, y, s, z, w, 1.0 - s, t, 1.0 - t, 0.0])
    scaled[8] = 1.0 - v
    return np.vstack([plain, with_s, plain, with_t, scaled,
                      with_t, plain, with_s, plain])


class BundleCache:
    """Converged exit-split table plus per-site coefficient bundles.

    The level sweep is recomputed from a doubling truncation depth until
    every consumed value is Cauchy-stable within ``tol``; ranges extend
    geometrically so series evaluation stays near-linear overall.
    """

    def __init__(self, env, tol: float = 1e-12, start_depth: int = 64,
                 max_depth: int = 2**15):
        _require_22(env)
        self.env = env
        self.tol = tol
        self.start_depth = min(start_depth, max(1, max_depth // 2))
        self.max_depth = max_depth
        self._emb_cache = {}
        self._G = {}
        self._span = None  # validated (lo, hi)
        self._depth = start_depth
        self._raw = {}
        self._bundles = {}

    def emb(self, m):
        t = self._emb_cache.get(m)
        if t is None:
            self._emb_cache[m] = t = embedded4(self.env, m)
        return t

    def _ensure_levels(self, lo: int, hi: int):
        if self._span and self._span[0] <= lo and hi <= self._span[1]:
            return
        want_lo, want_hi = lo, hi
        if self._span:
            # extend geometrically so series evaluation amortizes re-sweeps
            pad = max(64, self._span[1] - self._span[0] + 1)
            lo = min(lo, self._span[0] - (pad if lo < self._span[0] else 0))
            hi = max(hi, self._span[1] + (pad if hi > self._span[1] else 0))
            lo = min(lo, self._span[0])
            hi = max(hi, self._span[1])
        try:
            self._converge_sweep(lo, hi)
        except WindowExhaustionError:
            if (lo, hi) == (want_lo, want_hi) and not self._span:
                raise
            # finite table: fall back to the exact requested range
            lo = min(want_lo, self._span[0]) if self._span else want_lo
            hi = max(want_hi, self._span[1]) if self._span else want_hi
            self._converge_sweep(lo, hi)

    def _converge_sweep(self, lo: int, hi: int):
        depth = self._depth
        prev = None
        while depth <= self.max_depth:
            cur = _sweep(self.emb, lo - depth, hi)
            if prev is not None:
                residual = max(
                    abs(a - b)
                    for m in range(lo, hi + 1)
                    for a, b in zip(cur[m], prev[m]))
                if residual < self.tol:
                    self._G = cur
                    self._span = (lo, hi)
                    self._depth = depth
                    return
            prev = cur
            depth *= 2
        raise TruncationError(
            "exit-split sweep did not stabilize (not in the right-transient "
            "regime?)", {"lo": lo, "hi": hi, "max_depth": self.max_depth})

    def f_pair(self, level: int) -> tuple:
        """(f at start=level, f at start=level-1) for exits above ``level``."""
        self._ensure_levels(level, level)
        G = self._G[level]
        return G[0], G[2]

    def raw_coeffs(self, i: int):
        got = self._raw.get(i)
        if got is None:
            p1m, p2m, _, _ = self.emb(i - 1)
            _, _, q1i, q2i = self.emb(i)
            _, _, q1m, q2m = self.emb(i - 1)
            _, _, _, q2p = self.emb(i + 1)
            f0, f1 = self.f_pair(i - 2)
            den = 1.0 - q1m * f0 - q2m * f1
            if den <= 0:
                raise InfeasibleCoefficientError(
                    f"coefficient denominator {den} <= 0 at site {i}")
            alpha = np.array([q1i * p1m / den, 0.0, q1i * p2m / den])
            alpha[1] = q1i - alpha[0] - alpha[2]
            beta = np.array([q2i * f0 * p1m / den, 0.0, q2i * f0 * p2m / den])
            beta[1] = q2i - beta[0] - beta[2]
            gamma = np.array([q2p * p1m / den, 0.0, q2p * p2m / den])
            gamma[1] = q2p - gamma[0] - gamma[2]
            self._raw[i] = got = (alpha, beta, gamma)
        return got

    def bundle(self, i: int) -> CoefficientBundle:
        got = self._bundles.get(i)
        if got is not None:
            return got
        alpha, beta, gamma = self.raw_coeffs(i)
        _, beta_next, _ = self.raw_coeffs(i + 1)
        theta = 1.0 - alpha[0] - alpha[1] - beta[0] - beta[1]
        if theta <= 0:
            raise InfeasibleCoefficientError(
                f"offspring normalization {theta} <= 0 at site {i}")
        x = alpha[0] / theta
        y = alpha[1] / theta
        z = beta[0] / theta
        w = beta[1] / theta
        v = 1.0 - _ratio(gamma[2], beta_next[1], default=0.0)
        s = _ratio(alpha[2], alpha[2] + beta[2], default=0.0)
        t = _ratio(gamma[0], gamma[0] + gamma[1], default=0.0)
        got = CoefficientBundle(i=i, alpha=alpha, beta=beta, gamma=gamma,
                                x=x, y=y, z=z, w=w, v=v, s=s, t=t,
                                Q=_build_Q(x, y, z, w, v, s, t))
        self._bundles[i] = got
        return got

    def ustar(self, i: int) -> np.ndarray:
        """Conditional-mean row built from the alpha values at site ``i``.

        A zero alpha mass means those branching types occur with
        probability zero; their entries contribute nothing."""
        alpha, _, _ = self.raw_coeffs(i)
        den = alpha[0] + alpha[1]
        u = np.zeros(9)
        if den > 0:
            u[0] = alpha[0] / den
            u[1] = alpha[1] / den
        u[2] = 1.0
        return u

    def u1(self) -> np.ndarray:
        """Initial mean vector: alpha at site 1 over its total mass."""
        alpha, _, _ = self.raw_coeffs(1)
        u = np.zeros(9)
        if alpha.sum() > 0:
            u[:3] = alpha / alpha.sum()
        return u


def coefficient_bundle(env, i: int, tol: float = 1e-12) -> CoefficientBundle:
    """Standalone bundle construction (cached across calls via BundleCache
    when evaluating series; this entry point is for one-off inspection)."""
    return BundleCache(env, tol=tol).bundle(i)


# -- the two series and the exact velocity -----------------------------------


def _series_error(kind, k, term, total, terms):
    ratio = math.nan
    if len(terms) > 10 and terms[-11] > 0:
        ratio = (terms[-1] / terms[-11]) ** 0.1
    return SeriesDivergenceError(
        f"{kind} series still above tolerance after {len(terms)} terms",
        {"kind": kind, "k_stop": k, "last_term": term, "partial_sum": total,
         "per_term_ratio_estimate": ratio})


def d_omega(env, tol: float = 1e-10, k_max: int = 10**4,
            cache: BundleCache = None):
    """Downward series whose value is the summed conditional mean first
    ascent time; terms walk the mean matrices over sites 0, -1, -2, ...

    Returns (value, diagnostics).  Terms are nonnegative; evaluation stops
    when a term drops below tol times the running total, and raises
    SeriesDivergenceError when k_max is hit first (infinite-mean regime).
    """
    cache = cache or BundleCache(env, tol=min(tol, 1e-12))
    ustar = cache.ustar(1)
    row = ustar.copy()
    total = 0.0
    terms = []
    for k in range(0, -k_max - 1, -1):
        Qk = cache.bundle(k).Q
        zeta_k = env.site(k).total_rate
        term = float(row @ V1 + (row @ Qk) @ V2) / zeta_k
        total += term
        terms.append(term)
        if len(terms) >= 4 and term <= tol * max(total, 1e-300):
            return total, {"k_used": len(terms), "last_term": term,
                           "residual": term / max(total, 1e-300)}
        row = row @ Qk
    raise _series_error("ascent-time", -k_max, terms[-1], total, terms)


def pi_omega(env, tol: float = 1e-10, k_max: int = 10**4,
             cache: BundleCache = None):
    """Upward series: the annealed-density counterpart of d_omega, with the
    mean-matrix products ascending over sites 1, 2, ... and the holding
    rate fixed at site 0.  Returns (value, diagnostics)."""
    cache = cache or BundleCache(env, tol=min(tol, 1e-12))
    zeta0 = env.site(0).total_rate
    c1 = V1.copy()                       # Q_k ... Q_1 v1 (empty at k=0)
    c2 = cache.bundle(0).Q @ V2          # Q_k ... Q_0 v2
    total = 0.0
    terms = []
    for k in range(0, k_max + 1):
        if k > 0:
            Qk = cache.bundle(k).Q
            c1 = Qk @ c1
            c2 = Qk @ c2
        term = float(cache.ustar(k + 1) @ (c1 + c2)) / zeta0
        total += term
        terms.append(term)
        if len(terms) >= 4 and term <= tol * max(total, 1e-300):
            return total, {"k_used": len(terms), "last_term": term,
                           "residual": term / max(total, 1e-300)}
    raise _series_error("density", k_max, terms[-1], total, terms)


def expected_occupation(env, k: int, tol: float = 1e-10,
                        cache: BundleCache = None) -> float:
    """Summed conditional mean visit count of site k (over the two possible
    overshoot values) before the first ascent, via the mean-matrix product."""
    if k > 0:
        raise ConfigError("occupation sites are k <= 0")
    cache = cache or BundleCache(env, tol=min(tol, 1e-12))
    row = cache.ustar(1).copy()
    for site in range(0, k, -1):  # sites 0, -1, ..., k+1
        row = row @ cache.bundle(site).Q
    return float(row @ V1 + (row @ cache.bundle(k).Q) @ V2)


def drift_rate(site) -> float:
    """Mean displacement rate 2*lam2 + lam1 - mu1 - 2*mu2."""
    mu1, mu2 = site.mu
    lam1, lam2 = site.lam
    return 2.0 * lam2 + lam1 - mu1 - 2.0 * mu2


@dataclass
class VelocityDecomposition:
    """One environment's exact-velocity ingredients."""

    D: float
    pi: float
    drift: float
    d_diag: dict
    pi_diag: dict

    @property
    def velocity(self) -> float:
        return self.pi * self.drift / self.D


def velocity_decomposition(env, tol: float = 1e-10,
                           k_max: int = 10**4) -> VelocityDecomposition:
    cache = BundleCache(env, tol=min(tol * 1e-2, 1e-12))
    D, d_diag = d_omega(env, tol, k_max, cache)
    pi, pi_diag = pi_omega(env, tol, k_max, cache)
    return VelocityDecomposition(D=D, pi=pi, drift=drift_rate(env.site(0)),
                                 d_diag=d_diag, pi_diag=pi_diag)


def _theorem51_draw(args):
    spec, seed, tol, k_max, draw = args
    env_seed = seed if draw < 0 else spawn_seed(seed, ENV_DRAW_STREAM, draw)
    env = EnvironmentEnsemble(spec, env_seed)
    try:
        dec = velocity_decomposition(env, tol, k_max)
    except (TruncationError, InfeasibleCoefficientError) as err:
        diag = dict(getattr(err, "diagnostics", {}) or {})
        diag["error"] = str(err)
        return {"diverged": True, "diag": diag}
    return {"diverged": False, "num": dec.pi * dec.drift, "den": dec.D,
            "k_used": max(dec.d_diag["k_used"], dec.pi_diag["k_used"]),
            "residual": max(dec.d_diag["residual"], dec.pi_diag["residual"])}


def velocity_theorem51(env_spec: EnvSpec, env_samples: int = 200,
                       tol: float = 1e-10, k_max: int = 10**4,
                       seed: int = 0, jobs: int = 1) -> VelocityReport:
    """Exact long-run speed: annealed mean of (density x drift) over the
    annealed mean ascent time.

    Homogeneous specs take one evaluation and periodic specs a period
    average (both exact, zero SE); iid/markov specs are Monte Carlo over
    environment draws with a delta-method SE on the ratio of means.  A
    diverging series in any draw yields the zero-or-undefined verdict.
    """
    params = {"env_samples": env_samples, "tol": tol, "k_max": k_max}
    probe = EnvironmentEnsemble(env_spec, env_spec.seed)
    _require_22(probe)
    mode = env_spec.mode
    if mode == "homogeneous":
        tasks = [(env_spec, env_spec.seed, tol, k_max, -1)]
    elif mode == "periodic":
        # evaluate each phase of the period exactly
        results = []
        env = EnvironmentEnsemble(env_spec, env_spec.seed)
        for r in range(len(env_spec.sites)):
            shifted = shift(env, r)
            try:
                dec = velocity_decomposition(shifted, tol, k_max)
            except (TruncationError, InfeasibleCoefficientError) as err:
                return VelocityReport(
                    velocity=0.0, se=math.nan, method="theorem51", seed=seed,
                    verdict="zero-or-undefined", params=params,
                    diagnostics={"error": str(err), "phase": r,
                                 **dict(getattr(err, "diagnostics", {}) or {})})
            results.append({"num": dec.pi * dec.drift, "den": dec.D,
                            "k_used": max(dec.d_diag["k_used"], dec.pi_diag["k_used"]),
                            "residual": max(dec.d_diag["residual"],
                                            dec.pi_diag["residual"])})
        return _reduce_theorem51(results, len(results), seed, params, exact=True)
    else:
        tasks = [(env_spec, seed, tol, k_max, d) for d in range(env_samples)]
    results = pmap(_theorem51_draw, tasks, jobs)
    bad = [r for r in results if r.get("diverged")]
    if bad:
        return VelocityReport(
            velocity=0.0, se=math.nan, method="theorem51", seed=seed,
            verdict="zero-or-undefined", params=params,
            diagnostics={"diverged_draws": len(bad), "first": bad[0]["diag"]})
    exact = mode == "homogeneous"
    return _reduce_theorem51(results, len(results), seed, params, exact)


def _reduce_theorem51(results, n, seed, params, exact):
    nums = [r["num"] for r in results]
    dens = [r["den"] for r in results]
    if exact or n == 1:
        v = math.fsum(nums) / math.fsum(dens)
        se = 0.0
    else:
        v, se = ratio_mean_se(nums, dens)
    return VelocityReport(
        velocity=v, se=se, method="theorem51", replicas=n, seed=seed,
        params=params,
        diagnostics={
            "D_mean": float(np.mean(dens)),
            "pi_times_drift_mean": float(np.mean(nums)),
            "k_used": max(r["k_used"] for r in results),
            "residual": max(r["residual"] for r in results),
        })
