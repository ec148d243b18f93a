"""Random environments for the walk and birth-death models.

An environment is a two-sided sequence of per-site data: jump *rates* for
the continuous-time model, or a discrete jump *law* for the walk model.
Sites are materialized lazily from counter-derived substreams, so the same
(spec, seed) pair always yields bit-identical sites regardless of the
order in which they are first touched.
"""

from __future__ import annotations

import csv
from bisect import bisect_right
import json
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import zeta as hurwitz_zeta

from .errors import ConfigError, DegenerateSiteError, WindowExhaustionError
from .seeding import (HIDDEN_STREAM, SITE_STREAM, counter_uniform,
                      counter_uniforms)

MODES = ("homogeneous", "periodic", "iid", "markov", "table")


@dataclass(frozen=True)
class SiteRates:
    """One site of a birth-death environment.

    ``mu[l-1]`` is the rate of a left jump of size ``l`` (l = 1..L) and
    ``lam[r-1]`` the rate of a right jump of size ``r`` (r = 1..R).
    """

    mu: tuple
    lam: tuple

    def __post_init__(self):
        if any(x < 0 for x in self.mu) or any(x < 0 for x in self.lam):
            raise ConfigError(f"negative rate in site {self}")
        if self.total_rate <= 0:
            raise DegenerateSiteError("site has zero total rate")

    @property
    def L(self):
        return len(self.mu)

    @property
    def R(self):
        return len(self.lam)

    @property
    def total_rate(self) -> float:
        return float(sum(self.mu) + sum(self.lam))

    def all_rates(self):
        return tuple(self.mu) + tuple(self.lam)


@dataclass(frozen=True)
class RwreSiteLaw:
    """One site of a walk environment: a probability law over jump offsets.

    ``offsets`` are strictly increasing integers, ``probs`` the matching
    probabilities (normalized).  ``tail`` optionally records the declared
    polynomial-tail parameters ``(D, eps0, J)`` used for validation and for
    the folding error bound.
    """

    offsets: tuple
    probs: tuple
    tail: tuple = None  # (D, eps0, J) or None

    def __post_init__(self):
        if len(self.offsets) != len(self.probs) or not self.offsets:
            raise ConfigError("law needs matching nonempty offsets/probs")
        if list(self.offsets) != sorted(set(self.offsets)):
            raise ConfigError("offsets must be strictly increasing")
        if any(p < 0 for p in self.probs):
            raise ConfigError("negative probability in site law")
        if abs(sum(self.probs) - 1.0) > 1e-9:
            raise ConfigError(f"law probabilities sum to {sum(self.probs)!r}, not 1")

    def prob(self, j: int) -> float:
        try:
            return self.probs[self.offsets.index(j)]
        except ValueError:
            return 0.0

    def drift(self) -> float:
        return float(sum(j * p for j, p in zip(self.offsets, self.probs)))

    def max_offset(self):
        return self.offsets[-1]

    def support(self) -> dict:
        return dict(zip(self.offsets, self.probs))


def make_law(support: dict, tail=None) -> RwreSiteLaw:
    """Build a site law from an offset->probability mapping, renormalizing
    away float dust (sums must already be within 1e-9 of 1)."""
    items = sorted((int(j), float(p)) for j, p in support.items() if p > 0)
    total = math.fsum(p for _, p in items)
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"law mass {total!r} is not 1")
    offs = tuple(j for j, _ in items)
    probs = tuple(p / total for _, p in items)
    return RwreSiteLaw(offs, probs, tail=tail)


def fold_power_tail_law(p_right: float, D: float, eps0: float, J: int = None,
                        drift_budget: float = 1e-9, max_J: int = 10**6) -> RwreSiteLaw:
    """Law with a one-step right jump of mass ``p_right`` and a polynomial
    left tail ``c * |j|**-(3+eps0)`` folded onto a finite support [-J, 1].

    The folding moves all mass below -J onto -J, which keeps the law
    normalized; the induced drift error is bounded by the tail first
    moment.  When ``J`` is not given it is chosen so that bound is below
    ``drift_budget`` (capped at ``max_J`` for very slow tails).
    """
    if not 0 < p_right < 1:
        raise ConfigError("p_right must be in (0, 1)")
    a = 3.0 + eps0
    if J is None:
        # sum_{j>J} j * c j^-a <= c * J^-(1+eps0) / (1+eps0), c <= D
        J = int(math.ceil((D / ((1 + eps0) * drift_budget)) ** (1 / (1 + eps0))))
        J = max(2, min(J, max_J))
    # normalize the left tail to carry mass 1 - p_right
    left_mass = 1.0 - p_right
    raw = np.arange(1, J + 1, dtype=float) ** (-a)
    tail_beyond = float(hurwitz_zeta(a, J + 1))
    c = left_mass / (raw.sum() + tail_beyond)
    probs = c * raw
    probs[-1] += c * tail_beyond  # fold
    support = {1: p_right}
    for j, p in enumerate(probs, start=1):
        support[-j] = float(p)
    if c >= D:
        raise ConfigError(f"tail coefficient {c} violates the declared D={D}")
    return make_law(support, tail=(float(D), float(eps0), int(J)))


@dataclass
class ConditionReport:
    """Outcome of an environment-condition check; violations are data."""

    name: str
    passed: bool
    violations: list = field(default_factory=list)  # (site index, rule, value)

    def __post_init__(self):
        assert self.passed == (not self.violations)

    def to_dict(self):
        return {
            "name": self.name,
            "passed": self.passed,
            "violations": [list(v) for v in self.violations],
        }


@dataclass
class DivergenceReport:
    """Partial sums of the reciprocal-rate series in both directions.

    The verdicts are heuristic log-growth fits; this check reports
    consistency with divergence, it never claims a proof.
    """

    depths: list
    right_partial_sums: list
    left_partial_sums: list
    right_verdict: str
    left_verdict: str

    @property
    def consistent(self) -> bool:
        return (self.right_verdict == "divergence consistent"
                and self.left_verdict == "divergence consistent")

    def to_dict(self):
        return {
            "depths": list(self.depths),
            "right_partial_sums": [float(x) for x in self.right_partial_sums],
            "left_partial_sums": [float(x) for x in self.left_partial_sums],
            "right_verdict": self.right_verdict,
            "left_verdict": self.left_verdict,
            "consistent": self.consistent,
        }


@dataclass(frozen=True)
class EnvSpec:
    """Validated description of an environment generator.

    ``sites`` holds SiteRates (bdp) or RwreSiteLaw (rwre) objects: the
    single site for homogeneous mode, the period for periodic mode, the
    sampling pool for iid/markov modes, or the explicit table for table
    mode.  ``bounds``/``tail`` carry the declared ellipticity or tail
    constants and are required only by the checks that use them.
    """

    model: str                      # "bdp" | "rwre"
    mode: str                       # see MODES
    sites: tuple
    L: int = None
    R: int = None
    weights: tuple = None           # iid sampling weights over the pool
    transition: tuple = None        # markov: row-stochastic pool transitions
    rate_range: tuple = None        # iid bdp alternative: uniform rates
    bounds: tuple = None            # (epsilon, M)
    tail: tuple = None              # (D, eps0, J)
    origin: int = 0                 # table mode: site index of sites[0]
    seed: int = 0

    def __post_init__(self):
        if self.model not in ("bdp", "rwre"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not self.sites and not (self.mode == "iid" and self.rate_range):
            raise ConfigError("spec needs at least one site")
        if not self.sites and self.rate_range and not (self.L and self.R):
            raise ConfigError("rate_range specs must declare L and R")
        if self.bounds is not None:
            eps, M = self.bounds
            if not (0 < eps < M):
                raise ConfigError(f"bounds need 0 < epsilon < M, got {self.bounds}")
        if self.mode == "homogeneous" and len(self.sites) != 1:
            raise ConfigError("homogeneous mode takes exactly one site")
        if self.mode == "iid" and self.sites and self.weights is not None:
            if len(self.weights) != len(self.sites):
                raise ConfigError("weights length must match the site pool")
            if any(w < 0 for w in self.weights) or sum(self.weights) <= 0:
                raise ConfigError("weights must be nonnegative with positive sum")
        if self.mode == "markov":
            n = len(self.sites)
            t = np.asarray(self.transition, dtype=float) if self.transition else None
            if t is None or t.shape != (n, n):
                raise ConfigError("markov mode needs an n x n transition matrix")
            if (t < 0).any() or not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
                raise ConfigError("transition rows must be stochastic")
        if self.model == "bdp":
            Ls = {s.L for s in self.sites}
            Rs = {s.R for s in self.sites}
            if len(Ls) > 1 or len(Rs) > 1:
                raise ConfigError("all sites must share (L, R)")

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        d = dict(d)
        model = d.get("model")
        if model == "bdp":
            sites = tuple(SiteRates(tuple(map(float, s["mu"])), tuple(map(float, s["lam"])))
                          for s in d.get("sites", []))
        elif model == "rwre":
            sites = tuple(make_law({int(k): float(v) for k, v in s["support"].items()})
                          for s in d.get("laws", d.get("sites", [])))
        else:
            raise ConfigError(f"unknown model {model!r}")
        bounds = d.get("bounds")
        tail = d.get("tail")
        return cls(
            model=model,
            mode=d.get("mode", "homogeneous"),
            sites=sites,
            L=d.get("L"),
            R=d.get("R"),
            weights=tuple(d["weights"]) if d.get("weights") else None,
            transition=tuple(map(tuple, d["transition"])) if d.get("transition") else None,
            rate_range=tuple(d["rate_range"]) if d.get("rate_range") else None,
            bounds=(float(bounds["epsilon"]), float(bounds["M"])) if bounds else None,
            tail=(float(tail["D"]), float(tail["eps0"]), int(tail["J"])) if tail else None,
            origin=int(d.get("origin", 0)),
            seed=int(d.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        d = {"model": self.model, "mode": self.mode, "seed": self.seed}
        if self.model == "bdp":
            d["sites"] = [{"mu": list(s.mu), "lam": list(s.lam)} for s in self.sites]
        else:
            d["laws"] = [{"support": {str(j): p for j, p in s.support().items()}}
                         for s in self.sites]
        if self.L is not None:
            d["L"] = self.L
        if self.R is not None:
            d["R"] = self.R
        if self.weights:
            d["weights"] = list(self.weights)
        if self.transition:
            d["transition"] = [list(r) for r in self.transition]
        if self.rate_range:
            d["rate_range"] = list(self.rate_range)
        if self.bounds:
            d["bounds"] = {"epsilon": self.bounds[0], "M": self.bounds[1]}
        if self.tail:
            d["tail"] = {"D": self.tail[0], "eps0": self.tail[1], "J": self.tail[2]}
        if self.origin:
            d["origin"] = self.origin
        return d

    @classmethod
    def from_json(cls, path) -> "EnvSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _stationary_distribution(transition) -> np.ndarray:
    P = np.asarray(transition, dtype=float)
    n = P.shape[0]
    A = P.T - np.eye(n)
    A[-1, :] = 1.0  # replace one equation with the normalization
    b = np.zeros(n)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    if (pi < -1e-12).any():
        raise ConfigError("modulating chain has no positive stationary law")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


class EnvironmentEnsemble:
    """Lazily materialized two-sided environment.

    Sites are immutable once materialized and the cache is internally
    synchronized, so ensembles are safe to share across threads.  ``shift``
    returns a view onto the same cache.
    """

    def __init__(self, spec: EnvSpec, master_seed: int, offset: int = 0, _shared=None):
        self.spec = spec
        self.master_seed = int(master_seed)
        self.offset = int(offset)
        if _shared is None:
            _shared = {"cache": {}, "lock": threading.Lock(), "hidden": {}}
            if spec.mode == "markov":
                _shared["stationary"] = _stationary_distribution(spec.transition)
                P = np.asarray(spec.transition, dtype=float)
                pi = _shared["stationary"]
                # time reversal keeps the two-sided modulating chain stationary
                rev = (P.T * pi[None, :])
                rev = rev / np.maximum(rev.sum(axis=1, keepdims=True), 1e-300)
                _shared["reversed"] = rev
            self._shared = _shared
        else:
            self._shared = _shared

    # -- identity ---------------------------------------------------------

    @property
    def model(self):
        return self.spec.model

    @property
    def mode(self):
        return self.spec.mode

    @property
    def L(self):
        if self.model == "bdp" and self.spec.sites:
            return self.spec.sites[0].L
        return self.spec.L

    @property
    def R(self):
        if self.model == "bdp" and self.spec.sites:
            return self.spec.sites[0].R
        return self.spec.R

    # -- site access ------------------------------------------------------

    def site(self, x: int):
        """Site data at absolute index ``x`` (in this view's coordinates)."""
        base = x + self.offset
        spec = self.spec
        if spec.mode == "homogeneous":
            return spec.sites[0]
        if spec.mode == "periodic":
            return spec.sites[base % len(spec.sites)]
        if spec.mode == "table":
            k = base - spec.origin
            if not 0 <= k < len(spec.sites):
                raise WindowExhaustionError(
                    f"site {base} outside the table window "
                    f"[{spec.origin}, {spec.origin + len(spec.sites) - 1}]")
            return spec.sites[k]
        cache = self._shared["cache"]
        hit = cache.get(base)
        if hit is not None:
            return hit
        with self._shared["lock"]:
            hit = cache.get(base)
            if hit is None:
                hit = self._draw_site(base)
                cache[base] = hit
        return hit

    def _draw_site(self, base: int):
        spec = self.spec
        if spec.mode == "iid":
            if spec.model == "bdp" and spec.rate_range:
                lo, hi = spec.rate_range
                L = spec.sites[0].L if spec.sites else spec.L
                R = spec.sites[0].R if spec.sites else spec.R
                us = counter_uniforms(self.master_seed, L + R, SITE_STREAM, base)
                rates = [lo + (hi - lo) * u for u in us]
                return SiteRates(tuple(rates[:L]), tuple(rates[L:]))
            u = counter_uniform(self.master_seed, SITE_STREAM, base)
            cum = self._shared.get("pool_cum")
            if cum is None and spec.weights:
                w = np.asarray(spec.weights, dtype=float)
                self._shared["pool_cum"] = cum = np.cumsum(w / w.sum()).tolist()
            if cum is not None:
                idx = min(bisect_right(cum, u), len(spec.sites) - 1)
            else:
                idx = min(int(u * len(spec.sites)), len(spec.sites) - 1)
            return spec.sites[idx]
        if spec.mode == "markov":
            return spec.sites[self._hidden_state(base)]
        raise ConfigError(f"mode {spec.mode!r} does not draw sites")

    def _hidden_state(self, base: int) -> int:
        """Modulating-chain state at ``base``; generated outward from 0."""
        hidden = self._shared["hidden"]
        if base in hidden:
            return hidden[base]
        if not hidden:
            pi = self._shared["stationary"]
            u = counter_uniform(self.master_seed, HIDDEN_STREAM, 0)
            hidden[0] = int(min(np.searchsorted(np.cumsum(pi), u, side="right"),
                                len(pi) - 1))
        P = np.asarray(self.spec.transition, dtype=float)
        rev = self._shared["reversed"]
        step = 1 if base > 0 else -1
        # walk from the nearest cached anchor toward base
        anchor = 0
        for k in hidden:
            if (step == 1 and 0 <= k <= base) or (step == -1 and base <= k <= 0):
                anchor = k if abs(k - base) < abs(anchor - base) else anchor
        x = anchor
        state = hidden[anchor]
        while x != base:
            nxt = x + step
            u = counter_uniform(self.master_seed, HIDDEN_STREAM, nxt)
            row = P[state] if step == 1 else rev[state]
            state = int(min(np.searchsorted(np.cumsum(row), u, side="right"),
                            len(row) - 1))
            hidden[nxt] = state
            x = nxt
        return hidden[base]

    # -- views and materialization ----------------------------------------

    def shifted(self, x: int) -> "EnvironmentEnsemble":
        return EnvironmentEnsemble(self.spec, self.master_seed,
                                   offset=self.offset + x, _shared=self._shared)

    def materialize(self, window) -> "EnvironmentEnsemble":
        a, b = window
        for x in range(a, b + 1):
            self.site(x)
        return self

    def sites_equal(self, other: "EnvironmentEnsemble", window) -> bool:
        a, b = window
        return all(self.site(x) == other.site(x) for x in range(a, b + 1))


# -- operations -----------------------------------------------------------


def sample_environment(spec: EnvSpec, seed: int, window=(0, 0)) -> EnvironmentEnsemble:
    """Materialize an ensemble over ``window``; pure in (spec, seed, window)."""
    if window[0] > window[1]:
        raise ConfigError(f"empty window {window}")
    env = EnvironmentEnsemble(spec, seed)
    env.materialize(window)
    return env


def shift(env: EnvironmentEnsemble, x: int) -> EnvironmentEnsemble:
    """View of ``env`` with the origin moved to ``x``: site(y) -> site(y + x)."""
    return env.shifted(x)


def validate_condition_C(env: EnvironmentEnsemble, eps: float, M: float,
                         window) -> ConditionReport:
    """Uniform ellipticity: every rate strictly inside (eps, M)."""
    if not eps < M:
        raise ConfigError("need eps < M")
    violations = []
    for x in range(window[0], window[1] + 1):
        site = env.site(x)
        for name, value in zip(
                [f"mu{l}" for l in range(1, site.L + 1)]
                + [f"lam{r}" for r in range(1, site.R + 1)],
                site.all_rates()):
            if not eps < value < M:
                violations.append((x, f"{name} outside ({eps}, {M})", float(value)))
    return ConditionReport("C2", not violations, violations)


def validate_condition_C2prime(env: EnvironmentEnsemble, kappa: float, K: float,
                               window) -> ConditionReport:
    """Weaker bound pair: one-step right rate above kappa, total rate below K."""
    violations = []
    for x in range(window[0], window[1] + 1):
        site = env.site(x)
        if not site.lam[0] > kappa:
            violations.append((x, f"lam1 not > {kappa}", float(site.lam[0])))
        if not site.total_rate < K:
            violations.append((x, f"total rate not < {K}", float(site.total_rate)))
    return ConditionReport("C2'", not violations, violations)


def validate_condition_B(law: RwreSiteLaw, eps: float, D: float,
                         eps0: float, site_index: int = 0) -> ConditionReport:
    """One-site check of the walk-law conditions: right-step mass above eps
    and every stored offset probability under the polynomial tail bound."""
    violations = []
    if not law.prob(1) > eps:
        violations.append((site_index, f"prob(+1) not > {eps}", law.prob(1)))
    for j, p in zip(law.offsets, law.probs):
        if j == 0:
            continue
        bound = D * abs(j) ** (-(3.0 + eps0))
        if not p < bound:
            violations.append((site_index, f"prob({j}) not < {bound:.6g}", p))
    return ConditionReport("B", not violations, violations)


def validate_condition_B_env(env: EnvironmentEnsemble, eps: float, D: float,
                             eps0: float, window) -> ConditionReport:
    violations = []
    for x in range(window[0], window[1] + 1):
        violations.extend(validate_condition_B(env.site(x), eps, D, eps0, x).violations)
    return ConditionReport("B", not violations, violations)


def embedded_jump_probs(site: SiteRates):
    """Jump distribution of the embedded chain: (p[1..R], q[1..L])."""
    q_total = site.total_rate
    if q_total <= 0:
        raise DegenerateSiteError("zero total rate")
    p = np.asarray(site.lam, dtype=float) / q_total
    q = np.asarray(site.mu, dtype=float) / q_total
    return p, q


def _growth_verdict(partial: np.ndarray) -> str:
    """Heuristic: does the partial-sum sequence keep a log-scale slope?"""
    n = len(partial)
    if n < 16:
        return "divergence consistent" if partial[-1] > partial[0] else \
            "divergence NOT observed"
    tail_growth = partial[-1] - partial[n // 2 - 1]
    head_growth = partial[n // 8 - 1] - partial[max(n // 16, 1) - 1]
    if tail_growth > 0 and tail_growth >= 0.5 * head_growth:
        return "divergence consistent"
    return "divergence NOT observed"


def check_nonexplosion(env: EnvironmentEnsemble, N: int) -> DivergenceReport:
    """Partial sums of the reciprocal-max-rate series toward both infinities.

    Divergence of both series rules out explosion of the jump process; the
    verdict only reports whether the observed growth is consistent with
    divergence.
    """
    if N < 1:
        raise ConfigError("need N >= 1")
    L, R = env.L, env.R
    right_terms = np.empty(N)
    left_terms = np.empty(N)
    for n in range(1, N + 1):
        right_terms[n - 1] = 1.0 / max(env.site(n * R - k).total_rate
                                       for k in range(1, R + 1))
    for depth, n in enumerate(range(0, -N, -1), start=0):
        left_terms[depth] = 1.0 / max(env.site(n * L - k).total_rate
                                      for k in range(1, L + 1))
    right = np.cumsum(right_terms)
    left = np.cumsum(left_terms)
    return DivergenceReport(
        depths=list(range(1, N + 1)),
        right_partial_sums=right.tolist(),
        left_partial_sums=left.tolist(),
        right_verdict=_growth_verdict(right),
        left_verdict=_growth_verdict(left),
    )


# -- CSV round trip -------------------------------------------------------


def dump_env_csv(env: EnvironmentEnsemble, path, window) -> None:
    """Write the materialized window to CSV for reproducibility."""
    a, b = window
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if env.model == "bdp":
            L, R = env.L, env.R
            writer.writerow(["site"] + [f"mu{l}" for l in range(1, L + 1)]
                            + [f"lam{r}" for r in range(1, R + 1)])
            for x in range(a, b + 1):
                s = env.site(x)
                writer.writerow([x] + [repr(v) for v in s.all_rates()])
        else:
            writer.writerow(["site", "offset", "prob"])
            for x in range(a, b + 1):
                law = env.site(x)
                for j, p in zip(law.offsets, law.probs):
                    writer.writerow([x, j, repr(p)])


def load_env_csv(path, model: str) -> EnvironmentEnsemble:
    """Load a dumped window back as a table-mode ensemble."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, rows = rows[0], rows[1:]
    if model == "bdp":
        L = sum(1 for h in header if h.startswith("mu"))
        sites_by_index = {}
        for row in rows:
            x = int(row[0])
            vals = [float(v) for v in row[1:]]
            sites_by_index[x] = SiteRates(tuple(vals[:L]), tuple(vals[L:]))
    elif model == "rwre":
        supports = {}
        for row in rows:
            supports.setdefault(int(row[0]), {})[int(row[1])] = float(row[2])
        sites_by_index = {x: make_law(s) for x, s in supports.items()}
    else:
        raise ConfigError(f"unknown model {model!r}")
    idx = sorted(sites_by_index)
    if idx != list(range(idx[0], idx[-1] + 1)):
        raise ConfigError("CSV window has gaps")
    L = sites_by_index[idx[0]].L if model == "bdp" else None
    R = sites_by_index[idx[0]].R if model == "bdp" else None
    spec = EnvSpec(model=model, mode="table",
                   sites=tuple(sites_by_index[x] for x in idx),
                   L=L, R=R, origin=idx[0])
    return EnvironmentEnsemble(spec, master_seed=0)
