"""Companion matrices of the site rates, their product Lyapunov spectrum,
and the transience/recurrence classification it implies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .environments import EnvironmentEnsemble, SiteRates
from .errors import ConfigError, DegenerateSiteError
from .reporting import Z99, batch_means_se
from .seeding import substream


@dataclass
class CompanionMatrix:
    """(L+R-1) square matrix in companion form for one site."""

    matrix: np.ndarray
    site_index: int


@dataclass
class LyapunovSpectrum:
    """Per-step log growth rates of the matrix products, ascending."""

    gammas: np.ndarray
    ses: np.ndarray
    n_products: int
    burn_in: int

    def gamma(self, rank: int) -> float:
        """rank-th smallest exponent, 1-based."""
        return float(self.gammas[rank - 1])

    def to_dict(self):
        return {"gammas": [float(g) for g in self.gammas],
                "ses": [float(s) for s in self.ses],
                "n": self.n_products, "burn_in": self.burn_in}


@dataclass
class Classification:
    """Transience verdict from the confidence interval of the deciding
    exponent (the R-th smallest)."""

    verdict: str
    gamma_R: float
    ci: tuple
    level: float

    def to_dict(self):
        return {"verdict": self.verdict, "gamma_R": self.gamma_R,
                "ci": [self.ci[0], self.ci[1]], "level": self.level}


def _b_values(site: SiteRates) -> np.ndarray:
    L, R = site.L, site.R
    mu_L = site.mu[-1]
    if mu_L <= 0:
        raise DegenerateSiteError("companion normalization needs mu_L > 0")
    b = np.empty(L + R - 1)
    for k in range(1, R + 1):
        b[k - 1] = sum(site.lam[j - 1] for j in range(R - k + 1, R + 1)) / mu_L
    for k in range(R + 1, R + L):
        b[k - 1] = -sum(site.mu[j - 1] for j in range(k - R, L + 1)) / mu_L
    return b


def build_A(site: SiteRates, site_index: int = 0) -> CompanionMatrix:
    """Companion matrix whose last row holds the rate ratios b(1..L+R-1)
    and whose leading rows are the shifted identity."""
    d = site.L + site.R - 1
    A = np.zeros((d, d))
    for r in range(d - 1):
        A[r, r + 1] = 1.0
    A[d - 1, :] = _b_values(site)
    return CompanionMatrix(matrix=A, site_index=site_index)


def lyapunov_spectrum(env: EnvironmentEnsemble, n_products: int,
                      burn_in: int = 1000, seed: int = 0,
                      n_batches: int = 50) -> LyapunovSpectrum:
    """Estimate the full spectrum by QR re-orthonormalization.

    The orthonormal frame is re-extracted after every factor, so the
    accumulated diagonal logs cannot overflow; standard errors come from
    batch means over the post-burn-in increments.
    """
    if n_products < burn_in + 100:
        raise ConfigError("need n_products >= burn_in + 100")
    d = env.L + env.R - 1
    rng = substream(seed, 7)
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    kept = np.empty((n_products - burn_in, d))
    for step in range(n_products):
        A = build_A(env.site(step + 1), step + 1).matrix
        Z = A @ Q
        Q, Rf = np.linalg.qr(Z)
        diag = np.diag(Rf)
        signs = np.sign(diag)
        signs[signs == 0] = 1.0
        Q = Q * signs
        if step >= burn_in:
            kept[step - burn_in] = np.log(np.abs(diag))
    means = np.empty(d)
    ses = np.empty(d)
    for col in range(d):
        means[col], ses[col] = batch_means_se(kept[:, col], n_batches)
    order = np.argsort(means)
    return LyapunovSpectrum(gammas=means[order], ses=ses[order],
                            n_products=n_products, burn_in=burn_in)


def classify(spectrum: LyapunovSpectrum, R: int, level: float = 0.99,
             atol: float = 1e-9) -> Classification:
    """Verdict from the confidence interval of the R-th smallest exponent.

    Strictly positive CI: transient-right; strictly negative: transient-left;
    CI within +-atol of zero: recurrent (exactly critical to numerical
    precision); anything else straddling zero: boundary-undetermined.
    """
    if len(spectrum.gammas) < R:
        raise ConfigError(f"spectrum has {len(spectrum.gammas)} exponents, need {R}")
    if not math.isclose(level, 0.99):
        raise ConfigError("only the 99% level is calibrated")
    g = spectrum.gamma(R)
    se = float(spectrum.ses[R - 1])
    lo, hi = g - Z99 * se, g + Z99 * se
    if max(abs(lo), abs(hi)) <= atol:
        verdict = "recurrent"  # critical to numerical precision
    elif lo > 0:
        verdict = "transient-right"
    elif hi < 0:
        verdict = "transient-left"
    else:
        verdict = "boundary-undetermined"
    return Classification(verdict=verdict, gamma_R=g, ci=(lo, hi), level=level)
