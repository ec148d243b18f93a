"""Estimator summaries, report objects, and canonical serialization."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

Z99 = 2.5758293035489004  # two-sided 99% normal quantile


def mean_and_se(values) -> tuple:
    """Sample mean and standard error for independent replicas."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), math.inf
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def batch_means_se(series, n_batches: int = 50) -> tuple:
    """Mean and batch-means standard error for a correlated series."""
    v = np.asarray(series, dtype=float)
    n_batches = max(2, min(n_batches, v.size))
    usable = (v.size // n_batches) * n_batches
    if usable == 0:
        return mean_and_se(v)
    batches = v[:usable].reshape(n_batches, -1).mean(axis=1)
    mean = float(v.mean())
    se = float(batches.std(ddof=1) / math.sqrt(n_batches))
    return mean, se


def binomial_se(p_hat: float, n: int) -> float:
    return math.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / n) if n > 0 else math.inf


def ratio_mean_se(numerators, denominators) -> tuple:
    """Delta-method mean and SE for mean(num)/mean(den) over paired draws."""
    num = np.asarray(numerators, dtype=float)
    den = np.asarray(denominators, dtype=float)
    n = num.size
    ratio = float(num.mean() / den.mean())
    if n < 2:
        return ratio, 0.0 if n == 1 else math.inf
    dbar = den.mean()
    cov = np.cov(num, den, ddof=1)
    var = (cov[0, 0] - 2 * ratio * cov[0, 1] + ratio**2 * cov[1, 1]) / (n * dbar**2)
    return ratio, float(math.sqrt(max(var, 0.0)))


@dataclass
class VelocityReport:
    """Velocity estimate with its uncertainty and audit diagnostics."""

    velocity: float
    se: float
    method: str
    replicas: int = 0
    seed: int = 0
    truncations: int = 0
    verdict: str = "ok"            # "ok" | "zero-or-undefined"
    params: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    values: list = field(default=None, repr=False)  # per-replica, not serialized

    def to_dict(self) -> dict:
        return to_jsonable({
            "velocity": self.velocity,
            "se": self.se,
            "method": self.method,
            "replicas": self.replicas,
            "seed": self.seed,
            "truncations": self.truncations,
            "verdict": self.verdict,
            "params": self.params,
            "diagnostics": self.diagnostics,
        })


def to_jsonable(obj):
    """Recursively convert numpy scalars/arrays so json round-trips exactly."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def write_json_report(path, payload: dict) -> None:
    """Canonical JSON: sorted keys, fixed layout, trailing newline."""
    text = json.dumps(to_jsonable(payload), sort_keys=True, indent=2)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def write_csv(path, header, rows) -> None:
    """CSV with full-precision floats (repr) for bit-stable diffs."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(x) if isinstance(x, float) else x for x in row])
