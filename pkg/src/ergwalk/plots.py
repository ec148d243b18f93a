"""Figure rendering for the CLI report path.

Every figure is drawn from the same rows that go to CSV, with the Agg
backend and fixed metadata so repeated runs produce identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_SAVE = {"dpi": 150, "metadata": {"Software": "ergwalk"}}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def render_tailcheck(report: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    m = report["m"]
    freq = report["freq"]
    se = report["se"]
    ax.errorbar(m, freq, yerr=[3 * s for s in se], fmt="o", capsize=3,
                label="empirical tail (3 SE)")
    ax.plot(m, report["bound"], "r--", label="exponential bound")
    ax.set_yscale("log")
    ax.set_xlabel("jump size m")
    ax.set_ylabel("P(|X1 - X0| >= m)")
    ax.set_title(f"skeleton jump tail, h={report['h']}")
    ax.legend()
    _finish(fig, path)


def render_hconsistency(report: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    hs = [r["h"] for r in report["rows"]]
    vals = [r["v_h_over_h"] for r in report["rows"]]
    errs = [3 * r["se_over_h"] for r in report["rows"]]
    ax.errorbar(hs, vals, yerr=errs, fmt="o", capsize=3)
    ax.set_xscale("log")
    ax.set_xlabel("mesh h")
    ax.set_ylabel("skeleton velocity / h")
    ax.set_title("mesh consistency (3 SE bars)")
    _finish(fig, path)


def render_path(rows, path, model: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = [r[0] for r in rows]
    ys = [r[1] for r in rows]
    if model == "bdp":
        ax.step(xs, ys, where="post", lw=0.8)
        ax.set_xlabel("time")
    else:
        ax.plot(xs, ys, lw=0.8)
        ax.set_xlabel("step")
    ax.set_ylabel("state")
    ax.set_title("sample path")
    _finish(fig, path)


def render_velocity(values, report: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(values, bins=min(50, max(10, len(values) // 10)), color="steelblue")
    v, se = report["velocity"], report["se"]
    ax.axvline(v, color="k", label=f"mean {v:.6g}")
    if se == se and se > 0:  # not NaN
        ax.axvline(v - 3 * se, color="k", ls=":")
        ax.axvline(v + 3 * se, color="k", ls=":", label="3 SE")
    ax.set_xlabel("per-replica velocity")
    ax.set_ylabel("count")
    ax.set_title(f"velocity replicas ({report['method']})")
    ax.legend()
    _finish(fig, path)


def render_compare(report: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    names = [report["first"]["method"], report["second"]["method"]]
    vals = [report["first"]["velocity"], report["second"]["velocity"]]
    errs = [3 * (report["first"]["se"] or 0.0), 3 * (report["second"]["se"] or 0.0)]
    ax.errorbar([0, 1], vals, yerr=errs, fmt="o", capsize=4)
    ax.set_xticks([0, 1], names)
    ax.set_xlim(-0.5, 1.5)
    ax.set_ylabel("velocity")
    ax.set_title(f"agreement: {report['sigma']:.2f} combined SE")
    _finish(fig, path)
