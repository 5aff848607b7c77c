"""Figure rendering for the CLI report paths.

Each helper takes the already-computed CSV rows and writes a PNG next to
the delimited output. matplotlib is imported lazily so data-only runs pay
nothing.
"""

from __future__ import annotations


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _finish(plt, fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_rd_curve(rows, path):
    """Reconstructed R(d) from a slope sweep: (lambda, F, iters, conv, d, R)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ds = [r[4] for r in rows]
    rates = [r[5] for r in rows]
    order = sorted(range(len(ds)), key=ds.__getitem__)
    ax.plot([ds[i] for i in order], [rates[i] for i in order], "o-", ms=3)
    ax.set_xlabel("distortion d")
    ax.set_ylabel("rate (nats)")
    ax.set_title("rate-distortion curve")
    _finish(plt, fig, path)


def plot_sr_slice(rows, path):
    """Second-stage rate against d2: (nu1, l1, l2, F, d1, d2, R1, R2)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    d2 = [r[5] for r in rows]
    r2 = [r[7] for r in rows]
    order = sorted(range(len(d2)), key=d2.__getitem__)
    ax.plot([d2[i] for i in order], [r2[i] for i in order], "o-", ms=3)
    ax.set_xlabel("second-stage distortion d2")
    ax.set_ylabel("total rate R2 (nats)")
    ax.set_title("successive-refinement slice")
    _finish(plt, fig, path)


def plot_gauss_demo(rows, path):
    """Estimate vs closed form: (d2, estimate, analytic, abs_error)."""
    plt = _pyplot()
    fig, (ax, ax_err) = plt.subplots(
        2, 1, figsize=(5, 4.6), sharex=True, height_ratios=[3, 1]
    )
    d2 = [r[0] for r in rows]
    ax.plot(d2, [r[2] for r in rows], "k-", lw=2.5, label="0.5 ln(1/d2)")
    ax.plot(d2, [r[1] for r in rows], "r--", lw=1.2, label="envelope estimate")
    ax.set_ylabel("R2 (nats)")
    ax.legend(frameon=False)
    ax_err.semilogy(d2, [max(r[3], 1e-16) for r in rows], "r-")
    ax_err.set_xlabel("d2")
    ax_err.set_ylabel("abs error")
    _finish(plt, fig, path)


def plot_converse(rows, path):
    """Bound curves against the rate: (n, M1, M2, g1, g2, eps1, eps2, method)."""
    import math

    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    log_m2 = [math.log(r[2]) for r in rows]
    eps2 = [r[6] for r in rows]
    ax.plot(log_m2, eps2, "o-", ms=3, label="eps2 lower bound")
    eps1 = [r[5] for r in rows if r[5] is not None]
    if len(eps1) == len(rows):
        ax.plot(log_m2, eps1, "s--", ms=3, label="eps1 lower bound")
    ax.set_xlabel("log M2 (nats)")
    ax.set_ylabel("excess-distortion probability")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False)
    _finish(plt, fig, path)


def plot_oracle(rows, path):
    """Iterative vs brute-force agreement scatter."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    it = [r[4] for r in rows]
    orc = [r[5] for r in rows]
    lo = min(it + orc, default=0.0)
    hi = max(it + orc, default=1.0)
    ax.plot([lo, hi], [lo, hi], "k-", lw=0.8)
    ax.plot(orc, it, "o", ms=4)
    ax.set_xlabel("grid oracle (nats)")
    ax.set_ylabel("iterative (nats)")
    ax.set_title("dual value agreement")
    _finish(plt, fig, path)
