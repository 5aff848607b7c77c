"""Closed-form Gaussian path for the two-stage solver.

For a standard normal source under squared error, Gaussian initial
marginals keep every iterate Gaussian, so the dual iteration reduces to a
three-parameter recursion (first-stage marginal variance, second-stage
conditional mean gain and variance) with all expectations in closed form.
No quadrature appears anywhere in this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .successive import LagrangeTriple, SrDualPoint, SrSurface, sr_envelope

__all__ = [
    "GaussParams",
    "m_factor",
    "gaussian_sr_step",
    "run_gaussian_sr",
    "demo_surface",
    "demo_rows",
    "DEMO_NU1",
    "DEMO_LAMBDA1",
    "DEMO_D1",
    "DEMO_R1",
]

# Demo configuration: first-stage slope pinned to distortion 0.9.
DEMO_NU1 = 1.0
DEMO_LAMBDA1 = 5.0 / 9.0
DEMO_D1 = 0.9
DEMO_R1 = -0.5 * math.log(0.9)


def m_factor(a: float, t: float) -> float:
    """exp(-a t / (1 + 2 t)) / sqrt(1 + 2 t), in (0, 1] for a, t >= 0.

    Closed form of E[exp(-t W)] for W noncentral chi-square with one degree
    of freedom and noncentrality a; the building block of both certificate
    functions.
    """
    if a < 0 or t < 0:
        raise ValidationError("m_factor needs a >= 0 and t >= 0")
    return math.exp(-a * t / (1 + 2 * t)) / math.sqrt(1 + 2 * t)


@dataclass(frozen=True)
class GaussParams:
    """One Gaussian iterate.

    The marginal state is (sigma1_sq, y2_y1_gain, sigma2g1_sq): Y1 is
    centered with variance sigma1_sq, and Y2 given Y1 = y is normal with
    mean y2_y1_gain * y and variance sigma2g1_sq. The remaining fields
    record the kernels of the step that produced the state: P(Y1 | X = x)
    is normal with mean y1_gain * x and variance y1_var, and the posterior
    P(X | Y1 = y) is normal with mean x_gain * y and variance x_var.
    """

    sigma1_sq: float = 1.0
    y2_y1_gain: float = 1.0
    sigma2g1_sq: float = 1.0
    t1: float = 0.0
    t2: float = 0.0
    y1_gain: float = 0.0
    y1_var: float = 1.0
    x_gain: float = 0.0
    x_var: float = 1.0

    def __post_init__(self):
        if min(self.sigma1_sq, self.sigma2g1_sq, self.y1_var, self.x_var) <= 0:
            raise ValidationError("variances must be > 0")
        if self.t1 < 0 or self.t2 < 0:
            raise ValidationError("tilt parameters must be >= 0")


def gaussian_sr_step(
    params: GaussParams, nu1: float, lambda1: float, lambda2: float
) -> tuple[GaussParams, float]:
    """One closed-form iteration; returns the new state and its dual value.

    The second-stage tilt gives t2 = lambda2 * Var(Y2|Y1); folding the
    tempered second-stage certificate into the first stage gives an
    effective quadratic tilt of the first-stage marginal whose strength is
    t1. The dual value is (1 + nu1) E[ln 1/beta1(X)] with E[X^2] = 1.
    """
    if nu1 < 0 or lambda1 < 0 or lambda2 < 0:
        raise ValidationError("slopes must be >= 0")
    s1 = params.sigma1_sq
    m = params.y2_y1_gain
    s2 = params.sigma2g1_sq
    scale = 1.0 + nu1

    t2 = lambda2 * s2
    c2 = lambda2 / ((1.0 + 2.0 * t2) * scale)
    c1 = lambda1 / scale
    quad = c1 + c2 * m * m
    cross = c1 + c2 * m
    t1 = quad * s1

    # log beta1(x) = log_c - gamma * x^2
    gamma = (c1 + c2) - 2.0 * s1 * cross * cross / (1.0 + 2.0 * t1)
    log_c = -math.log1p(2.0 * t2) / (2.0 * scale) - math.log1p(2.0 * t1) / 2.0
    f_value = scale * (-log_c + gamma)

    y1_var = s1 / (1.0 + 2.0 * t1)
    y1_gain = 2.0 * cross * s1 / (1.0 + 2.0 * t1)
    s1_new = y1_gain * y1_gain + y1_var
    x_gain = y1_gain / s1_new
    x_var = 1.0 - y1_gain * x_gain

    shrink = 1.0 / (1.0 + 2.0 * t2)
    m_new = (m + 2.0 * t2 * x_gain) * shrink
    s2_new = (2.0 * t2 * shrink) ** 2 * x_var + s2 * shrink

    new = GaussParams(
        sigma1_sq=s1_new,
        y2_y1_gain=m_new,
        sigma2g1_sq=s2_new,
        t1=t1,
        t2=t2,
        y1_gain=y1_gain,
        y1_var=y1_var,
        x_gain=x_gain,
        x_var=x_var,
    )
    return new, f_value


def run_gaussian_sr(
    nu1: float,
    lambda1: float,
    lambda2: float,
    iterations: int = 20,
    params: GaussParams | None = None,
) -> tuple[GaussParams, list[float]]:
    """Iterate the closed-form step; returns the final state and the
    nonincreasing trace of dual values."""
    if iterations < 1:
        raise ValidationError("iterations must be >= 1")
    if params is None:
        params = GaussParams()
    fs: list[float] = []
    for _ in range(iterations):
        params, f = gaussian_sr_step(params, nu1, lambda1, lambda2)
        fs.append(f)
    return params, fs


def demo_surface(
    lambda2s: np.ndarray | None = None, iterations: int = 20
) -> SrSurface:
    """Run the demo sweep and return the family of supporting hyperplanes.

    31 geometrically spaced second-stage slopes, first-stage slope 5/9
    (distortion 0.9) and nu1 = 1; the surface slice at
    (d1, R1) = (0.9, -0.5 ln 0.9) approximates 0.5 ln(1/d2).
    """
    if lambda2s is None:
        lambda2s = np.geomspace(0.5, 10.0, 31)
    duals = []
    for lam2 in np.asarray(lambda2s, dtype=float):
        _, fs = run_gaussian_sr(DEMO_NU1, DEMO_LAMBDA1, lam2, iterations)
        step = abs(fs[-1] - fs[-2]) if len(fs) > 1 else math.inf
        duals.append(
            SrDualPoint(
                LagrangeTriple(DEMO_NU1, DEMO_LAMBDA1, float(lam2)),
                fs[-1],
                step <= 1e-9,
                len(fs),
                step,
            )
        )
    return sr_envelope(duals)


def demo_rows(
    surface: SrSurface, d2_grid: np.ndarray | None = None
) -> list[tuple[float, float, float, float]]:
    """(d2, estimate, analytic, abs error) rows for the demo slice."""
    if d2_grid is None:
        d2_grid = np.linspace(0.1, 0.9, 50)
    rows = []
    for d2 in np.asarray(d2_grid, dtype=float):
        est = surface.evaluate(DEMO_D1, float(d2), DEMO_R1)
        truth = 0.5 * math.log(1.0 / d2)
        rows.append((float(d2), est, truth, abs(est - truth)))
    return rows
