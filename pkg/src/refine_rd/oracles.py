"""Ground-truth generators for tests and validation reports.

Analytic rate-distortion formulas for the two classical cases, plus
brute-force minimization of the dual objectives over simplex grids of
output marginals. The grid search deliberately shares no code with the
iterative solvers, so agreement between the two is evidence rather than
tautology.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import OutOfRange, TooLarge, ValidationError
from .probability import Pmf, _logsumexp
from .single_stage import RdProblem
from .successive import LagrangeTriple, SrProblem

__all__ = [
    "OracleResult",
    "analytic_rd",
    "binary_entropy",
    "binary_hamming_slope",
    "binary_hamming_distortion",
    "binary_hamming_marginal",
    "binary_hamming_dual",
    "gaussian_dual",
    "brute_force_dual",
    "brute_force_sr_dual",
]


@dataclass(frozen=True)
class OracleResult:
    value: float
    method: str
    resolution: float | None = None


def binary_entropy(p: float) -> float:
    """Entropy of a Bernoulli(p) in nats."""
    if p <= 0 or p >= 1:
        return 0.0
    return float(-p * math.log(p) - (1 - p) * math.log(1 - p))


def binary_hamming_slope(d: float) -> float:
    """Magnitude of the curve slope at distortion d for Hamming distortion."""
    if not 0 < d < 0.5:
        raise OutOfRange("distortion must be in (0, 0.5)")
    return math.log((1 - d) / d)


def binary_hamming_distortion(lam: float) -> float:
    """Tangency distortion of slope lam, the inverse of the map above."""
    return 1.0 / (1.0 + math.exp(lam))


def binary_hamming_marginal(p: float, d: float) -> Pmf:
    """Optimal reproduction distribution for a Bernoulli(p) source at
    distortion d < min(p, 1-p); the backward channel is a symmetric flip."""
    if not 0 < d < min(p, 1 - p):
        raise OutOfRange("distortion outside the interior region")
    q = (p - d) / (1 - 2 * d)
    return Pmf(np.array([q, 1 - q]))


def binary_hamming_dual(p: float, lam: float) -> float:
    """Dual value F(lam) for a Bernoulli(p) source under Hamming distortion."""
    if lam < 0:
        raise OutOfRange("slope must be >= 0")
    if lam == 0:
        return 0.0
    d = binary_hamming_distortion(lam)
    d_max = min(p, 1 - p)
    if d >= d_max:
        return lam * d_max
    return binary_entropy(p) - binary_entropy(d) + lam * d


def gaussian_dual(lam: float, variance: float = 1.0) -> float:
    """Dual value F(lam) for a Gaussian source under squared error."""
    if lam < 0:
        raise OutOfRange("slope must be >= 0")
    d = 1.0 / (2.0 * lam) if lam > 0 else math.inf
    if d >= variance:
        return lam * variance
    return 0.5 * math.log(variance / d) + lam * d


def analytic_rd(kind: str, d: float, p: float | None = None) -> float:
    """Closed-form R(d) in nats.

    kind "binary_hamming" needs the source bias p and returns h(p) - h(d);
    kind "gaussian_mse" returns 0.5 ln(1/d) for a unit-variance source.
    Rates clamp to zero beyond the zero-rate distortion.
    """
    if d <= 0:
        raise OutOfRange("distortion must be > 0")
    if kind == "binary_hamming":
        if p is None or not 0 < p < 1:
            raise OutOfRange("binary source needs a bias p in (0, 1)")
        if d >= min(p, 1 - p):
            return 0.0
        return binary_entropy(p) - binary_entropy(d)
    if kind == "gaussian_mse":
        if d >= 1.0:
            return 0.0
        return 0.5 * math.log(1.0 / d)
    raise ValidationError(f"unknown oracle kind {kind!r}")


def _simplex_grid(n: int, steps: int) -> np.ndarray:
    """All probability vectors over n symbols with masses k/steps."""
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        k = np.arange(steps + 1)
        return np.column_stack([k, steps - k]) / steps
    if n == 3:
        i, j = np.meshgrid(np.arange(steps + 1), np.arange(steps + 1), indexing="ij")
        keep = i + j <= steps
        return np.column_stack([i[keep], j[keep], steps - i[keep] - j[keep]]) / steps
    raise TooLarge("simplex grid supports at most 3 symbols")


def brute_force_dual(problem: RdProblem, lam: float, grid_steps: int = 1000) -> OracleResult:
    """Grid minimum of the dual objective over output marginals.

    For each candidate marginal the inner minimization over kernels has the
    closed form E[ln 1/sigma(X)], so the search space is only the simplex.
    The reported minimum overshoots the truth by O(1/grid_steps) at worst.
    """
    if problem.n_source > 3 or problem.n_repro > 3:
        raise TooLarge("brute force limited to 3x3 problems")
    if grid_steps < 50:
        raise ValidationError("grid_steps must be >= 50")
    if lam < 0:
        raise ValidationError("slope must be >= 0")
    if lam == 0:
        return OracleResult(0.0, "grid", 1.0 / grid_steps)
    candidates = _simplex_grid(problem.n_repro, grid_steps)
    weights = lam * problem.distortion
    if weights.max() < 600.0:
        # no underflow risk: one matmul over the whole simplex grid
        sigma = candidates @ np.exp(-weights).T
        with np.errstate(divide="ignore"):
            log_sigma = np.log(sigma)
    else:
        with np.errstate(divide="ignore"):
            log_q = np.log(candidates)
        log_sigma = _logsumexp(log_q[:, None, :] - weights[None, :, :], axis=2)
    values = -(log_sigma @ problem.px.probs)
    return OracleResult(float(np.min(values)), "grid", 1.0 / grid_steps)


def brute_force_sr_dual(
    problem: SrProblem, triple: LagrangeTriple, grid_steps: int = 60
) -> OracleResult:
    """Grid minimum of the two-stage dual objective.

    Searches the first-stage marginal and both rows of the second-stage
    conditional on binary grids, evaluating the closed-form inner value
    (1 + nu1) E[ln 1/beta1(X)] at each combination.
    """
    if problem.n_source != 2 or problem.n_first != 2 or problem.n_second != 2:
        raise TooLarge("two-stage brute force limited to 2x2x2 problems")
    if grid_steps < 30:
        raise ValidationError("grid_steps must be >= 30")
    nu1, lam1, lam2 = triple.nu1, triple.lambda1, triple.lambda2
    scale = 1.0 + nu1
    px = problem.px.probs
    t = np.arange(grid_steps + 1) / grid_steps

    # beta2 value for a conditional row with mass r on y2 = 0, per source x
    e2 = np.exp(-lam2 * problem.d2_matrix)  # (nx, 2)
    b2 = np.outer(t, e2[:, 0]) + np.outer(1 - t, e2[:, 1])  # (g+1, nx)
    pw = b2 ** (1.0 / scale)

    e1 = np.exp(-lam1 * problem.d1_matrix / scale)  # (nx, 2)
    # candidate axes: a = P(y1=0), r0 = row of y1=0, r1 = row of y1=1
    a = t[:, None, None, None]
    term0 = (pw * e1[:, 0])[None, :, None, :]  # varies with r0
    term1 = (pw * e1[:, 1])[None, None, :, :]  # varies with r1
    beta1 = a * term0 + (1 - a) * term1  # (g+1, g+1, g+1, nx)
    with np.errstate(divide="ignore"):
        values = scale * -(np.log(beta1) @ px)
    return OracleResult(float(np.min(values)), "grid", 1.0 / grid_steps)
