"""Single-stage rate-distortion computation.

Alternating minimization over reproduction marginals and tilted kernels
yields the Lagrange dual F(lambda) of R(d); supporting lines at a sweep of
slopes reconstruct the curve, and the converged state certifies optimality
and produces per-realization tilted information.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateMarginal,
    InsufficientSlopes,
    NotConverged,
    OutOfRange,
    ValidationError,
)
from .probability import SUPPORT_CLAMP, Kernel, Pmf, _logsumexp, safe_log

__all__ = [
    "RdProblem",
    "BlahutState",
    "DualPoint",
    "RdCurve",
    "TiltedInfo",
    "OptimalityReport",
    "sigma_bar",
    "initial_state",
    "blahut_step",
    "run_blahut",
    "rd_envelope",
    "tilted_information",
    "verify_optimality",
    "slope_for_distortion",
    "DEFAULT_DELTA",
    "DEFAULT_MAX_ITERS",
]

DEFAULT_DELTA = 1e-9
DEFAULT_MAX_ITERS = 10_000


@dataclass(frozen=True, eq=False)
class RdProblem:
    """A source pmf together with a finite nonnegative distortion matrix."""

    px: Pmf
    distortion: np.ndarray

    def __init__(self, px: Pmf, distortion):
        d = np.asarray(distortion, dtype=float).copy()
        if d.ndim != 2 or d.shape[0] != px.size:
            raise ValidationError("distortion matrix shape does not match source")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValidationError("distortion entries must be finite and >= 0")
        d.flags.writeable = False
        object.__setattr__(self, "px", px)
        object.__setattr__(self, "distortion", d)

    @property
    def n_source(self) -> int:
        return self.distortion.shape[0]

    @property
    def n_repro(self) -> int:
        return self.distortion.shape[1]

    def expected_distortion(self, kernel: Kernel) -> float:
        return float(self.px.probs @ np.sum(kernel.rows * self.distortion, axis=1))

    def d_min(self) -> float:
        """Smallest achievable average distortion."""
        return float(self.px.probs @ self.distortion.min(axis=1))

    def d_max(self) -> float:
        """Average distortion of the best constant reproduction; R(d) = 0 beyond."""
        return float((self.px.probs @ self.distortion).min())


@dataclass(frozen=True, eq=False)
class BlahutState:
    """One iterate: output marginal, tilted kernel, and the dual value that
    produced them."""

    iteration: int
    py: Pmf
    kernel: Kernel
    f_value: float
    lam: float


@dataclass(frozen=True)
class DualPoint:
    """A slope with its converged dual value F(lambda)."""

    lam: float
    f_value: float
    converged: bool
    iterations_used: int
    gap_bound: float


@dataclass(frozen=True, eq=False)
class RdCurve:
    """Sampled (d, R) points on the reconstructed curve, in problem units
    and nats."""

    ds: np.ndarray
    rates: np.ndarray
    d_min: float
    d_max: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.ds.tolist(), self.rates.tolist()))

    def evaluate(self, d: float) -> float:
        return float(np.interp(d, self.ds, self.rates))

    def is_convex_nonincreasing(self, tol: float = 1e-9) -> bool:
        """Finite-difference shape check used by the property tests."""
        dd = np.diff(self.ds)
        if np.any(dd <= 0):
            return False
        slopes = np.diff(self.rates) / dd
        return bool(np.all(slopes <= tol) and np.all(np.diff(slopes) >= -tol))


@dataclass(frozen=True, eq=False)
class TiltedInfo:
    """Per-source-realization information content at a point on the curve."""

    alpha_star: np.ndarray
    lam_star: float
    values: np.ndarray
    mean: float
    variance: float


@dataclass(frozen=True, eq=False)
class OptimalityReport:
    """Per-reproduction constraint values E[exp(-lambda d(X, y)) / alpha(X)].

    Passing requires every value at most 1 + tol and every on-support value
    at least 1 - tol.
    """

    constraint_values: np.ndarray
    support: np.ndarray
    tol: float
    max_constraint: float
    min_on_support: float
    passes: bool


def _log_sigma_bar(problem: RdProblem, lam: float, log_py: np.ndarray) -> np.ndarray:
    # lam * d may overflow to +inf for extreme slopes; -inf then encodes an
    # unreachable reproduction, which the degeneracy checks pick up.
    with np.errstate(over="ignore"):
        shifted = log_py[None, :] - lam * problem.distortion
    return _logsumexp(shifted, axis=1)


def sigma_bar(problem: RdProblem, lam: float, py: Pmf) -> np.ndarray:
    """E[exp(-lambda d(x, Y))] under Y ~ py, one entry per source symbol.

    Values lie in (0, 1] because distortions are nonnegative.
    """
    if lam < 0:
        raise ValidationError("slope must be >= 0")
    if py.size != problem.n_repro:
        raise ValidationError("marginal size does not match reproduction alphabet")
    return np.exp(_log_sigma_bar(problem, lam, py.log()))


def initial_state(problem: RdProblem, lam: float, init: Pmf | None = None) -> BlahutState:
    """Iteration-zero state; the kernel is the product coupling with ``init``."""
    if init is None:
        init = Pmf.uniform(problem.n_repro)
    kernel = Kernel(np.tile(init.probs, (problem.n_source, 1)))
    return BlahutState(0, init, kernel, math.inf, lam)


def blahut_step(problem: RdProblem, state: BlahutState) -> BlahutState:
    """One alternating-minimization update.

    The new kernel row at x is the previous marginal tilted by
    exp(-lambda d(x, .)); the new marginal is its px-average; the recorded
    dual value is E[ln 1 / sigma(X)] against the previous marginal and never
    exceeds the previous value.
    """
    lam = state.lam
    log_py = state.py.log()
    log_sigma = _log_sigma_bar(problem, lam, log_py)
    active_x = problem.px.probs > 0
    if np.any(log_sigma[active_x] == -np.inf):
        raise DegenerateMarginal(
            "no reproduction mass reachable from some source symbol; "
            "slope too large for this grid"
        )
    f_value = float(-(problem.px.probs[active_x] @ log_sigma[active_x])) + 0.0

    log_kernel = log_py[None, :] - lam * problem.distortion - log_sigma[:, None]
    kernel = np.exp(log_kernel)
    kernel /= kernel.sum(axis=1, keepdims=True)

    py_new = problem.px.probs @ kernel
    py_new[py_new < SUPPORT_CLAMP] = 0.0
    total = py_new.sum()
    if total <= 0:
        raise DegenerateMarginal("all output mass collapsed below the clamp threshold")
    py_new /= total

    return BlahutState(state.iteration + 1, Pmf(py_new), Kernel(kernel), f_value, lam)


def _stopping_gap(py_new: Pmf, py_old: Pmf) -> float:
    """sup over retained support of ln(d new / d old); support only shrinks."""
    mask = py_new.support
    return float(np.max(np.log(py_new.probs[mask]) - np.log(py_old.probs[mask])))


def _run_raw(problem: RdProblem, lam: float, py0: np.ndarray, max_iters: int, delta: float):
    """Trace-free iteration loop on bare arrays; same math as blahut_step."""
    px = problem.px.probs
    active = px > 0
    with np.errstate(over="ignore"):
        weights = lam * problem.distortion
    py = py0.copy()
    log_py = safe_log(py)
    gap = math.inf
    converged = False
    iterations = 0
    f_value = math.inf
    kernel = None
    for k in range(1, max_iters + 1):
        shifted = log_py[None, :] - weights
        peak = shifted.max(axis=1)
        if np.any(peak[active] == -np.inf):
            raise DegenerateMarginal(
                "no reproduction mass reachable from some source symbol; "
                "slope too large for this grid"
            )
        log_sigma = peak + np.log(np.exp(shifted - peak[:, None]).sum(axis=1))
        f_value = float(-(px[active] @ log_sigma[active])) + 0.0
        kernel = np.exp(shifted - log_sigma[:, None])
        kernel /= kernel.sum(axis=1, keepdims=True)
        py_new = px @ kernel
        py_new[py_new < SUPPORT_CLAMP] = 0.0
        total = py_new.sum()
        if total <= 0:
            raise DegenerateMarginal("all output mass collapsed below the clamp threshold")
        py_new /= total
        mask = py_new > 0
        log_py_new = safe_log(py_new)
        gap = float(np.max(log_py_new[mask] - log_py[mask]))
        py, log_py = py_new, log_py_new
        iterations = k
        if gap <= delta:
            converged = True
            break
    state = BlahutState(iterations, Pmf(py), Kernel(kernel), f_value, lam)
    return state, gap, converged, iterations


def run_blahut(
    problem: RdProblem,
    lam: float,
    init: Pmf | None = None,
    max_iters: int = DEFAULT_MAX_ITERS,
    delta: float = DEFAULT_DELTA,
    keep_trace: bool = True,
) -> tuple[DualPoint, list[BlahutState]]:
    """Iterate to the dual value F(lambda) with a sup-log-ratio stopping rule.

    Stops once the largest log-ratio between consecutive marginals drops to
    ``delta``, which guarantees the returned value overshoots F(lambda) by at
    most ``delta``; otherwise runs ``max_iters`` iterations. The trace of
    dual values is nonincreasing.

    Returns the dual point and the list of visited states (only the final
    state when ``keep_trace`` is false).
    """
    if lam < 0:
        raise ValidationError("slope must be >= 0")
    if max_iters < 1:
        raise ValidationError("max_iters must be >= 1")
    if delta <= 0:
        raise ValidationError("delta must be > 0")
    if init is None:
        init = Pmf.uniform(problem.n_repro)
    if np.any(init.probs == 0):
        raise ValidationError("initial marginal must have full support")
    if not keep_trace:
        state, gap, converged, iterations = _run_raw(
            problem, lam, init.probs, max_iters, delta
        )
        return DualPoint(lam, state.f_value, converged, iterations, gap), [state]
    state = initial_state(problem, lam, init)
    trace: list[BlahutState] = []
    gap = math.inf
    converged = False
    iterations = 0
    for _ in range(max_iters):
        new_state = blahut_step(problem, state)
        iterations = new_state.iteration
        trace.append(new_state)
        gap = _stopping_gap(new_state.py, state.py)
        state = new_state
        if gap <= delta:
            converged = True
            break
    dual = DualPoint(lam, state.f_value, converged, iterations, gap)
    return dual, trace


def rd_envelope(
    duals: list[DualPoint],
    d_grid: np.ndarray | None = None,
    include_zero_line: bool = True,
) -> RdCurve:
    """Upper envelope of the supporting lines F(lambda) - lambda d.

    The exact zero-slope line (F(0) = 0) is always available and is included
    by default; it floors the curve at zero beyond the largest distortion of
    interest. At least two distinct slopes must be present overall.
    """
    if not duals:
        raise InsufficientSlopes("no dual points supplied")
    lams = [dp.lam for dp in duals]
    fs = [dp.f_value for dp in duals]
    if include_zero_line and not any(l == 0.0 for l in lams):
        lams.append(0.0)
        fs.append(0.0)
    lams_arr = np.asarray(lams)
    fs_arr = np.asarray(fs)
    distinct = np.unique(lams_arr)
    if distinct.size < 2 and not (distinct.size == 1 and distinct[0] == 0.0):
        raise InsufficientSlopes("need at least two distinct slopes")

    nonzero = lams_arr > 0
    if np.any(nonzero):
        d_max_est = float(np.max(fs_arr[nonzero] / lams_arr[nonzero]))
    else:
        d_max_est = 1.0
    if np.count_nonzero(nonzero) >= 2:
        order = np.argsort(lams_arr)[::-1]
        la, lb = lams_arr[order[0]], lams_arr[order[1]]
        fa, fb = fs_arr[order[0]], fs_arr[order[1]]
        d_min_est = max(0.0, float((fa - fb) / (la - lb))) if la > lb else 0.0
    else:
        d_min_est = 0.0

    if d_grid is None:
        hi = d_max_est if d_max_est > d_min_est else d_min_est + 1.0
        d_grid = np.linspace(d_min_est, hi, 101)
    else:
        d_grid = np.asarray(d_grid, dtype=float)
    rates = np.max(fs_arr[None, :] - np.outer(d_grid, lams_arr), axis=1)
    if include_zero_line:
        rates = np.maximum(rates, 0.0)
    return RdCurve(d_grid, rates, d_min_est, d_max_est)


def tilted_information(
    problem: RdProblem,
    dual: DualPoint,
    final_state: BlahutState,
    d: float,
) -> TiltedInfo:
    """Per-realization tilted information -ln alpha(x) - lambda d at a point
    where ``dual.lam`` supports the curve.

    Its mean reproduces the envelope value F(lambda) - lambda d up to twice
    the stopping accuracy.
    """
    if not dual.converged:
        raise NotConverged("dual point did not converge")
    alpha = sigma_bar(problem, dual.lam, final_state.py)
    values = -safe_log(alpha) - dual.lam * d
    mean = float(problem.px.probs @ values)
    variance = float(problem.px.probs @ (values - mean) ** 2)
    return TiltedInfo(alpha, dual.lam, values, mean, variance)


def verify_optimality(
    problem: RdProblem,
    dual: DualPoint,
    final_state: BlahutState,
    tol: float = 10 * DEFAULT_DELTA,
) -> OptimalityReport:
    """Check the per-reproduction feasibility constraints at the converged
    marginal.

    All constraint values must stay below 1 + tol, and values on the support
    of the final marginal must reach 1 - tol; early-stopped runs fail one of
    the two.
    """
    log_alpha = _log_sigma_bar(problem, dual.lam, final_state.py.log())
    log_px = problem.px.log()
    log_c = _logsumexp(
        log_px[:, None] - dual.lam * problem.distortion - log_alpha[:, None], axis=0
    )
    c = np.exp(log_c)
    support = final_state.py.support
    max_constraint = float(np.max(c))
    min_on_support = float(np.min(c[support])) if np.any(support) else math.nan
    passes = bool(max_constraint <= 1 + tol and min_on_support >= 1 - tol)
    return OptimalityReport(c, support, tol, max_constraint, min_on_support, passes)


def slope_for_distortion(
    problem: RdProblem,
    d: float,
    delta: float = 1e-10,
    max_iters: int = DEFAULT_MAX_ITERS,
    d_tol: float = 1e-9,
) -> tuple[float, DualPoint, BlahutState]:
    """Bisect for the slope whose converged run has average distortion ``d``.

    The tangency distortion is nonincreasing in the slope, so plain bisection
    applies. Raises :class:`OutOfRange` outside (d_min, d_max).
    """
    if not (problem.d_min() < d < problem.d_max()):
        raise OutOfRange(
            f"target distortion {d} outside ({problem.d_min()}, {problem.d_max()})"
        )

    def tangency(lam: float):
        dual, trace = run_blahut(
            problem, lam, max_iters=max_iters, delta=delta, keep_trace=False
        )
        state = trace[-1]
        return problem.expected_distortion(state.kernel), dual, state

    lo, hi = 0.0, 1.0
    d_hi, dual_hi, state_hi = tangency(hi)
    while d_hi > d:
        lo = hi
        hi *= 2.0
        if hi > 2.0**60:
            raise OutOfRange("no finite slope reaches the target distortion")
        d_hi, dual_hi, state_hi = tangency(hi)
    best = (hi, dual_hi, state_hi, d_hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        d_mid, dual_mid, state_mid = tangency(mid)
        if abs(d_mid - d) < abs(best[3] - d):
            best = (mid, dual_mid, state_mid, d_mid)
        if abs(d_mid - d) <= d_tol:
            break
        if d_mid > d:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    lam, dual, state, _ = best
    return lam, dual, state
