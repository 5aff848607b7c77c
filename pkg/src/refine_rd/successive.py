"""Two-stage (successive refinement) rate-distortion computation.

Generalizes the alternating-minimization dual solver to a pair of
reproduction stages: certificate functions beta1/beta2 are recomputed from
the current marginals, kernels are tilted against them, and the dual value
F(nu1, lambda1, lambda2) decreases monotonically. Supporting hyperplanes at
a sweep of slope triples reconstruct the second-stage rate surface
R2(d1, d2, R1). A closed-form certificate built from the two single-stage
solutions detects successive refinability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConstraintViolated,
    DegenerateMarginal,
    InsufficientSlopes,
    NotConverged,
    ValidationError,
)
from .probability import (
    SUPPORT_CLAMP,
    Kernel,
    Pmf,
    _logsumexp,
    mutual_information,
    safe_log,
)
from .single_stage import (
    DEFAULT_DELTA,
    DEFAULT_MAX_ITERS,
    RdProblem,
    sigma_bar,
    slope_for_distortion,
)

__all__ = [
    "SrProblem",
    "LagrangeTriple",
    "SrState",
    "SrDualPoint",
    "SrSurface",
    "SrTiltedInfo",
    "SrOptimalityReport",
    "OmegaReport",
    "MarkovReport",
    "RefinableConstruction",
    "initial_sr_state",
    "update_betas",
    "update_kernels",
    "run_sr_blahut",
    "tangency_coordinates",
    "sr_envelope",
    "verify_sr_optimality",
    "sr_tilted_information",
    "refinable_construction",
]


@dataclass(frozen=True, eq=False)
class SrProblem:
    """Source pmf with one distortion matrix per refinement stage."""

    px: Pmf
    d1_matrix: np.ndarray
    d2_matrix: np.ndarray

    def __init__(self, px: Pmf, d1_matrix, d2_matrix):
        d1 = np.asarray(d1_matrix, dtype=float).copy()
        d2 = np.asarray(d2_matrix, dtype=float).copy()
        for name, d in (("d1", d1), ("d2", d2)):
            if d.ndim != 2 or d.shape[0] != px.size:
                raise ValidationError(f"{name} matrix shape does not match source")
            if not np.all(np.isfinite(d)) or np.any(d < 0):
                raise ValidationError(f"{name} entries must be finite and >= 0")
        d1.flags.writeable = False
        d2.flags.writeable = False
        object.__setattr__(self, "px", px)
        object.__setattr__(self, "d1_matrix", d1)
        object.__setattr__(self, "d2_matrix", d2)

    @property
    def n_source(self) -> int:
        return self.d1_matrix.shape[0]

    @property
    def n_first(self) -> int:
        return self.d1_matrix.shape[1]

    @property
    def n_second(self) -> int:
        return self.d2_matrix.shape[1]

    def stage1(self) -> RdProblem:
        return RdProblem(self.px, self.d1_matrix)

    def stage2(self) -> RdProblem:
        return RdProblem(self.px, self.d2_matrix)


@dataclass(frozen=True)
class LagrangeTriple:
    """Slopes (nu1, lambda1, lambda2) of a supporting hyperplane."""

    nu1: float
    lambda1: float
    lambda2: float

    def __post_init__(self):
        if self.nu1 < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("all slopes must be >= 0")


@dataclass(frozen=True, eq=False)
class SrState:
    """One iterate of the two-stage solver.

    ``beta1``/``beta2`` are the certificate functions computed from the
    previous iterate's marginals; ``f_value`` is the dual value they induce.
    ``k2`` is indexed (x, y1, y2) and row-stochastic over y2.
    """

    iteration: int
    py1: Pmf
    py2_given_y1: Kernel
    k1: Kernel
    k2: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    f_value: float


@dataclass(frozen=True)
class SrDualPoint:
    triple: LagrangeTriple
    f_value: float
    converged: bool
    iterations_used: int
    gap_bound: float


@dataclass(frozen=True, eq=False)
class OmegaReport:
    """Membership evidence for the all-constraints-binding region."""

    value: float
    active_triple: LagrangeTriple
    decreasing_in_d1: bool
    decreasing_in_d2: bool
    decreasing_in_r1: bool
    in_omega: bool


@dataclass(frozen=True, eq=False)
class SrSurface:
    """Upper envelope of supporting hyperplanes to R2(d1, d2, R1)."""

    lines: list[tuple[LagrangeTriple, float]]

    def __post_init__(self):
        if not self.lines:
            raise InsufficientSlopes("surface needs at least one dual point")

    def _values(self, d1: float, d2: float, r1: float) -> np.ndarray:
        return np.array(
            [
                f - t.nu1 * r1 - t.lambda1 * d1 - t.lambda2 * d2
                for t, f in self.lines
            ]
        )

    def evaluate(self, d1: float, d2: float, r1: float) -> float:
        """Lower bound on R2 at the point; exact in the dense-sampling limit."""
        return max(float(np.max(self._values(d1, d2, r1))), 0.0)

    def in_omega(self, d1: float, d2: float, r1: float) -> OmegaReport:
        vals = self._values(d1, d2, r1)
        idx = int(np.argmax(vals))
        active = self.lines[idx][0]
        value = max(float(vals[idx]), 0.0)
        flags = (active.lambda1 > 0, active.lambda2 > 0, active.nu1 > 0)
        return OmegaReport(value, active, *flags, value > 0 and all(flags))


@dataclass(frozen=True, eq=False)
class SrTiltedInfo:
    """Per-realization tilted information for two-stage compression."""

    values: np.ndarray
    mean: float
    variance: float


@dataclass(frozen=True, eq=False)
class SrOptimalityReport:
    """Feasibility functionals of the converged certificate.

    sigma1 is indexed by y1, sigma2 by (y1, y2). Passing requires the chain
    sigma2 <= sigma1 <= 1 everywhere (up to tol) plus equality almost
    everywhere on the converged marginals, measured by the mass-weighted
    gaps (symbols drifting to extinction carry vanishing weight).
    """

    sigma1: np.ndarray
    sigma2: np.ndarray
    tol: float
    max_sigma1_excess: float
    max_chain_excess: float
    max_support_gap1: float
    max_support_gap2: float
    passes: bool


def initial_sr_state(
    problem: SrProblem, init1: Pmf | None = None, init2: Kernel | None = None
) -> SrState:
    """Iteration-zero state with product kernels built from the inits."""
    if init1 is None:
        init1 = Pmf.uniform(problem.n_first)
    if init2 is None:
        init2 = Kernel.uniform(problem.n_first, problem.n_second)
    if init1.size != problem.n_first or init2.rows.shape != (
        problem.n_first,
        problem.n_second,
    ):
        raise ValidationError("initial marginal shapes do not match problem")
    nx = problem.n_source
    k1 = Kernel(np.tile(init1.probs, (nx, 1)))
    k2 = np.broadcast_to(init2.rows, (nx, *init2.rows.shape)).copy()
    ones1 = np.ones(nx)
    ones2 = np.ones((nx, problem.n_first))
    return SrState(0, init1, init2, k1, k2, ones1, ones2, math.inf)


def _log_betas(
    problem: SrProblem, triple: LagrangeTriple, state: SrState
) -> tuple[np.ndarray, np.ndarray]:
    scale = 1.0 + triple.nu1
    log_py2 = state.py2_given_y1.log()
    # (x, y1) <- logsumexp over y2 of log p(y2|y1) - lambda2 d2(x, y2)
    lb2 = _logsumexp(
        log_py2[None, :, :] - triple.lambda2 * problem.d2_matrix[:, None, :], axis=2
    )
    log_py1 = state.py1.log()
    lb1 = _logsumexp(
        log_py1[None, :] + (lb2 - triple.lambda1 * problem.d1_matrix) / scale, axis=1
    )
    return lb1, lb2


def update_betas(
    problem: SrProblem, triple: LagrangeTriple, state: SrState
) -> tuple[np.ndarray, np.ndarray]:
    """Certificate functions from the state's marginals.

    beta2(x | y1) averages exp(-lambda2 d2(x, .)) over the second-stage
    conditional; beta1(x) averages the tempered beta2 with the first-stage
    tilt over the first-stage marginal. Entries lie in (0, 1].
    """
    lb1, lb2 = _log_betas(problem, triple, state)
    return np.exp(lb1), np.exp(lb2)


def update_kernels(
    problem: SrProblem,
    triple: LagrangeTriple,
    state: SrState,
    betas: tuple[np.ndarray, np.ndarray],
) -> SrState:
    """Tilt both kernels against the betas and refresh the marginals.

    The recorded dual value is (1 + nu1) E[ln 1/beta1(X)] and never exceeds
    the previous one. Output symbols whose marginal mass falls below the
    clamp threshold are zeroed and drop out of the iteration.
    """
    beta1, beta2 = betas
    nu1, lam1, lam2 = triple.nu1, triple.lambda1, triple.lambda2
    scale = 1.0 + nu1
    px = problem.px.probs
    active_x = px > 0
    if np.any(beta1 <= 0) or np.any(beta2 <= 0):
        raise DegenerateMarginal(
            "certificate mass vanished for a source symbol; "
            "slopes too large for this grid"
        )
    lb1 = safe_log(beta1)
    lb2 = safe_log(beta2)

    f_value = float(scale * -(px[active_x] @ lb1[active_x])) + 0.0

    log_k1 = (
        state.py1.log()[None, :]
        + (lb2 - lam1 * problem.d1_matrix) / scale
        - lb1[:, None]
    )
    k1 = np.exp(log_k1)
    k1 /= k1.sum(axis=1, keepdims=True)

    log_k2 = (
        state.py2_given_y1.log()[None, :, :]
        - lam2 * problem.d2_matrix[:, None, :]
        - lb2[:, :, None]
    )
    k2 = np.exp(log_k2)
    k2 /= k2.sum(axis=2, keepdims=True)

    py1_new = px @ k1
    py1_new[py1_new < SUPPORT_CLAMP] = 0.0
    total = py1_new.sum()
    if total <= 0:
        raise DegenerateMarginal("all first-stage mass collapsed below the clamp")
    py1_new /= total

    weight = px[:, None] * k1
    py2_new = np.einsum("xa,xab->ab", weight, k2)
    rows = state.py2_given_y1.rows.copy()
    live = py1_new > 0
    sub = py2_new[live]
    sub /= sub.sum(axis=1, keepdims=True)
    sub[sub < SUPPORT_CLAMP] = 0.0
    rows[live] = sub

    return SrState(
        state.iteration + 1,
        Pmf(py1_new),
        Kernel(rows),
        Kernel(k1),
        k2,
        beta1,
        beta2,
        f_value,
    )


def _sr_stopping_gap(new: SrState, old: SrState, nu1: float) -> float:
    """sup over the retained (y1, y2) support of the combined log-ratio
    (1 + nu1) ln(p1'/p1) + ln(p2'/p2)."""
    mask1 = new.py1.support
    a = (1.0 + nu1) * (
        np.log(new.py1.probs[mask1]) - np.log(old.py1.probs[mask1])
    )
    new_rows = new.py2_given_y1.rows[mask1]
    old_rows = old.py2_given_y1.rows[mask1]
    pair_mask = new_rows > 0
    b = np.full(new_rows.shape, -np.inf)
    b[pair_mask] = np.log(new_rows[pair_mask]) - np.log(old_rows[pair_mask])
    return float(np.max(a[:, None] + b))


def _sr_run_raw(
    problem: SrProblem,
    triple: LagrangeTriple,
    p1: np.ndarray,
    p2: np.ndarray,
    max_iters: int,
    delta: float,
):
    """Trace-free iteration on bare arrays; same math as the public steps."""
    nu1, lam1, lam2 = triple.nu1, triple.lambda1, triple.lambda2
    scale = 1.0 + nu1
    px = problem.px.probs
    active = px > 0
    w2 = lam2 * problem.d2_matrix
    w1 = lam1 * problem.d1_matrix / scale
    p1 = p1.copy()
    p2 = p2.copy()
    gap = math.inf
    converged = False
    iterations = 0
    f_value = math.inf
    lb1 = np.zeros(problem.n_source)
    lb2 = np.zeros((problem.n_source, problem.n_first))
    k1 = k2 = None
    for k in range(1, max_iters + 1):
        log_p1 = safe_log(p1)
        log_p2 = safe_log(p2)
        t = log_p2[None, :, :] - w2[:, None, :]
        peak2 = t.max(axis=2)
        lb2 = peak2 + np.log(np.exp(t - peak2[:, :, None]).sum(axis=2))
        u = log_p1[None, :] + lb2 / scale - w1
        peak1 = u.max(axis=1)
        lb1 = peak1 + np.log(np.exp(u - peak1[:, None]).sum(axis=1))
        if np.any(np.isneginf(lb2)) or np.any(np.isneginf(lb1)):
            raise DegenerateMarginal(
                "certificate mass vanished for a source symbol; "
                "slopes too large for this grid"
            )
        f_value = float(scale * -(px[active] @ lb1[active])) + 0.0
        k1 = np.exp(u - lb1[:, None])
        k1 /= k1.sum(axis=1, keepdims=True)
        k2 = np.exp(t - lb2[:, :, None])
        k2 /= k2.sum(axis=2, keepdims=True)

        p1_new = px @ k1
        p1_new[p1_new < SUPPORT_CLAMP] = 0.0
        total = p1_new.sum()
        if total <= 0:
            raise DegenerateMarginal("all first-stage mass collapsed below the clamp")
        p1_new /= total
        live = p1_new > 0
        weight = px[:, None] * k1
        p2_target = np.einsum("xa,xab->ab", weight, k2)
        rows = p2.copy()
        sub = p2_target[live]
        sub /= sub.sum(axis=1, keepdims=True)
        sub[sub < SUPPORT_CLAMP] = 0.0
        rows[live] = sub

        a = scale * (np.log(p1_new[live]) - log_p1[live])
        new_rows = rows[live]
        pair = new_rows > 0
        b = np.full(new_rows.shape, -np.inf)
        b[pair] = np.log(new_rows[pair]) - log_p2[live][pair]
        gap = float(np.max(a[:, None] + b))
        p1, p2 = p1_new, rows
        iterations = k
        if gap <= delta:
            converged = True
            break
    state = SrState(
        iterations, Pmf(p1), Kernel(p2), Kernel(k1), k2, np.exp(lb1), np.exp(lb2),
        f_value,
    )
    return state, gap, converged, iterations


def run_sr_blahut(
    problem: SrProblem,
    triple: LagrangeTriple,
    init1: Pmf | None = None,
    init2: Kernel | None = None,
    max_iters: int = DEFAULT_MAX_ITERS,
    delta: float = DEFAULT_DELTA,
    keep_trace: bool = True,
) -> tuple[SrDualPoint, list[SrState]]:
    """Iterate to the dual value F(nu1, lambda1, lambda2).

    Initial marginals must have full support (the default uniform inits do),
    which keeps the divergence to the optimum finite on a finite grid and
    guarantees the O(1/k) convergence bound. Stops when the combined
    sup-log-ratio falls to ``delta``.
    """
    if max_iters < 1:
        raise ValidationError("max_iters must be >= 1")
    if delta <= 0:
        raise ValidationError("delta must be > 0")
    state = initial_sr_state(problem, init1, init2)
    if np.any(state.py1.probs == 0) or np.any(state.py2_given_y1.rows == 0):
        raise ValidationError("initial marginals must have full support")
    if not keep_trace:
        final, gap, converged, iterations = _sr_run_raw(
            problem, triple, state.py1.probs, state.py2_given_y1.rows,
            max_iters, delta,
        )
        return SrDualPoint(triple, final.f_value, converged, iterations, gap), [final]
    trace: list[SrState] = []
    gap = math.inf
    converged = False
    iterations = 0
    for _ in range(max_iters):
        betas = update_betas(problem, triple, state)
        new_state = update_kernels(problem, triple, state, betas)
        iterations = new_state.iteration
        trace.append(new_state)
        gap = _sr_stopping_gap(new_state, state, triple.nu1)
        state = new_state
        if gap <= delta:
            converged = True
            break
    return SrDualPoint(triple, state.f_value, converged, iterations, gap), trace


def tangency_coordinates(problem: SrProblem, state: SrState) -> tuple[float, float, float]:
    """(d1, d2, R1) where the hyperplane of this converged state touches the
    surface: realized average distortions and the first-stage mutual
    information."""
    px = problem.px.probs
    d1 = float(px @ np.sum(state.k1.rows * problem.d1_matrix, axis=1))
    weight = px[:, None] * state.k1.rows
    ed2_by_xy1 = np.einsum("xab,xb->xa", state.k2, problem.d2_matrix)
    d2 = float(np.sum(weight * ed2_by_xy1))
    r1 = mutual_information(problem.px, state.k1)
    return d1, d2, r1


def sr_envelope(duals: list[SrDualPoint]) -> SrSurface:
    """Surface reconstruction from dual points; evaluation takes the best
    hyperplane and floors at zero."""
    if not duals:
        raise InsufficientSlopes("no dual points supplied")
    return SrSurface([(dp.triple, dp.f_value) for dp in duals])


def _sigma_functionals(
    problem: SrProblem,
    triple: LagrangeTriple,
    beta1: np.ndarray,
    beta2: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Sigma1(y1) and Sigma2(y1, y2) for an arbitrary certificate."""
    nu1, lam1, lam2 = triple.nu1, triple.lambda1, triple.lambda2
    scale = 1.0 + nu1
    log_px = problem.px.log()
    lb1 = safe_log(beta1)
    lb2 = safe_log(beta2)
    base = log_px[:, None] - lam1 * problem.d1_matrix / scale - lb1[:, None]
    sigma1 = np.exp(_logsumexp(base + lb2 / scale, axis=0))
    sigma2 = np.exp(
        _logsumexp(
            (base - (nu1 / scale) * lb2)[:, :, None]
            - lam2 * problem.d2_matrix[:, None, :],
            axis=0,
        )
    )
    return sigma1, sigma2


def verify_sr_optimality(
    problem: SrProblem,
    triple: LagrangeTriple,
    final_state: SrState,
    tol: float = 10 * DEFAULT_DELTA,
) -> SrOptimalityReport:
    """Evaluate the feasibility chain at the certificate recomputed from the
    converged marginals.

    Requires sigma2 <= sigma1 <= 1 everywhere within tol, equality of sigma1
    on the support of the first-stage marginal, and equality of sigma2 with
    sigma1 on the support of the second-stage conditional.
    """
    beta1, beta2 = update_betas(problem, triple, final_state)
    sigma1, sigma2 = _sigma_functionals(problem, triple, beta1, beta2)
    max_sigma1_excess = float(np.max(sigma1) - 1.0)
    max_chain_excess = float(np.max(sigma2 - sigma1[:, None]))
    p1 = final_state.py1.probs
    max_support_gap1 = float(p1 @ np.abs(sigma1 - 1.0))
    pair_mass = p1[:, None] * final_state.py2_given_y1.rows
    max_support_gap2 = float(np.sum(pair_mass * np.abs(sigma2 - sigma1[:, None])))
    passes = bool(
        max_sigma1_excess <= tol
        and max_chain_excess <= tol
        and max_support_gap1 <= tol
        and max_support_gap2 <= tol
    )
    return SrOptimalityReport(
        sigma1,
        sigma2,
        tol,
        max_sigma1_excess,
        max_chain_excess,
        max_support_gap1,
        max_support_gap2,
        passes,
    )


def sr_tilted_information(
    problem: SrProblem,
    final_state: SrState,
    triple: LagrangeTriple,
    d1: float,
    d2: float,
    r1: float,
    tol: float = 10 * DEFAULT_DELTA,
) -> SrTiltedInfo:
    """Per-realization values (1 + nu1) ln(1/beta1(x)) minus the hyperplane
    offsets at the tangency coordinates (d1, d2, R1).

    The certificate is recomputed from the converged marginals and must pass
    the optimality check; the mean then matches the surface value there.
    """
    report = verify_sr_optimality(problem, triple, final_state, tol)
    if not report.passes:
        raise NotConverged("state does not satisfy the optimality conditions")
    beta1, _ = update_betas(problem, triple, final_state)
    values = (
        (1.0 + triple.nu1) * -safe_log(beta1)
        - triple.lambda1 * d1
        - triple.lambda2 * d2
        - triple.nu1 * r1
    )
    px = problem.px.probs
    mean = float(px @ values)
    variance = float(px @ (values - mean) ** 2)
    return SrTiltedInfo(values, mean, variance)


@dataclass(frozen=True, eq=False)
class MarkovReport:
    """Deviation of the converged two-stage backward kernel from the
    single-stage backward form that depends on y2 only.

    ``deviation`` is the joint-mass-weighted total variation between the
    realized conditional over sources and the implied y2-only conditional;
    it vanishes exactly when the two-stage optimum collapses through the
    second reproduction alone.
    """

    deviation: float
    tol: float
    passes: bool


@dataclass(frozen=True, eq=False)
class RefinableConstruction:
    """Closed-form certificate assembled from the two single-stage optima.

    ``value_gap`` is the excess of the iterated dual value over the
    certificate value at the same triple; it vanishes exactly when the
    source is successively refinable at (d1, d2).
    """

    beta1: np.ndarray
    beta2: np.ndarray
    triple: LagrangeTriple
    markov_report: MarkovReport
    alpha1: np.ndarray
    alpha2: np.ndarray
    lambda1_star: float
    lambda2_star: float
    r1_star: float
    r2_star: float
    d1: float
    d2: float
    value_gap: float
    px: Pmf

    def certificate_value(self, r1: float) -> float:
        """Hyperplane value at first-stage rate r1; equals the second-stage
        rate-distortion function at r1 = R1(d1) when the construction is
        optimal."""
        nu1 = self.triple.nu1
        base = float((1.0 + nu1) * -(self.px.probs @ safe_log(self.beta1)))
        return (
            base
            - self.triple.lambda1 * self.d1
            - self.triple.lambda2 * self.d2
            - nu1 * r1
        )


def refinable_construction(
    problem: SrProblem,
    d1: float,
    d2: float,
    nu1: float,
    tol: float = 1e-4,
    delta: float = 1e-10,
    max_iters: int = DEFAULT_MAX_ITERS,
    mass_floor: float = 1e-9,
) -> RefinableConstruction:
    """Build the two-stage certificate from the single-stage solutions at
    (d1, d2) and test it against the iterated optimum.

    The construction sets beta1 from the two tilt factors alpha1/alpha2 and
    beta2 from the first-stage tilt; its hyperplane value always equals the
    stage-two rate-distortion function. Whether the source is successively
    refinable is decided by running the two-stage solver at the same triple:
    a dual value exceeding the certificate value, or a converged backward
    kernel that fails to collapse to the y2-only form, raises
    :class:`ConstraintViolated` with diagnostics attached.
    """
    if nu1 <= 0:
        raise ValidationError("nu1 must be > 0 for the construction")
    lam1_star, dual1, state1 = slope_for_distortion(
        problem.stage1(), d1, delta=delta, max_iters=max_iters
    )
    lam2_star, dual2, state2 = slope_for_distortion(
        problem.stage2(), d2, delta=delta, max_iters=max_iters
    )
    alpha1 = sigma_bar(problem.stage1(), lam1_star, state1.py)
    alpha2 = sigma_bar(problem.stage2(), lam2_star, state2.py)
    triple = LagrangeTriple(nu1, nu1 * lam1_star, lam2_star)
    scale = 1.0 + nu1

    la1 = safe_log(alpha1)
    la2 = safe_log(alpha2)
    beta1 = np.exp((nu1 * la1 + la2) / scale)
    beta2 = np.exp(-lam1_star * problem.d1_matrix - la1[:, None] + la2[:, None])

    sigma1, sigma2 = _sigma_functionals(problem, triple, beta1, beta2)
    excess = max(float(np.max(sigma1) - 1.0), float(np.max(sigma2) - 1.0))

    r1_star = dual1.f_value - lam1_star * d1
    r2_star = dual2.f_value - lam2_star * d2

    sr_dual, trace = run_sr_blahut(
        problem, triple, max_iters=max_iters, delta=delta * 10, keep_trace=False
    )
    state = trace[-1]
    px = problem.px.probs
    cert_value = float(scale * -(px @ safe_log(beta1)))
    value_gap = sr_dual.f_value - cert_value

    joint = px[:, None, None] * state.k1.rows[:, :, None] * state.k2
    p_y1y2 = joint.sum(axis=0)
    live = p_y1y2 > mass_floor
    backward = np.zeros_like(joint)
    backward[:, live] = joint[:, live] / p_y1y2[live]
    # y2-only backward form implied by the stage-two solution
    target = np.exp(-lam2_star * problem.d2_matrix - la2[:, None]) * px[:, None]
    # joint-mass-weighted total variation between realized and implied
    # conditionals; insensitive to negligible-mass grid-edge pairs
    tv = np.abs(backward - target[:, None, :]).sum(axis=0)
    markov_dev = float((p_y1y2 * tv)[live].sum())

    diagnostics = {
        "sigma_excess": excess,
        "value_gap": value_gap,
        "markov_deviation": markov_dev,
        "triple": triple,
    }
    if excess > tol:
        raise ConstraintViolated(
            f"certificate feasibility violated by {excess:.3g}", diagnostics
        )
    if value_gap > tol or markov_dev > tol:
        raise ConstraintViolated(
            "source is not successively refinable at "
            f"(d1={d1}, d2={d2}): dual value exceeds the certificate by "
            f"{value_gap:.3g}, backward-kernel deviation {markov_dev:.3g}",
            diagnostics,
        )
    markov = MarkovReport(markov_dev, tol, markov_dev <= tol)
    return RefinableConstruction(
        beta1,
        beta2,
        triple,
        markov,
        alpha1,
        alpha2,
        lam1_star,
        lam2_star,
        r1_star,
        r2_star,
        d1,
        d2,
        value_gap,
        problem.px,
    )
