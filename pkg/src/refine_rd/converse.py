"""Nonasymptotic converse machinery for two-stage compression.

Given a feasible certificate (beta1, beta2, slopes), any fixed-rate code
must keep the probability of high per-realization information content and
successful decoding below exp(-gamma). Enumerating a concrete code gives
the exact residuals of those inequalities; dropping the code dependence
gives computable lower bounds on the excess-distortion probabilities, with
i.i.d. blocks handled by exact type enumeration or seeded Monte Carlo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, ndtri
from scipy.stats import beta as beta_dist

from .errors import CertificateInvalid, F1NotSourceOnly, ValidationError, ZeroVariance
from .probability import Kernel, Pmf, safe_log
from .successive import LagrangeTriple, SrProblem, _sigma_functionals

__all__ = [
    "CodeSpec",
    "FTermsTable",
    "ConverseResiduals",
    "BoundResult",
    "NormalApproximation",
    "check_certificate",
    "refinable_betas",
    "evaluate_f_terms",
    "converse_residuals",
    "converse_bounds",
    "normal_approximation",
    "iid_tail_probability",
    "default_gamma",
]

# Exact enumeration is used while the type-class count stays below this.
MAX_EXACT_ATOMS = 10_000_000
DEFAULT_MC_SAMPLES = 200_000


def default_gamma(n: int) -> float:
    """Standard slack choice ln(n), making the exp(-gamma) giveback 1/n."""
    if n < 1:
        raise ValidationError("blocklength must be >= 1")
    return math.log(n) if n > 1 else 1.0


@dataclass(frozen=True, eq=False)
class CodeSpec:
    """A two-stage code: stochastic encoders, deterministic decoder maps.

    ``enc1`` is P(W1 | X) with M1 outputs; ``enc2`` is P(W2 | X, W1) with
    floor(M2/M1) outputs, indexed (x, w1, w2). ``dec1[w1]`` and
    ``dec2[w1, w2]`` are reproduction indices.
    """

    enc1: Kernel
    enc2: np.ndarray
    dec1: np.ndarray
    dec2: np.ndarray
    m1: int
    m2: int

    def __init__(self, enc1: Kernel, enc2, dec1, dec2, m1: int, m2: int):
        if m1 < 1 or m2 < m1:
            raise ValidationError("need 1 <= M1 <= M2")
        m2b = m2 // m1
        enc2 = np.asarray(enc2, dtype=float).copy()
        nx = enc1.input_size
        if enc1.output_size != m1:
            raise ValidationError("enc1 output count must equal M1")
        if enc2.shape != (nx, m1, m2b):
            raise ValidationError(f"enc2 must have shape {(nx, m1, m2b)}")
        if np.any(enc2 < 0) or not np.allclose(enc2.sum(axis=2), 1.0, atol=1e-9):
            raise ValidationError("enc2 rows must be stochastic")
        dec1 = np.asarray(dec1, dtype=int).copy()
        dec2 = np.asarray(dec2, dtype=int).copy()
        if dec1.shape != (m1,) or dec2.shape != (m1, m2b):
            raise ValidationError("decoder map shapes do not match M1, M2")
        for arr in (enc2, dec1, dec2):
            arr.flags.writeable = False
        object.__setattr__(self, "enc1", enc1)
        object.__setattr__(self, "enc2", enc2)
        object.__setattr__(self, "dec1", dec1)
        object.__setattr__(self, "dec2", dec2)
        object.__setattr__(self, "m1", m1)
        object.__setattr__(self, "m2", m2)

    @classmethod
    def deterministic(cls, enc1_map, enc2_map, dec1, dec2, m1: int, m2: int, nx: int):
        """Build from encoder index maps x -> w1 and x -> w2."""
        if m1 < 1 or m2 < m1:
            raise ValidationError("need 1 <= M1 <= M2")
        e1 = np.zeros((nx, m1))
        e1[np.arange(nx), np.asarray(enc1_map, dtype=int)] = 1.0
        m2b = m2 // m1
        e2 = np.zeros((nx, m1, m2b))
        e2[np.arange(nx), :, np.asarray(enc2_map, dtype=int)] = 1.0
        return cls(Kernel(e1), e2, dec1, dec2, m1, m2)

    @property
    def m2b(self) -> int:
        return self.m2 // self.m1


@dataclass(frozen=True, eq=False)
class FTermsTable:
    """Exact joint distribution of the information terms for one code.

    One atom per (x, w1, w2) with positive probability; ``f`` satisfies
    f = nu1 (f1 - ln M1) + f2 on every atom by construction.
    """

    probs: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    f: np.ndarray
    dist1: np.ndarray
    dist2: np.ndarray
    d1: float
    d2: float
    log_m1: float
    log_m2: float
    nu1: float


@dataclass(frozen=True)
class ConverseResiduals:
    """Residuals of the two code-dependent converse inequalities."""

    lhs1: float
    lhs2: float
    bound1: float
    bound2: float

    @property
    def margin1(self) -> float:
        return self.bound1 - self.lhs1

    @property
    def margin2(self) -> float:
        return self.bound2 - self.lhs2

    @property
    def holds(self) -> bool:
        return self.margin1 >= -1e-12 and self.margin2 >= -1e-12


@dataclass(frozen=True)
class BoundResult:
    """A converse lower bound on the excess-distortion probabilities.

    Raw values live in [-1, 1]; the reported bounds are floored at zero and
    marked vacuous when the raw value is nonpositive. ``separate_errors``
    records that the caller reads epsilon2 under the per-stage error
    formalism; the numerical bound is unchanged and this reading is exposed
    without independent verification.
    """

    which: str
    n: int
    log_m1: float
    log_m2: float
    gamma1: float
    gamma2: float
    eps1_raw: float | None
    eps2_raw: float
    eps1_lower: float | None
    eps2_lower: float
    method: str
    ci_eps1: tuple[float, float] | None = None
    ci_eps2: tuple[float, float] | None = None
    separate_errors: bool = False

    @property
    def vacuous(self) -> bool:
        floored = [v for v in (self.eps1_raw, self.eps2_raw) if v is not None]
        return all(v <= 0 for v in floored)


@dataclass(frozen=True)
class NormalApproximation:
    """nR + sqrt(n Var) Qinv(eps), in nats; the O(log n) term is omitted."""

    log_m_estimate: float
    rate: float
    variance: float
    n: int
    epsilon: float
    note: str = "second-order normal approximation; O(log n) term omitted"


def check_certificate(
    problem: SrProblem,
    certificate: tuple[np.ndarray, np.ndarray, LagrangeTriple],
    tol: float = 1e-7,
) -> float:
    """Verify the feasibility constraints Sigma1 <= 1 and Sigma2 <= 1.

    Returns the worst excess; raises :class:`CertificateInvalid` beyond tol.
    """
    beta1, beta2, triple = certificate
    sigma1, sigma2 = _sigma_functionals(problem, triple, np.asarray(beta1), np.asarray(beta2))
    excess = max(float(np.max(sigma1) - 1.0), float(np.max(sigma2) - 1.0))
    if excess > tol:
        raise CertificateInvalid(f"feasibility exceeded by {excess:.3g}")
    return excess


def refinable_betas(
    alpha1: np.ndarray,
    alpha2: np.ndarray,
    lam1_star: float,
    d1_matrix: np.ndarray,
    nu1: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Certificate functions built from the two single-stage tilt factors.

    Parametrized by the stage-one slope lam1_star = lambda1 / nu1, so the
    nu1 = 0 limit (beta1 = alpha2) is available directly.
    """
    la1 = safe_log(np.asarray(alpha1))
    la2 = safe_log(np.asarray(alpha2))
    beta1 = np.exp((nu1 * la1 + la2) / (1.0 + nu1))
    beta2 = np.exp(-lam1_star * d1_matrix - la1[:, None] + la2[:, None])
    return beta1, beta2


def evaluate_f_terms(
    problem: SrProblem,
    certificate: tuple[np.ndarray, np.ndarray, LagrangeTriple],
    code: CodeSpec,
    d1: float,
    d2: float,
    tol: float = 1e-7,
) -> FTermsTable:
    """Enumerate (x, w1, w2) and tabulate (F1, F2, F) with the realized
    distortions; the certificate must pass the feasibility check."""
    check_certificate(problem, certificate, tol)
    beta1, beta2, triple = certificate
    nu1 = triple.nu1
    scale = 1.0 + nu1
    lb1 = safe_log(np.asarray(beta1))
    lb2 = safe_log(np.asarray(beta2))

    nx = problem.n_source
    m1, m2b = code.m1, code.m2b
    x_idx, w1_idx, w2_idx = np.meshgrid(
        np.arange(nx), np.arange(m1), np.arange(m2b), indexing="ij"
    )
    x_idx, w1_idx, w2_idx = x_idx.ravel(), w1_idx.ravel(), w2_idx.ravel()
    probs = (
        problem.px.probs[x_idx]
        * code.enc1.rows[x_idx, w1_idx]
        * code.enc2[x_idx, w1_idx, w2_idx]
    )
    keep = probs > 0
    x_idx, w1_idx, w2_idx, probs = x_idx[keep], w1_idx[keep], w2_idx[keep], probs[keep]
    y1 = code.dec1[w1_idx]
    y2 = code.dec2[w1_idx, w2_idx]

    log_m1 = math.log(code.m1)
    log_m2 = math.log(code.m2)
    f1 = lb2[x_idx, y1] / scale - lb1[x_idx] - triple.lambda1 * d1 / scale
    f2 = (
        -(nu1 / scale) * lb2[x_idx, y1]
        - lb1[x_idx]
        - triple.lambda1 * d1 / scale
        - triple.lambda2 * d2
    )
    f = nu1 * (f1 - log_m1) + f2
    dist1 = problem.d1_matrix[x_idx, y1]
    dist2 = problem.d2_matrix[x_idx, y2]
    return FTermsTable(probs, f1, f2, f, dist1, dist2, d1, d2, log_m1, log_m2, nu1)


def converse_residuals(
    fterms: FTermsTable, gamma1: float, gamma2: float
) -> ConverseResiduals:
    """P[{F_i large} and successful decoding] against the exp(-gamma_i)
    ceilings; every valid code keeps both margins nonnegative."""
    if gamma1 <= 0 or gamma2 <= 0:
        raise ValidationError("gamma slacks must be > 0")
    ok1 = fterms.dist1 <= fterms.d1
    ok2 = ok1 & (fterms.dist2 <= fterms.d2)
    lhs1 = float(fterms.probs[(fterms.f1 >= fterms.log_m1 + gamma1) & ok1].sum())
    lhs2 = float(fterms.probs[(fterms.f2 >= fterms.log_m2 + gamma2) & ok2].sum())
    return ConverseResiduals(lhs1, lhs2, math.exp(-gamma1), math.exp(-gamma2))


def _type_count(m: int, n: int) -> int:
    return math.comb(n + m - 1, m - 1)


def _enumerate_types(m: int, n: int) -> np.ndarray:
    """All compositions of n into m nonnegative parts, as an array."""
    if m == 1:
        return np.array([[n]])
    if m == 2:
        k = np.arange(n + 1)
        return np.column_stack([k, n - k])
    if m == 3:
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = i + j <= n
        return np.column_stack([i[keep], j[keep], n - i[keep] - j[keep]])
    rows = []
    for first in range(n + 1):
        rest = _enumerate_types(m - 1, n - first)
        rows.append(np.column_stack([np.full(len(rest), first), rest]))
    return np.vstack(rows)


def _log_multinomial(counts: np.ndarray, px: np.ndarray, n: int) -> np.ndarray:
    pos = px > 0
    log_p = np.log(px[pos])
    mass = counts[:, pos] @ log_p
    if not np.all(pos):
        legal = np.all(counts[:, ~pos] == 0, axis=1)
        mass = np.where(legal, mass, -np.inf)
    return gammaln(n + 1) - gammaln(counts + 1).sum(axis=1) + mass


def iid_tail_probability(
    px: Pmf,
    n: int,
    values: list[np.ndarray],
    predicate,
    seed: int | None = None,
    samples: int = DEFAULT_MC_SAMPLES,
    max_atoms: int = MAX_EXACT_ATOMS,
) -> tuple[float, str, tuple[float, float] | None]:
    """Probability of an event of the i.i.d. sums of per-letter values.

    ``values`` is a list of per-symbol payoff vectors; ``predicate`` maps
    the (atoms, len(values)) matrix of block sums to a boolean vector. Uses
    exact type enumeration when the type class fits in ``max_atoms``, else
    seeded Monte Carlo with a 99 percent Clopper-Pearson interval.
    """
    m = px.size
    vmat = np.column_stack([np.asarray(v, dtype=float) for v in values])
    atoms = _type_count(m, n)
    if atoms <= max_atoms and (m <= 3 or atoms <= 100_000):
        counts = _enumerate_types(m, n)
        log_probs = _log_multinomial(counts, px.probs, n)
        hits = predicate(counts @ vmat)
        prob = float(np.exp(log_probs[hits]).sum())
        return min(prob, 1.0), "exact", None
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n, px.probs, size=samples)
    hits = predicate(counts @ vmat)
    k = int(np.count_nonzero(hits))
    p_hat = k / samples
    lo = float(beta_dist.ppf(0.005, k, samples - k + 1)) if k > 0 else 0.0
    hi = float(beta_dist.ppf(0.995, k + 1, samples - k)) if k < samples else 1.0
    return p_hat, "monte_carlo", (lo, hi)


def _certificate_letters(
    problem: SrProblem,
    certificate: tuple[np.ndarray, np.ndarray, LagrangeTriple],
    d1: float,
    d2: float,
    tol: float,
) -> tuple[np.ndarray, np.ndarray | None, LagrangeTriple]:
    """Per-letter payoffs (t, f1) for the block information terms.

    t(x) sums to the X-only part of F; f1 is available only when beta2 does
    not depend on the first-stage reproduction.
    """
    check_certificate(problem, certificate, tol)
    beta1, beta2, triple = certificate
    scale = 1.0 + triple.nu1
    lb1 = safe_log(np.asarray(beta1))
    lb2 = safe_log(np.asarray(beta2))
    t = scale * -lb1 - triple.lambda1 * d1 - triple.lambda2 * d2
    spread = float(np.max(lb2.max(axis=1) - lb2.min(axis=1)))
    f1 = None
    if spread <= 1e-9:
        f1 = lb2[:, 0] / scale - lb1 - triple.lambda1 * d1 / scale
    return t, f1, triple


def converse_bounds(
    problem: SrProblem,
    which: str,
    n: int,
    log_m1: float,
    log_m2: float,
    gamma1: float,
    gamma2: float,
    tilted_pair: tuple[np.ndarray, np.ndarray] | None = None,
    certificate: tuple[np.ndarray, np.ndarray, LagrangeTriple] | None = None,
    d1: float | None = None,
    d2: float | None = None,
    seed: int | None = None,
    samples: int = DEFAULT_MC_SAMPLES,
    tol: float = 1e-7,
    separate_errors: bool = False,
) -> BoundResult:
    """Computable converse bounds for i.i.d. blocks of length n.

    The stagewise form needs the two single-stage tilted-information
    vectors and bounds each stage's error separately. The recombined form
    joins the block term with the first-stage term (requiring the latter to
    depend on the source only) and the block form keeps only the block
    term; both need a feasible certificate and the target distortions.
    """
    if gamma1 <= 0 or gamma2 <= 0:
        raise ValidationError("gamma slacks must be > 0")
    if n < 1:
        raise ValidationError("blocklength must be >= 1")
    e1, e2 = math.exp(-gamma1), math.exp(-gamma2)

    if which == "stagewise":
        if tilted_pair is None:
            raise ValidationError("stagewise needs the pair of tilted-information vectors")
        j1, j2 = (np.asarray(v, dtype=float) for v in tilted_pair)
        thr1 = log_m1 + gamma1
        thr2 = log_m2 + gamma2
        p1, method, ci1 = iid_tail_probability(
            problem.px, n, [j1], lambda s: s[:, 0] >= thr1, seed=seed, samples=samples
        )
        p2, _, ci2 = iid_tail_probability(
            problem.px, n, [j2], lambda s: s[:, 0] >= thr2, seed=seed, samples=samples
        )
        raw1, raw2 = p1 - e1, p2 - e2
        return BoundResult(
            "stagewise", n, log_m1, log_m2, gamma1, gamma2,
            raw1, raw2, max(raw1, 0.0), max(raw2, 0.0), method,
            _shift_ci(ci1, -e1), _shift_ci(ci2, -e2), separate_errors,
        )

    if certificate is None or d1 is None or d2 is None:
        raise ValidationError(f"{which} needs a certificate and target distortions")
    t, f1, triple = _certificate_letters(problem, certificate, d1, d2, tol)
    nu1 = triple.nu1
    thr_f = log_m2 + nu1 * gamma1 + gamma2 + nu1 * log_m1

    if which == "recombined":
        if f1 is None:
            raise F1NotSourceOnly(
                "beta2 depends on the first-stage reproduction; F1 is not a "
                "function of the source alone"
            )
        thr1 = log_m1 + gamma1
        p, method, ci = iid_tail_probability(
            problem.px,
            n,
            [t, f1],
            lambda s: (s[:, 0] >= thr_f) | (s[:, 1] >= thr1),
            seed=seed,
            samples=samples,
        )
        raw = p - e1 - e2
        return BoundResult(
            "recombined", n, log_m1, log_m2, gamma1, gamma2,
            None, raw, None, max(raw, 0.0), method, None,
            _shift_ci(ci, -e1 - e2), separate_errors,
        )

    if which == "block":
        p, method, ci = iid_tail_probability(
            problem.px, n, [t], lambda s: s[:, 0] >= thr_f, seed=seed, samples=samples
        )
        raw = p - e1 - e2
        return BoundResult(
            "block", n, log_m1, log_m2, gamma1, gamma2,
            None, raw, None, max(raw, 0.0), method, None,
            _shift_ci(ci, -e1 - e2), separate_errors,
        )

    raise ValidationError(f"unknown bound selector {which!r}")


def _shift_ci(ci, offset):
    if ci is None:
        return None
    return (ci[0] + offset, ci[1] + offset)


def normal_approximation(
    px: Pmf, tilted_values: np.ndarray, n: int, epsilon: float
) -> NormalApproximation:
    """Second-order rate estimate n R + sqrt(n Var) Qinv(epsilon), in nats.

    Raises :class:`ZeroVariance` when the tilted information is
    deterministic; the exact step-function bound applies there instead.
    """
    if not 0 < epsilon < 1:
        raise ValidationError("epsilon must be in (0, 1)")
    if n < 1:
        raise ValidationError("blocklength must be >= 1")
    values = np.asarray(tilted_values, dtype=float)
    rate = float(px.probs @ values)
    variance = float(px.probs @ (values - rate) ** 2)
    if variance <= 1e-12:
        raise ZeroVariance("tilted information is deterministic")
    q_inv = float(-ndtri(epsilon))
    return NormalApproximation(
        n * rate + math.sqrt(n * variance) * q_inv, rate, variance, n, epsilon
    )
