"""Finite probability primitives.

Probability vectors, row-stochastic kernels, relative entropy and mutual
information, all evaluated in nats with explicit zero-mass conventions
(0 * log 0 = 0) and log-domain accumulation where cancellation matters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import AbsoluteContinuityViolation, ValidationError

__all__ = [
    "NORMALIZATION_ATOL",
    "RENORMALIZE_DRIFT",
    "SUPPORT_CLAMP",
    "LogProb",
    "Pmf",
    "Kernel",
    "safe_log",
    "exponential_tilt",
    "relative_entropy",
    "conditional_relative_entropy",
    "mutual_information",
]

# Construction-time tolerance on the sum of a probability vector.
NORMALIZATION_ATOL = 1e-12
# Drift up to which constructors silently renormalize; beyond it they raise.
RENORMALIZE_DRIFT = 1e-9
# Masses below this are treated as exact zeros by the iterative algorithms.
SUPPORT_CLAMP = 1e-300


def safe_log(a: np.ndarray) -> np.ndarray:
    """Elementwise natural log with log(0) = -inf and no warnings."""
    a = np.asarray(a, dtype=float)
    out = np.full(a.shape, -np.inf)
    positive = a > 0
    np.log(a, where=positive, out=out)
    return out


@dataclass(frozen=True)
class LogProb:
    """A log-domain probability, in nats. -inf encodes zero mass."""

    value: float

    def __post_init__(self):
        if np.isnan(self.value) or self.value > NORMALIZATION_ATOL:
            raise ValidationError(f"log-probability {self.value} exceeds 0")

    @classmethod
    def of(cls, p: float) -> "LogProb":
        if p < 0 or p > 1 + NORMALIZATION_ATOL:
            raise ValidationError(f"probability {p} outside [0, 1]")
        return cls(float(safe_log(np.asarray(p))))

    def prob(self) -> float:
        return float(np.exp(min(self.value, 0.0)))


def _validated_vector(probs, what: str) -> np.ndarray:
    arr = np.asarray(probs, dtype=float).copy()
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError(f"{what} must be a nonempty 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what} has non-finite entries")
    if np.any(arr < 0):
        raise ValidationError(f"{what} has negative entries")
    total = arr.sum()
    # representation slack so a drift of exactly 1e-9 still renormalizes
    if abs(total - 1.0) > RENORMALIZE_DRIFT * (1 + 1e-6):
        raise ValidationError(f"{what} sums to {total!r}, drift exceeds {RENORMALIZE_DRIFT}")
    arr /= total
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Pmf:
    """Probability mass function over symbols 0..n-1.

    Entries are nonnegative and sum to one within ``NORMALIZATION_ATOL``;
    construction renormalizes drift below ``RENORMALIZE_DRIFT`` and rejects
    anything worse. Instances are immutable and safe to share.
    """

    probs: np.ndarray

    def __init__(self, probs):
        object.__setattr__(self, "probs", _validated_vector(probs, "pmf"))

    @classmethod
    def uniform(cls, n: int) -> "Pmf":
        return cls(np.full(n, 1.0 / n))

    @property
    def size(self) -> int:
        return self.probs.size

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.probs))

    @property
    def support(self) -> np.ndarray:
        return self.probs > 0

    def log(self) -> np.ndarray:
        return safe_log(self.probs)


@dataclass(frozen=True, eq=False)
class Kernel:
    """Row-stochastic matrix; entry (x, y) is the probability of y given x."""

    rows: np.ndarray

    def __init__(self, rows):
        arr = np.asarray(rows, dtype=float).copy()
        if arr.ndim != 2 or arr.size == 0:
            raise ValidationError("kernel must be a nonempty 2-d matrix")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("kernel has non-finite entries")
        if np.any(arr < 0):
            raise ValidationError("kernel has negative entries")
        sums = arr.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > RENORMALIZE_DRIFT * (1 + 1e-6)):
            worst = int(np.argmax(np.abs(sums - 1.0)))
            raise ValidationError(
                f"kernel row {worst} sums to {sums[worst]!r}, drift exceeds {RENORMALIZE_DRIFT}"
            )
        arr /= sums[:, None]
        arr.flags.writeable = False
        object.__setattr__(self, "rows", arr)

    @classmethod
    def uniform(cls, n_in: int, n_out: int) -> "Kernel":
        return cls(np.full((n_in, n_out), 1.0 / n_out))

    @classmethod
    def from_rows(cls, rows) -> "Kernel":
        return cls(np.stack([np.asarray(r, dtype=float) for r in rows]))

    @property
    def input_size(self) -> int:
        return self.rows.shape[0]

    @property
    def output_size(self) -> int:
        return self.rows.shape[1]

    def log(self) -> np.ndarray:
        return safe_log(self.rows)

    def marginal(self, px: Pmf) -> Pmf:
        """Output distribution when the input is distributed as ``px``."""
        if px.size != self.input_size:
            raise ValidationError("input pmf size does not match kernel")
        return Pmf(px.probs @ self.rows)


def exponential_tilt(p: Pmf, neg_energy: np.ndarray) -> tuple[Pmf, float]:
    """Tilt ``p`` by exp(neg_energy) and return (tilted pmf, log partition).

    The log partition is ln E_p[exp(neg_energy)], computed stably in the
    log domain. The tilted distribution minimizes relative entropy to ``p``
    plus the expectation of ``-neg_energy``.
    """
    neg_energy = np.asarray(neg_energy, dtype=float)
    if neg_energy.shape != (p.size,):
        raise ValidationError("score vector size does not match pmf")
    scores = p.log() + neg_energy
    log_z = _logsumexp(scores)
    if log_z == -np.inf:
        raise ValidationError("tilt annihilates all mass")
    return Pmf(np.exp(scores - log_z)), float(log_z)


def _logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    return logsumexp(a, axis=axis)


def relative_entropy(p: Pmf, q: Pmf) -> float:
    """D(p || q) in nats.

    Raises :class:`AbsoluteContinuityViolation` when p puts mass on a symbol
    q does not, signalling an infinite divergence.
    """
    if p.size != q.size:
        raise ValidationError("pmf sizes differ")
    mask = p.support
    if np.any(q.probs[mask] == 0):
        bad = int(np.argmax(mask & (q.probs == 0)))
        raise AbsoluteContinuityViolation(f"p has mass at symbol {bad} where q has none")
    pm = p.probs[mask]
    return float(np.dot(pm, np.log(pm) - np.log(q.probs[mask])))


def conditional_relative_entropy(k1: Kernel, k2: Kernel, px: Pmf) -> float:
    """D(k1 || k2 | px): px-average of the per-row divergences.

    Rows with zero input mass contribute nothing and are never inspected.
    """
    if k1.rows.shape != k2.rows.shape:
        raise ValidationError("kernel shapes differ")
    if px.size != k1.input_size:
        raise ValidationError("input pmf size does not match kernels")
    total = 0.0
    for x in np.flatnonzero(px.probs):
        total += px.probs[x] * relative_entropy(Pmf(k1.rows[x]), Pmf(k2.rows[x]))
    return total


def mutual_information(px: Pmf, k: Kernel) -> float:
    """I(X; Y) in nats for X ~ px passed through k.

    Equals the conditional divergence between k and the induced output
    marginal; always finite since the marginal dominates every reachable row.
    """
    py = k.marginal(px)
    log_py = py.log()
    total = 0.0
    for x in np.flatnonzero(px.probs):
        row = k.rows[x]
        mask = row > 0
        total += px.probs[x] * float(
            np.dot(row[mask], np.log(row[mask]) - log_py[mask])
        )
    return max(total, 0.0)
