"""Semantic exception hierarchy.

Every error raised by this package derives from :class:`RefineRdError`, so
callers (and the CLI exit-code mapping) can distinguish our failures from
genuine bugs.
"""

from __future__ import annotations


class RefineRdError(Exception):
    """Base class for all package errors."""


class ValidationError(RefineRdError):
    """An input object violates one of its declared invariants."""


class ParseError(ValidationError):
    """A problem file could not be parsed; message names the offending field."""


class AbsoluteContinuityViolation(RefineRdError):
    """p puts mass where q has none, so the divergence is +infinity."""


class DegenerateMarginal(RefineRdError):
    """All reproduction mass collapsed; the slope is too large for the grid."""


class InsufficientSlopes(RefineRdError):
    """Envelope reconstruction needs more dual points than were supplied."""


class NotConverged(RefineRdError):
    """An operation requires a converged dual point."""


class ConstraintViolated(RefineRdError):
    """A certificate fails its feasibility check.

    For the two-stage construction this is informative output: it signals
    that the source is not successively refinable at the requested
    distortion pair.
    """

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class CertificateInvalid(RefineRdError):
    """A converse-bound certificate fails the feasibility constraints."""


class F1NotSourceOnly(RefineRdError):
    """The first-stage information term depends on the reproduction, so the
    recombined bound is not computable for this certificate."""


class ZeroVariance(RefineRdError):
    """Tilted information is deterministic; the normal approximation is
    undefined and the exact step-function bound should be used instead."""


class TooLarge(RefineRdError):
    """Alphabet sizes exceed what the brute-force oracle will enumerate."""


class OutOfRange(RefineRdError):
    """A distortion argument lies outside the valid range of a formula."""
