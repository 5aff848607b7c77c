"""Rate-distortion curves and surfaces for one- and two-stage lossy
compression: dual solvers, envelope reconstruction, optimality certificates,
tilted information, and nonasymptotic converse bounds."""

from .probability import Kernel, Pmf, mutual_information, relative_entropy
from .single_stage import (
    RdProblem,
    rd_envelope,
    run_blahut,
    slope_for_distortion,
    tilted_information,
    verify_optimality,
)
from .successive import (
    LagrangeTriple,
    SrProblem,
    refinable_construction,
    run_sr_blahut,
    sr_envelope,
    sr_tilted_information,
    verify_sr_optimality,
)

__version__ = "0.1.0"

__all__ = [
    "Kernel",
    "Pmf",
    "mutual_information",
    "relative_entropy",
    "RdProblem",
    "rd_envelope",
    "run_blahut",
    "slope_for_distortion",
    "tilted_information",
    "verify_optimality",
    "LagrangeTriple",
    "SrProblem",
    "refinable_construction",
    "run_sr_blahut",
    "sr_envelope",
    "sr_tilted_information",
    "verify_sr_optimality",
]
