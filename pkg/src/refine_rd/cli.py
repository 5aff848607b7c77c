"""Command-line front end.

Subcommands compute rate-distortion curves (rd), successive-refinement
slices (sr), the closed-form Gaussian demo (gauss-demo), converse bounds
(converse), and iterative-vs-brute-force comparisons (oracle). Every
command emits a fixed-column CSV (stdout by default, file with --out) and,
when writing to a file, a PNG figure next to it unless --no-plot is given.

Exit codes: 0 success, 2 validation failure, 3 numerical degeneracy,
4 I/O failure. REFINE_RD_THREADS caps sweep parallelism.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gaussian, plots
from .converse import converse_bounds, default_gamma
from .errors import (
    AbsoluteContinuityViolation,
    CertificateInvalid,
    ConstraintViolated,
    DegenerateMarginal,
    F1NotSourceOnly,
    NotConverged,
    OutOfRange,
    ParseError,
    TooLarge,
    ValidationError,
    ZeroVariance,
)
from .oracles import brute_force_dual, brute_force_sr_dual
from .probability import Pmf
from .single_stage import (
    DEFAULT_DELTA,
    DEFAULT_MAX_ITERS,
    RdProblem,
    run_blahut,
    slope_for_distortion,
    tilted_information,
)
from .successive import (
    LagrangeTriple,
    SrProblem,
    run_sr_blahut,
    tangency_coordinates,
    update_betas,
    verify_sr_optimality,
)

LN2 = math.log(2.0)

_VALIDATION_ERRORS = (
    ValidationError,
    ParseError,
    OutOfRange,
    TooLarge,
    CertificateInvalid,
    F1NotSourceOnly,
)
_NUMERICAL_ERRORS = (
    DegenerateMarginal,
    ZeroVariance,
    NotConverged,
    AbsoluteContinuityViolation,
    ConstraintViolated,
)


@dataclass
class SlopeGrid:
    lo: float
    hi: float
    count: int
    geometric: bool = True

    def values(self) -> np.ndarray:
        if self.count < 1:
            raise ValidationError("slope grid count must be >= 1")
        if self.count == 1:
            return np.array([self.lo])
        if self.geometric:
            if self.lo <= 0 or self.hi <= 0:
                raise ValidationError("geometric slope grids need endpoints > 0")
            return np.geomspace(self.lo, self.hi, self.count)
        return np.linspace(self.lo, self.hi, self.count)


@dataclass
class RunConfig:
    """Everything one invocation needs; mirrors the CLI flags."""

    command: str
    problem_path: str | None = None
    slopes: SlopeGrid | None = None
    nu1: float = 0.0
    lambda1: float = 0.0
    lambda2: float | None = None
    max_iters: int = DEFAULT_MAX_ITERS
    delta: float = DEFAULT_DELTA
    units: str = "nats"
    seed: int | None = None
    out: str | None = None
    plot: bool = True
    iters: int = 2000
    d2_grid: tuple[float, float, int] = (0.1, 0.9, 50)
    which: str = "stagewise"
    n: int = 1
    log_m1: float = 0.0
    log_m2: SlopeGrid | None = None
    gamma1: float | None = None
    gamma2: float | None = None
    d1: float | None = None
    d2: float | None = None
    samples: int = 200_000
    grid_steps: int | None = None


def parse_slopes(spec: str) -> SlopeGrid:
    parts = spec.split(":")
    if len(parts) not in (3, 4):
        raise ValidationError(f"slope grid {spec!r} is not lo:hi:count[:geom|lin]")
    try:
        lo, hi = float(parts[0]), float(parts[1])
        count = int(parts[2])
    except ValueError as exc:
        raise ValidationError(f"slope grid {spec!r}: {exc}") from None
    geometric = True
    if len(parts) == 4:
        if parts[3] not in ("geom", "lin"):
            raise ValidationError(f"slope grid kind {parts[3]!r} is not geom or lin")
        geometric = parts[3] == "geom"
    grid = SlopeGrid(lo, hi, count, geometric)
    grid.values()
    return grid


def load_problem(path: str) -> RdProblem | SrProblem:
    """Read a problem JSON: {"pmf": [...], "d1": [[...]], "d2": [[...]]?}.

    The pmf is renormalized under the construction drift policy; a second
    distortion matrix makes it a two-stage problem.
    """
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    for key in ("pmf", "d1"):
        if key not in doc:
            raise ParseError(f"{path}: missing field {key!r}")
    px = Pmf(doc["pmf"])
    if "d2" in doc and doc["d2"] is not None:
        return SrProblem(px, doc["d1"], doc["d2"])
    return RdProblem(px, doc["d1"])


def save_problem(problem: RdProblem | SrProblem, path: str) -> None:
    if isinstance(problem, SrProblem):
        doc = {
            "pmf": problem.px.probs.tolist(),
            "d1": problem.d1_matrix.tolist(),
            "d2": problem.d2_matrix.tolist(),
        }
    else:
        doc = {"pmf": problem.px.probs.tolist(), "d1": problem.distortion.tolist()}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def _workers() -> int:
    env = os.environ.get("REFINE_RD_THREADS")
    if env is not None:
        try:
            cap = int(env)
        except ValueError:
            raise ValidationError(f"REFINE_RD_THREADS={env!r} is not an integer")
        return max(1, cap)
    return min(4, os.cpu_count() or 1)


def _sweep(fn, args_list):
    workers = _workers()
    if workers == 1 or len(args_list) <= 1:
        return [fn(a) for a in args_list]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, args_list))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".12g")


def _write_csv(header: list[str], rows, out: str | None) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    text = "\n".join(lines) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _plot_path(out: str) -> str:
    return str(Path(out).with_suffix(".png"))


def _scale(units: str) -> float:
    return 1.0 / LN2 if units == "bits" else 1.0


def _cmd_rd(config: RunConfig) -> int:
    problem = load_problem(config.problem_path)
    if not isinstance(problem, RdProblem):
        problem = RdProblem(problem.px, problem.d1_matrix)
    lams = config.slopes.values()

    def one(lam: float):
        dual, trace = run_blahut(
            problem, float(lam), max_iters=config.max_iters, delta=config.delta,
            keep_trace=False,
        )
        state = trace[-1]
        d = problem.expected_distortion(state.kernel)
        return dual, d

    results = _sweep(one, list(lams))
    u = _scale(config.units)
    rows = [
        (
            dual.lam * u,
            dual.f_value * u,
            dual.iterations_used,
            dual.converged,
            d,
            (dual.f_value - dual.lam * d) * u,
        )
        for dual, d in results
    ]
    _write_csv(["lambda", "F", "iterations", "converged", "d", "R"], rows, config.out)
    if config.out and config.plot:
        plots.plot_rd_curve(rows, _plot_path(config.out))
    return 0


def _cmd_sr(config: RunConfig) -> int:
    problem = load_problem(config.problem_path)
    if not isinstance(problem, SrProblem):
        raise ValidationError("sr needs a problem file with both d1 and d2")
    lam2s = config.slopes.values()

    def one(lam2: float):
        triple = LagrangeTriple(config.nu1, config.lambda1, float(lam2))
        dual, trace = run_sr_blahut(
            problem, triple, max_iters=config.max_iters, delta=config.delta,
            keep_trace=False,
        )
        state = trace[-1]
        d1, d2, r1 = tangency_coordinates(problem, state)
        report = verify_sr_optimality(problem, triple, state, tol=10 * config.delta)
        return dual, (d1, d2, r1), report

    results = _sweep(one, list(lam2s))
    u = _scale(config.units)
    rows = []
    diag_rows = []
    for dual, (d1, d2, r1), report in results:
        t = dual.triple
        r2 = dual.f_value - t.nu1 * r1 - t.lambda1 * d1 - t.lambda2 * d2
        rows.append(
            (t.nu1, t.lambda1 * u, t.lambda2 * u, dual.f_value * u, d1, d2,
             r1 * u, r2 * u)
        )
        diag_rows.append(
            (t.nu1, t.lambda1, t.lambda2, report.max_sigma1_excess,
             report.max_chain_excess, report.max_support_gap1,
             report.max_support_gap2, report.passes)
        )
    header = ["nu1", "lambda1", "lambda2", "F", "d1", "d2", "R1", "R2"]
    diag_header = [
        "nu1", "lambda1", "lambda2", "max_sigma1_excess", "max_chain_excess",
        "max_support_gap1", "max_support_gap2", "passes",
    ]
    _write_csv(header, rows, config.out)
    if config.out:
        diag_path = str(Path(config.out).with_suffix(".sigma.csv"))
        _write_csv(diag_header, diag_rows, diag_path)
        if config.plot:
            plots.plot_sr_slice(rows, _plot_path(config.out))
    else:
        sys.stderr.write(
            "\n".join(
                [",".join(diag_header)]
                + [",".join(_fmt(v) for v in r) for r in diag_rows]
            )
            + "\n"
        )
    return 0


def _cmd_gauss_demo(config: RunConfig) -> int:
    lam2s = config.slopes.values() if config.slopes else None
    surface = gaussian.demo_surface(lam2s, iterations=config.iters)
    lo, hi, count = config.d2_grid
    rows_nats = gaussian.demo_rows(surface, np.linspace(lo, hi, count))
    u = _scale(config.units)
    rows = [(d2, est * u, truth * u, err * u) for d2, est, truth, err in rows_nats]
    _write_csv(["d2", "R2_estimate", "R2_analytic", "abs_error"], rows, config.out)
    if config.out and config.plot:
        plots.plot_gauss_demo(rows, _plot_path(config.out))
    return 0


def _safe_exp(a: float) -> float:
    # codeword counts overflow float64 near 709 nats; the CSV then says inf
    try:
        return math.exp(a)
    except OverflowError:
        return math.inf


def _converse_inputs(config: RunConfig, problem: SrProblem):
    if config.which == "stagewise":
        if config.d1 is None or config.d2 is None:
            raise ValidationError("stagewise needs --d1 and --d2 targets")
        stage1, stage2 = problem.stage1(), problem.stage2()
        _, dual1, state1 = slope_for_distortion(stage1, config.d1, delta=config.delta)
        _, dual2, state2 = slope_for_distortion(stage2, config.d2, delta=config.delta)
        j1 = tilted_information(stage1, dual1, state1, config.d1)
        j2 = tilted_information(stage2, dual2, state2, config.d2)
        return {"tilted_pair": (j1.values, j2.values), "d1": config.d1, "d2": config.d2}
    if config.lambda2 is None:
        raise ValidationError(f"{config.which} needs --nu1/--lambda1/--lambda2")
    triple = LagrangeTriple(config.nu1, config.lambda1, config.lambda2)
    dual, trace = run_sr_blahut(
        problem, triple, max_iters=config.max_iters, delta=config.delta,
        keep_trace=False,
    )
    state = trace[-1]
    beta1, beta2 = update_betas(problem, triple, state)
    td1, td2, _ = tangency_coordinates(problem, state)
    return {
        "certificate": (beta1, beta2, triple),
        "d1": config.d1 if config.d1 is not None else td1,
        "d2": config.d2 if config.d2 is not None else td2,
    }


def _cmd_converse(config: RunConfig) -> int:
    problem = load_problem(config.problem_path)
    if isinstance(problem, RdProblem):
        problem = SrProblem(problem.px, problem.distortion, problem.distortion)
    gamma1 = config.gamma1 if config.gamma1 is not None else default_gamma(config.n)
    gamma2 = config.gamma2 if config.gamma2 is not None else default_gamma(config.n)
    inputs = _converse_inputs(config, problem)
    kwargs = dict(inputs)
    d1 = kwargs.pop("d1")
    d2 = kwargs.pop("d2")
    rows = []
    for log_m2 in config.log_m2.values():
        result = converse_bounds(
            problem,
            config.which,
            config.n,
            config.log_m1,
            float(log_m2),
            gamma1,
            gamma2,
            d1=d1,
            d2=d2,
            seed=config.seed,
            samples=config.samples,
            **kwargs,
        )
        rows.append(
            (
                config.n,
                _safe_exp(config.log_m1),
                _safe_exp(float(log_m2)),
                gamma1,
                gamma2,
                result.eps1_lower,
                result.eps2_lower,
                result.method,
            )
        )
    header = ["n", "M1", "M2", "gamma1", "gamma2", "eps1_lb", "eps2_lb", "method"]
    _write_csv(header, rows, config.out)
    if config.out and config.plot:
        plots.plot_converse(rows, _plot_path(config.out))
    return 0


def _cmd_oracle(config: RunConfig) -> int:
    problem = load_problem(config.problem_path)
    u = _scale(config.units)
    rows = []
    if isinstance(problem, RdProblem):
        steps = config.grid_steps or 1000
        for lam in config.slopes.values():
            dual, _ = run_blahut(
                problem, float(lam), max_iters=config.max_iters,
                delta=config.delta, keep_trace=False,
            )
            oracle = brute_force_dual(problem, float(lam), steps)
            rows.append(
                ("rd", None, None, float(lam) * u, dual.f_value * u,
                 oracle.value * u, abs(dual.f_value - oracle.value) * u,
                 oracle.method, oracle.resolution)
            )
    else:
        steps = config.grid_steps or 60
        for lam2 in config.slopes.values():
            triple = LagrangeTriple(config.nu1, config.lambda1, float(lam2))
            dual, _ = run_sr_blahut(
                problem, triple, max_iters=config.max_iters,
                delta=config.delta, keep_trace=False,
            )
            oracle = brute_force_sr_dual(problem, triple, steps)
            rows.append(
                ("sr", config.nu1, config.lambda1 * u, float(lam2) * u,
                 dual.f_value * u, oracle.value * u,
                 abs(dual.f_value - oracle.value) * u, oracle.method,
                 oracle.resolution)
            )
    header = [
        "kind", "nu1", "lambda1", "lambda", "f_iterative", "f_oracle",
        "abs_diff", "method", "resolution",
    ]
    _write_csv(header, rows, config.out)
    if config.out and config.plot:
        plots.plot_oracle(rows, _plot_path(config.out))
    return 0


_COMMANDS = {
    "rd": _cmd_rd,
    "sr": _cmd_sr,
    "gauss-demo": _cmd_gauss_demo,
    "converse": _cmd_converse,
    "oracle": _cmd_oracle,
}


def run(config: RunConfig) -> int:
    """Execute one configuration; returns the process exit status."""
    if config.command not in _COMMANDS:
        raise ValidationError(f"unknown command {config.command!r}")
    return _COMMANDS[config.command](config)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refine-rd",
        description="Rate-distortion curves, successive-refinement surfaces, "
        "and nonasymptotic converse bounds.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, problem=True, slopes=True):
        if problem:
            p.add_argument("--problem", required=True, help="problem JSON path")
        if slopes:
            p.add_argument(
                "--slopes",
                required=(p.prog.split()[-1] in ("rd", "sr", "oracle")),
                help="slope grid lo:hi:count[:geom|lin]",
            )
        p.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS)
        p.add_argument("--delta", type=float, default=DEFAULT_DELTA,
                       help="stopping accuracy in nats")
        p.add_argument("--units", choices=("nats", "bits"), default="nats")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="CSV output path (stdout if absent)")
        p.add_argument("--no-plot", action="store_true",
                       help="skip the PNG written next to --out")

    p_rd = sub.add_parser("rd", help="single-stage dual sweep and curve points")
    common(p_rd)

    p_sr = sub.add_parser("sr", help="two-stage dual sweep over lambda2")
    common(p_sr)
    p_sr.add_argument("--nu1", type=float, default=0.0)
    p_sr.add_argument("--lambda1", type=float, default=0.0)

    p_g = sub.add_parser("gauss-demo", help="closed-form Gaussian demo slice")
    common(p_g, problem=False, slopes=False)
    p_g.add_argument("--slopes", default=None,
                     help="lambda2 grid lo:hi:count[:geom|lin] (default 0.5:10:31:geom)")
    p_g.add_argument("--iters", type=int, default=2000,
                     help="iterations per slope; the default runs each slope "
                     "to convergence")
    p_g.add_argument("--d2-grid", default="0.1:0.9:50",
                     help="evaluation grid lo:hi:count")

    p_c = sub.add_parser("converse", help="converse lower bounds for i.i.d. blocks")
    common(p_c, slopes=False)
    p_c.add_argument("--which", choices=("stagewise", "recombined", "block"), default="stagewise")
    p_c.add_argument("--n", type=int, default=1, help="blocklength")
    p_c.add_argument("--log-m1", type=float, required=True, help="ln M1 in nats")
    p_c.add_argument("--log-m2", required=True,
                     help="ln M2 grid lo:hi:count[:geom|lin] or a single value")
    p_c.add_argument("--gamma1", type=float, default=None, help="default ln n")
    p_c.add_argument("--gamma2", type=float, default=None, help="default ln n")
    p_c.add_argument("--d1", type=float, default=None)
    p_c.add_argument("--d2", type=float, default=None)
    p_c.add_argument("--nu1", type=float, default=0.0)
    p_c.add_argument("--lambda1", type=float, default=0.0)
    p_c.add_argument("--lambda2", type=float, default=None)
    p_c.add_argument("--samples", type=int, default=200_000,
                     help="Monte Carlo sample count above the exact-atom cap")

    p_o = sub.add_parser("oracle", help="iterative vs brute-force comparison table")
    common(p_o)
    p_o.add_argument("--nu1", type=float, default=0.0)
    p_o.add_argument("--lambda1", type=float, default=0.0)
    p_o.add_argument("--grid-steps", type=int, default=None)

    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    config = RunConfig(command=args.command)
    config.problem_path = getattr(args, "problem", None)
    slopes = getattr(args, "slopes", None)
    if slopes is not None:
        config.slopes = parse_slopes(slopes)
    config.max_iters = args.max_iters
    config.delta = args.delta
    if config.max_iters < 1:
        raise ValidationError("max-iters must be >= 1")
    if config.delta <= 0:
        raise ValidationError("delta must be > 0")
    config.units = args.units
    config.seed = args.seed
    config.out = args.out
    config.plot = not args.no_plot
    for name in ("nu1", "lambda1", "lambda2", "which", "n", "samples"):
        if hasattr(args, name):
            setattr(config, name, getattr(args, name))
    if args.command == "gauss-demo":
        config.iters = args.iters
        parts = args.d2_grid.split(":")
        if len(parts) != 3:
            raise ValidationError("d2 grid must be lo:hi:count")
        config.d2_grid = (float(parts[0]), float(parts[1]), int(parts[2]))
    if args.command == "converse":
        config.log_m1 = args.log_m1
        spec = args.log_m2
        config.log_m2 = (
            parse_slopes(spec) if ":" in spec else SlopeGrid(float(spec), float(spec), 1)
        )
        config.gamma1 = args.gamma1
        config.gamma2 = args.gamma2
        config.d1 = args.d1
        config.d2 = args.d2
    if hasattr(args, "grid_steps"):
        config.grid_steps = args.grid_steps
    return config


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _config_from_args(args)
        return run(config)
    except _VALIDATION_ERRORS as exc:
        _emit_error(exc)
        return 2
    except _NUMERICAL_ERRORS as exc:
        _emit_error(exc)
        return 3
    except OSError as exc:
        _emit_error(exc)
        return 4


def _emit_error(exc: Exception) -> None:
    record = {"error": type(exc).__name__, "detail": str(exc)}
    sys.stderr.write(json.dumps(record) + "\n")


if __name__ == "__main__":
    sys.exit(main())
