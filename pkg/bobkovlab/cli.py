"""Command line interface, writing CSV reports for sweeps and JSON reports otherwise.

Exit codes are 0 when every check passes, 1 when a tolerance is exceeded (or an
optimization fails to converge) and 2 for usage errors. The number of worker threads
used for sweeps is capped by the ``BOBKOV_LAB_THREADS`` environment variable; rows
are always written in a deterministic order.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from typing import Any

import equinox as eqx
import jax
import jax.numpy as jnp
import jax.random as jr

from bobkovlab.bellman import bellman_value, hjb_sides
from bobkovlab.corpus import random_test_functions, random_test_functions_2d
from bobkovlab.functions import parse_function_spec, parse_function_spec_2d
from bobkovlab.gauss import _cdf, _inv_cdf, _pdf
from bobkovlab.quadrature import truncated_halfspace_mass_closed_form
from bobkovlab.slope import DomainPoint, solve_slope
from bobkovlab.variational import CollocationGrid, certify_value
from bobkovlab.variational.collocation import MIN_NODES
from bobkovlab.verifier import (
    DERIVATIVE_NAMES,
    MIN_LIMIT_HORIZON,
    bobkov_deficit,
    derivative_errors,
    endpoint_limits,
    equality_characterization,
    tensorize_check_2d,
)

logger = logging.getLogger(__name__)

THREADS_ENV = "BOBKOV_LAB_THREADS"
DEFAULT_LAMBDAS = (0.1, 0.3, 0.5, 0.7, 0.9)
EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE = 0, 1, 2
# Deficits at most this classify a function as attaining equality.
EQUALITY_DEFICIT_TOL = 1e-8


class UsageError(ValueError):
    """Invalid command line input."""


class ReportRecord(eqx.Module):
    """A JSON report of a single command.

    Attributes:
        command: The subcommand.
        inputs: The inputs, as JSON compatible values.
        outputs: Named numeric outputs.
        tolerances: The tolerance each check was performed against.
        status: One of "ok", "tolerance_exceeded" or "error".
        seed: The seed, for commands drawing random corpora.
    """

    command: str
    inputs: dict[str, Any]
    outputs: dict[str, Any]
    tolerances: dict[str, float]
    status: str
    seed: int | None = None

    def __check_init__(self):
        if self.status not in ("ok", "tolerance_exceeded", "error"):
            raise ValueError(f"Unknown status {self.status!r}.")

    def to_json(self, generated_at: str) -> str:
        payload = {
            "command": self.command,
            "generated_at": generated_at,
            "inputs": self.inputs,
            "outputs": {k: _json_value(v) for k, v in self.outputs.items()},
            "tolerances": self.tolerances,
            "status": self.status,
        }
        if self.seed is not None:
            payload["seed"] = self.seed
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.status == "ok" else EXIT_TOLERANCE


def _json_value(value):
    if isinstance(value, bool | str) or value is None:
        return value
    value = jnp.asarray(value)
    if value.dtype == bool:
        return bool(value)
    value = float(value)
    return value if math.isfinite(value) else None


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _format_cell(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, bool) or jnp.asarray(value).dtype == bool:
        return "true" if bool(value) else "false"
    return "%.17g" % float(value)


def _open_output(path: str | None):
    if path is None or path == "-":
        return sys.stdout
    return open(path, "w", newline="", encoding="utf-8")


def _write_csv(
    path: str | None,
    header: Sequence[str],
    rows: Sequence[Sequence],
    seed: int | None = None,
):
    stream = _open_output(path)
    try:
        stream.write(f"# generated {_timestamp()}\n")
        if seed is not None:
            stream.write(f"# seed {seed}\n")
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(cell) for cell in row])
    finally:
        if stream is not sys.stdout:
            stream.close()


def _write_json(path: str | None, record: ReportRecord):
    stream = _open_output(path)
    try:
        stream.write(record.to_json(_timestamp()))
    finally:
        if stream is not sys.stdout:
            stream.close()


def _max_workers() -> int:
    value = os.environ.get(THREADS_ENV)
    if value is None:
        return min(4, os.cpu_count() or 1)
    try:
        workers = int(value)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {value!r}.") from None
    if workers < 1:
        raise UsageError(f"{THREADS_ENV} must be positive, got {workers}.")
    return workers


def _map_ordered(fn: Callable, items: Sequence) -> list:
    """Map over items with the worker pool, returning results in input order."""
    with ThreadPoolExecutor(max_workers=_max_workers()) as pool:
        return list(pool.map(fn, items))


def _linspace_arg(values: Sequence[float | int], name: str) -> jax.Array:
    low, high, num = values
    if not (math.isfinite(low) and math.isfinite(high)) or low > high:
        raise UsageError(f"{name} must be a finite range with low <= high.")
    if num != int(num) or num < 1:
        raise UsageError(f"The number of {name} values must be a positive integer.")
    return jnp.linspace(low, high, int(num))


def _lambdas_arg(values: Sequence[float | int]) -> jax.Array:
    if not all(0 < lam < 1 for lam in values):
        raise UsageError("lambda values must lie strictly between 0 and 1.")
    return jnp.asarray(values, dtype=float)


def _sweep_grid(args) -> tuple[jax.Array, jax.Array, jax.Array]:
    return (
        _linspace_arg(args.t_range, "t"),
        _linspace_arg(args.p_range, "p"),
        _lambdas_arg(args.lambdas),
    )


def _row_points(t, ps, lambdas) -> DomainPoint:
    p_grid, lam_grid = jnp.meshgrid(ps, lambdas, indexing="ij")
    return DomainPoint.from_fraction(
        jnp.full(p_grid.size, t), p_grid.reshape(-1), lam_grid.reshape(-1)
    )


@jax.jit
def _hjb_rows(points: DomainPoint):
    def single(pt):
        evaluated = bellman_value(pt, throw=False)
        lhs, rhs = hjb_sides(evaluated, pt.t, pt.p)
        scale = _pdf(pt.t) * _pdf(pt.p)
        return evaluated.a, evaluated.M, lhs - rhs, jnp.abs(lhs - rhs) / scale

    return jax.vmap(single)(points)


def cmd_hjb_sweep(args) -> int:
    """Residual of the HJB identity over a grid of ``(t, p, lambda)``."""
    ts, ps, lambdas = _sweep_grid(args)

    def row_block(t):
        points = _row_points(t, ps, lambdas)
        a, value, residual, relative = _hjb_rows(points)
        lam = points.y / _cdf(points.t)
        rows = []
        for i in range(points.t.shape[0]):
            if not jnp.isfinite(a[i]):
                status = "ill_conditioned"
            elif relative[i] <= args.tol:
                status = "ok"
            else:
                status = "tolerance_exceeded"
            rows.append(
                [points.t[i], points.p[i], lam[i], a[i], value[i], residual[i],
                 relative[i], args.tol, status]
            )
        return rows

    rows = [row for block in _map_ordered(row_block, list(ts)) for row in block]
    header = ["t", "p", "lambda", "a", "M", "residual", "rel_residual", "tol", "status"]
    _write_csv(args.output, header, rows)
    failures = sum(row[-1] != "ok" for row in rows)
    finite = [float(row[6]) for row in rows if row[-1] != "ill_conditioned"]
    print(
        f"hjb-sweep: {len(rows)} points, {failures} flagged, max relative residual "
        f"{max(finite, default=math.nan):.3e} (tol {args.tol:g}).",
        file=sys.stderr,
    )
    return EXIT_OK if failures == 0 else EXIT_TOLERANCE


@jax.jit
def _derivative_rows(points: DomainPoint):
    return jax.vmap(derivative_errors)(points)


def cmd_derivative_check(args) -> int:
    """Closed-form partial derivatives against central differences over a grid."""
    ts, ps, lambdas = _sweep_grid(args)

    def row_block(t):
        points = _row_points(t, ps, lambdas)
        errors = _derivative_rows(points)
        lam = points.y / _cdf(points.t)
        rows = []
        for i in range(points.t.shape[0]):
            worst = jnp.max(errors[i])
            status = "ok" if worst <= args.tol else "tolerance_exceeded"
            rows.append(
                [points.t[i], points.p[i], lam[i], *errors[i], args.tol, status]
            )
        return rows

    rows = [row for block in _map_ordered(row_block, list(ts)) for row in block]
    header = ["t", "p", "lambda", *(f"err_{name}" for name in DERIVATIVE_NAMES)]
    _write_csv(args.output, [*header, "tol", "status"], rows)
    failures = sum(row[-1] != "ok" for row in rows)
    print(
        f"derivative-check: {len(rows)} points, {failures} flagged (tol {args.tol:g}).",
        file=sys.stderr,
    )
    return EXIT_OK if failures == 0 else EXIT_TOLERANCE


def _parse_1d(text: str):
    try:
        return parse_function_spec(text)
    except ValueError as err:
        raise UsageError(str(err)) from None


def _parse_2d(text: str):
    try:
        return parse_function_spec_2d(text)
    except ValueError as err:
        raise UsageError(str(err)) from None


def _bobkov_outputs(f, args) -> tuple[dict[str, Any], bool]:
    report = bobkov_deficit(f)
    characterization = equality_characterization(f, tol=args.equality_tol)
    equality = bool(characterization.is_optimizer)
    # The equality flag must agree with the deficit classification.
    agreement = equality == bool(report.deficit <= EQUALITY_DEFICIT_TOL)
    outputs = {
        "lhs": report.lhs,
        "rhs": report.rhs,
        "deficit": report.deficit,
        "psi_integral": report.psi_integral,
        "min_psi": report.min_psi,
        "sup_residual": characterization.sup_residual,
        "equality": equality,
        "agreement": agreement,
    }
    passed = bool(
        (report.deficit >= -args.tol)
        & (jnp.abs(report.deficit - report.psi_integral) <= args.psi_tol)
    )
    return outputs, passed and agreement


def cmd_bobkov_check(args) -> int:
    """Bobkov's inequality for one test function, or a seeded random corpus."""
    tolerances = {
        "deficit": args.tol,
        "psi_integral": args.psi_tol,
        "equality": args.equality_tol,
        "equality_deficit": EQUALITY_DEFICIT_TOL,
    }
    if args.corpus is None:
        if args.function is None:
            raise UsageError("Pass --function or --corpus.")
        outputs, passed = _bobkov_outputs(_parse_1d(args.function), args)
        record = ReportRecord(
            command="bobkov-check",
            inputs={"function": args.function},
            outputs=outputs,
            tolerances=tolerances,
            status="ok" if passed else "tolerance_exceeded",
        )
        _write_json(args.output, record)
        print(
            f"bobkov-check: deficit {float(outputs['deficit']):.3e}, "
            f"equality={outputs['equality']}.",
            file=sys.stderr,
        )
        return record.exit_code

    if args.corpus < 1:
        raise UsageError("--corpus must be positive.")
    corpus = random_test_functions(jr.key(args.seed), args.corpus)

    def row(entry):
        identifier, f = entry
        outputs, passed = _bobkov_outputs(f, args)
        return [identifier, *outputs.values(), "ok" if passed else "tolerance_exceeded"]

    rows = sorted(_map_ordered(row, corpus), key=lambda r: r[0])
    header = ["id", "lhs", "rhs", "deficit", "psi_integral", "min_psi",
              "sup_residual", "equality", "agreement", "status"]
    _write_csv(args.output, header, rows, seed=args.seed)
    failures = sum(r[-1] != "ok" for r in rows)
    print(
        f"bobkov-check: {len(rows)} functions (seed {args.seed}), {failures} flagged.",
        file=sys.stderr,
    )
    return EXIT_OK if failures == 0 else EXIT_TOLERANCE


def cmd_solve_slope(args) -> int:
    """Solve for the implicit slope at a single point."""
    lam = args.lam
    if not 0 < lam < 1:
        raise UsageError("lambda must lie strictly between 0 and 1.")
    point = DomainPoint.from_fraction(args.t, args.p, lam)
    solution = solve_slope(point, args.tol, throw=False)
    passed = bool(
        ~solution.ill_conditioned & (jnp.abs(solution.residual) <= args.tol)
    )
    status = "ok" if passed else "tolerance_exceeded"
    header = ["t", "p", "lambda", "y", "a", "residual", "iterations",
              "ill_conditioned", "tol", "status"]
    row = [point.t, point.p, lam, point.y, solution.a, solution.residual,
           solution.iterations, solution.ill_conditioned, args.tol, status]
    _write_csv(args.output, header, [row])
    return EXIT_OK if passed else EXIT_TOLERANCE


def _certify_y(args) -> float:
    given = [v is not None for v in (args.y, args.lam, args.slope)]
    if sum(given) != 1:
        raise UsageError("Pass exactly one of --y, --lambda and --slope.")
    if not 0 < args.x < 1:
        raise UsageError("x must lie strictly between 0 and 1.")
    if args.y is not None:
        return args.y
    if args.lam is not None:
        if not 0 < args.lam < 1:
            raise UsageError("lambda must lie strictly between 0 and 1.")
        return float(args.lam * _cdf(args.t))
    return float(truncated_halfspace_mass_closed_form(args.t, _inv_cdf(args.x), args.slope))


def cmd_certify(args) -> int:
    """Certify the Bellman function against the collocation optimum."""
    y = _certify_y(args)
    inputs = {"t": args.t, "x": args.x, "y": y, "n": args.n, "t_low": args.t_low}
    tolerances = {
        "constraint": args.constraint_tol,
        "gradient": args.gradient_tol,
    }
    try:
        grid = CollocationGrid.uniform(args.t, args.n, t_low=args.t_low)
    except ValueError as err:
        logger.error("Certification failed: %s", err)
        record = ReportRecord(
            command="certify",
            inputs=inputs,
            outputs={"certified": False, "message": str(err)},
            tolerances=tolerances,
            status="error",
        )
        _write_json(args.output, record)
        return EXIT_TOLERANCE

    report = certify_value(
        args.t,
        args.x,
        y,
        grid,
        init=args.init,
        bellman_offset=args.bellman_offset,
        constraint_tol=args.constraint_tol,
        gradient_tol=args.gradient_tol,
        show_progress=args.progress,
    )
    tolerances["gap"] = float(report.tolerance)
    record = ReportRecord(
        command="certify",
        inputs=inputs,
        outputs={
            "optimum": report.optimum,
            "candidate_cost": report.candidate_cost,
            "bellman": report.bellman,
            "optimum_gap": report.optimum_gap,
            "candidate_gap": report.candidate_gap,
            "refinement_error": report.refinement_error,
            "converged": bool(report.converged),
            "certified": bool(report.certified),
        },
        tolerances=tolerances,
        status="ok" if report.certified else "tolerance_exceeded",
    )
    _write_json(args.output, record)
    print(
        f"certify: optimum gap {float(report.optimum_gap):.3e}, candidate gap "
        f"{float(report.candidate_gap):.3e}, certified={bool(report.certified)}.",
        file=sys.stderr,
    )
    return record.exit_code


def cmd_limits(args) -> int:
    """The Bellman function along a trajectory at both ends of a horizon."""
    f = _parse_1d(args.function)
    if args.horizon < MIN_LIMIT_HORIZON:
        raise UsageError(f"The horizon must be at least {MIN_LIMIT_HORIZON}.")
    inputs = {"function": args.function, "horizon": args.horizon}
    tolerances = {"low_end": args.tol, "high_end_gap": args.tol}
    try:
        limits = endpoint_limits(f, args.horizon)
    except ValueError as err:
        logger.error("Endpoint limits failed: %s", err)
        record = ReportRecord(
            command="limits",
            inputs=inputs,
            outputs={"message": str(err)},
            tolerances=tolerances,
            status="error",
        )
        _write_json(args.output, record)
        return record.exit_code
    passed = bool((limits.low_end <= args.tol) & (limits.high_end_gap <= args.tol))
    record = ReportRecord(
        command="limits",
        inputs=inputs,
        outputs={
            "low_end": limits.low_end,
            "high_end_gap": limits.high_end_gap,
            "horizon": limits.horizon,
        },
        tolerances=tolerances,
        status="ok" if passed else "tolerance_exceeded",
    )
    _write_json(args.output, record)
    return record.exit_code


def _tensor_outputs(g, args) -> tuple[dict[str, Any], bool]:
    report = tensorize_check_2d(g)
    outputs = {
        "rhs": report.rhs,
        "step_one": report.step_one,
        "step_two": report.step_two,
        "lhs": report.lhs,
        "slack_one": report.slack_one,
        "slack_two": report.slack_two,
        "slack_three": report.slack_three,
        "total_deficit": report.total_deficit,
    }
    slacks = jnp.stack([report.slack_one, report.slack_two, report.slack_three])
    return outputs, bool(jnp.all(slacks >= -args.tol))


def cmd_tensor_check(args) -> int:
    """The tensorization chain for a two dimensional test function or a corpus."""
    if args.corpus is None:
        if args.function is None:
            raise UsageError("Pass --function or --corpus.")
        outputs, passed = _tensor_outputs(_parse_2d(args.function), args)
        record = ReportRecord(
            command="tensor-check",
            inputs={"function": args.function},
            outputs=outputs,
            tolerances={"slack": args.tol},
            status="ok" if passed else "tolerance_exceeded",
        )
        _write_json(args.output, record)
        return record.exit_code

    if args.corpus < 1:
        raise UsageError("--corpus must be positive.")
    corpus = random_test_functions_2d(jr.key(args.seed), args.corpus)

    def row(entry):
        identifier, g = entry
        outputs, passed = _tensor_outputs(g, args)
        return [identifier, *outputs.values(), "ok" if passed else "tolerance_exceeded"]

    rows = sorted(_map_ordered(row, corpus), key=lambda r: r[0])
    header = ["id", "rhs", "step_one", "step_two", "lhs", "slack_one", "slack_two",
              "slack_three", "total_deficit", "status"]
    _write_csv(args.output, header, rows, seed=args.seed)
    return EXIT_OK if all(r[-1] == "ok" for r in rows) else EXIT_TOLERANCE


def _add_sweep_args(parser: argparse.ArgumentParser, tol: float):
    parser.add_argument(
        "--t-range", nargs=3, type=float, default=[-2.0, 2.0, 6],
        metavar=("LOW", "HIGH", "NUM"), help="Grid of t values (default -2 2 6).",
    )
    parser.add_argument(
        "--p-range", nargs=3, type=float, default=[-2.0, 2.0, 6],
        metavar=("LOW", "HIGH", "NUM"), help="Grid of p values (default -2 2 6).",
    )
    parser.add_argument(
        "--lambdas", nargs="+", type=float, default=list(DEFAULT_LAMBDAS),
        help="Mass fractions y/cdf(t) (default 0.1 0.3 0.5 0.7 0.9).",
    )
    parser.add_argument("--tol", type=float, default=tol, help=f"Default {tol:g}.")


def build_parser() -> argparse.ArgumentParser:
    """The argument parser, with one subparser per command."""
    parser = argparse.ArgumentParser(
        prog="bobkov-lab",
        description="Numerical verification of Bobkov's inequality via its Bellman "
        "function.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    parser.add_argument("-o", "--output", help="Report path (default stdout).")
    parser.add_argument(
        "--seed", type=int, default=42, help="Seed for random corpora (default 42)."
    )
    commands = parser.add_subparsers(dest="command", required=True)

    sweep = commands.add_parser("hjb-sweep", help="HJB identity residuals on a grid.")
    _add_sweep_args(sweep, 1e-8)
    sweep.set_defaults(handler=cmd_hjb_sweep)

    derivatives = commands.add_parser(
        "derivative-check", help="Closed-form partials against finite differences."
    )
    _add_sweep_args(derivatives, 1e-6)
    derivatives.set_defaults(handler=cmd_derivative_check)

    bobkov = commands.add_parser("bobkov-check", help="Bobkov's inequality deficit.")
    bobkov.add_argument("--function", help="e.g. probit-poly:-0.2,0.7 or const:0.3")
    bobkov.add_argument("--corpus", type=int, help="Check N seeded random functions.")
    bobkov.add_argument("--tol", type=float, default=1e-9, help="Default 1e-9.")
    bobkov.add_argument("--psi-tol", type=float, default=1e-7, help="Default 1e-7.")
    bobkov.add_argument(
        "--equality-tol", type=float, default=1e-6, help="Default 1e-6."
    )
    bobkov.set_defaults(handler=cmd_bobkov_check)

    slope = commands.add_parser("solve-slope", help="Solve for the implicit slope.")
    slope.add_argument("--t", type=float, required=True)
    slope.add_argument("--p", type=float, required=True)
    slope.add_argument("--lambda", dest="lam", type=float, required=True)
    slope.add_argument("--tol", type=float, default=1e-12, help="Default 1e-12.")
    slope.set_defaults(handler=cmd_solve_slope)

    certify = commands.add_parser(
        "certify", help="Certify B against the collocation optimum."
    )
    certify.add_argument("--t", type=float, required=True)
    certify.add_argument("--x", type=float, required=True)
    certify.add_argument("--y", type=float)
    certify.add_argument("--lambda", dest="lam", type=float)
    certify.add_argument("--slope", type=float, help="Take y from this slope.")
    certify.add_argument(
        "--n",
        type=int,
        default=512,
        help=f"Grid size, at least {MIN_NODES} (default 512). Smaller grids give an "
        "error report and exit code 1.",
    )
    certify.add_argument("--t-low", type=float, default=8.0, help="Default 8.")
    certify.add_argument(
        "--init", choices=("constant", "candidate"), default="constant"
    )
    certify.add_argument("--bellman-offset", type=float, default=0.0)
    certify.add_argument("--constraint-tol", type=float, default=1e-8)
    certify.add_argument("--gradient-tol", type=float, default=1e-6)
    certify.add_argument("--progress", action="store_true", help="Show progress.")
    certify.set_defaults(handler=cmd_certify)

    limits = commands.add_parser("limits", help="Endpoint limits of B.")
    limits.add_argument("--function", required=True)
    limits.add_argument(
        "--horizon",
        type=float,
        default=7.0,
        help=f"At least {MIN_LIMIT_HORIZON} (default 7).",
    )
    limits.add_argument("--tol", type=float, default=1e-5, help="Default 1e-5.")
    limits.set_defaults(handler=cmd_limits)

    tensor = commands.add_parser("tensor-check", help="Tensorization chain in 2D.")
    tensor.add_argument("--function", help="e.g. probit-affine:0.6,0.8,-0.1")
    tensor.add_argument("--corpus", type=int, help="Check N seeded random functions.")
    tensor.add_argument("--tol", type=float, default=1e-7, help="Default 1e-7.")
    tensor.set_defaults(handler=cmd_tensor_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run the command line interface, returning the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    logger.debug("Running %s.", args.command)
    try:
        return args.handler(args)
    except UsageError as err:
        print(f"{parser.prog} {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
