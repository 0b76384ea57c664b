# workbench.py
"""equidesign command line: forward solves, control optimization, gradient
checks and the validation suite. Every JSON written embeds the resolved
configuration under ``config``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from equilibrium import (
    EquilibriumState,
    FixedPointError,
    solve_equilibrium_robust,
    uniqueness_gap,
)
from objective import (
    CloverValley,
    ValleyError,
    argmax_radius,
    axis_profile,
    clover_mask,
    count_local_maxima,
    density_moments,
    ensemble_term,
    evaluate_J,
    region_mass,
    ring_means,
    valley_eval,
)
from operators import (
    EigenvalueError,
    SolverError,
    SparseSystem,
    adjudicate_stencil,
    convergence_order,
    laplacian_for,
    manufactured_error,
    smallest_eigenvalue,
)
from optimizer import check_control, ncg_minimize
from polar_grid import FieldError, PolarGrid, ScalarField, build_grid, integrate
from sensitivity import gradient_check, smooth_perturbation, theorem_hypothesis
from utils.field_io import FieldDumpError, read_field, write_field
from utils.settings import (
    ConfigError,
    RunConfig,
    apply_overrides,
    load_config,
    load_environment,
    log_level,
    thread_count,
)

logger = logging.getLogger("equidesign")

EXIT_OK = 0
EXIT_CHECKS = 1
EXIT_FORWARD = 2
EXIT_ABORT = 3

MASS_TOL = 1e-12
MANUFACTURED_LEVELS: Tuple[Tuple[int, int], ...] = ((32, 24), (64, 48), (128, 96))
LAMBDA_1 = 5.783185962946784  # first zero of J0, squared
LAMBDA_TOL = 0.02
FORWARD_FAILURES = (FixedPointError, SolverError)


class Console:
    def __init__(self, quiet: bool = False):
        self.quiet = quiet

    def ok(self, msg: str) -> None:
        if not self.quiet:
            print(f"✔ {msg}")

    def fail(self, msg: str) -> None:
        print(f"✖ {msg}", file=sys.stderr)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def write_json(path: Path, payload: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=_jsonable) + "\n", encoding="utf-8")
    return path


class Run:
    """Grid, valley, control and Laplacian resolved from one RunConfig."""

    def __init__(self, config: RunConfig, console: Console):
        self.config = config
        self.console = console
        self.out = Path(config.output_dir)
        self.grid: PolarGrid = build_grid(config.grid.n_phi, config.grid.n_radial)
        self.V = valley_eval(config.valley, self.grid)
        self.u0 = (
            read_field(config.control, self.grid)
            if config.control is not None
            else self.grid.zeros()
        )
        self.warm_start: Optional[ScalarField] = (
            read_field(config.warm_start, self.grid) if config.warm_start is not None else None
        )
        self.laplacian: SparseSystem = laplacian_for(self.grid, config.stencil)

    def payload(self, **body: Any) -> Dict[str, Any]:
        return {"config": self.config.to_dict(), "stencil_variant": self.laplacian.variant, **body}

    def emit_json(self, name: str, kind: str = "report", **body: Any) -> Optional[Path]:
        if kind not in self.config.emit:
            return None
        path = write_json(self.out / name, self.payload(**body))
        self.console.ok(f"{name} -> {path}")
        return path

    def emit_fields(self, fields: Dict[str, ScalarField]) -> None:
        if "fields" not in self.config.emit:
            return
        for name, f in fields.items():
            path = write_field(f, self.out / name)
            self.console.ok(f"{name} -> {path}")

    def forward_failure(self, name: str, exc: Exception) -> int:
        self.console.fail(f"forward solve failed: {exc}")
        body: Dict[str, Any] = {"error": type(exc).__name__, "message": str(exc)}
        residual = getattr(exc, "residual", None)
        if residual is not None:
            body["residual"] = residual
        write_json(self.out / name, self.payload(**body))
        return EXIT_FORWARD


def state_summary(state: EquilibriumState, V: ScalarField) -> Dict[str, Any]:
    rho = state.rho
    _, profile = axis_profile(rho)
    moments = density_moments(rho)
    return {
        "fp_iterations": state.fp_iterations,
        "fp_residual": state.fp_residual,
        "fp_history": list(state.fp_history),
        "mass": integrate(rho),
        "log_partition": state.log_partition,
        "J_ensemble": ensemble_term(V, rho),
        "min_U": float(np.min(state.U.values)),
        "argmax_radius": argmax_radius(rho),
        "moments": moments,
        "var_ratio_y_x": moments["var_y"] / moments["var_x"] if moments["var_x"] > 0 else math.inf,
        "axis_local_maxima": count_local_maxima(profile),
        "ring_means": ring_means(rho),
    }


# -- commands ------------------------------------------------------------------


def cmd_forward(run: Run) -> int:
    try:
        state = solve_equilibrium_robust(
            run.u0,
            run.grid,
            run.config.optimize.fp,
            warm_start=run.warm_start,
            laplacian=run.laplacian,
        )
    except FORWARD_FAILURES as e:
        return run.forward_failure("forward.json", e)

    summary = state_summary(state, run.V)
    checks = {"mass": abs(summary["mass"] - 1.0) <= MASS_TOL}
    run.emit_fields({"u.csv": state.u, "U.csv": state.U, "rho.csv": state.rho})
    run.emit_json("forward.json", **summary, checks=checks)
    return EXIT_OK if all(checks.values()) else EXIT_CHECKS


def cmd_optimize(run: Run, *, adjoint_sign: float = 1.0) -> int:
    cfg = run.config
    fp = cfg.optimize.fp
    try:
        check_control(run.u0)
    except FieldError as e:
        run.console.fail(f"bad configuration: {e}")
        return EXIT_FORWARD
    try:
        baseline = solve_equilibrium_robust(run.grid.zeros(), run.grid, fp, laplacian=run.laplacian)
    except FORWARD_FAILURES as e:
        return run.forward_failure("history.json", e)

    try:
        u, state, report = ncg_minimize(
            run.u0, run.V, cfg.optimize, laplacian=run.laplacian, adjoint_sign=adjoint_sign
        )
    except FORWARD_FAILURES as e:
        return run.forward_failure("history.json", e)

    extra: Dict[str, Any] = {}
    if isinstance(cfg.valley, CloverValley):
        mask = clover_mask(run.grid, cfg.valley.scale)
        extra["clover_mass"] = {
            "baseline": region_mass(baseline.rho, mask),
            "optimized": region_mass(state.rho, mask),
        }

    run.emit_fields(
        {"u_opt.csv": u, "U_opt.csv": state.U, "rho_opt.csv": state.rho, "V.csv": run.V}
    )
    checks = {"monotone": report.monotone()}
    run.emit_json(
        "history.json",
        kind="history",
        report=report.to_dict(),
        baseline={**state_summary(baseline, run.V), "J": evaluate_J(baseline, run.V, cfg.optimize.alpha)},
        final={**state_summary(state, run.V), "J": evaluate_J(state, run.V, cfg.optimize.alpha)},
        checks=checks,
        **extra,
    )
    if report.reason in ("line-search-failure", "forward-failure"):
        run.console.fail(f"optimizer aborted: {report.reason} ({report.message})")
        return EXIT_ABORT
    if not all(checks.values()):
        run.console.fail("J increased over accepted iterates")
        return EXIT_CHECKS
    return EXIT_OK


def cmd_gradcheck(run: Run, *, adjoint_sign: float = 1.0, threads: int = 1) -> int:
    cfg = run.config
    gc = cfg.gradcheck
    tolerance = gc.tolerance
    if tolerance is None:
        tolerance = 1e-6 if not np.any(run.V.values) else 1e-4
    v = smooth_perturbation(run.grid, gc.seed)
    try:
        report = gradient_check(
            run.u0,
            run.V,
            cfg.optimize.alpha,
            v,
            gc.steps,
            tolerance=tolerance,
            linearization=gc.linearization,
            adjoint_sign=adjoint_sign,
            variant=run.laplacian.variant,
            threads=threads,
        )
    except FORWARD_FAILURES as e:
        return run.forward_failure("gradcheck.json", e)

    run.emit_json("gradcheck.json", **report.to_dict(), adjoint_sign=adjoint_sign)
    if not report.passed:
        run.console.fail(
            f"gradient check failed: min relative error {report.min_error:.3e} > {tolerance:.1e}"
        )
        return EXIT_CHECKS
    return EXIT_OK


def _item(passed: bool, **data: Any) -> Dict[str, Any]:
    return {"passed": bool(passed), **data}


def _guarded(fn: Callable[[], Dict[str, Any]]) -> Dict[str, Any]:
    try:
        return fn()
    except (SolverError, EigenvalueError, FixedPointError) as e:
        return _item(False, error=type(e).__name__, message=str(e))


def cmd_validate(run: Run) -> int:
    grid = run.grid
    fp = run.config.optimize.fp
    items: Dict[str, Dict[str, Any]] = {}

    def manufactured() -> Dict[str, Any]:
        errors = [manufactured_error(build_grid(n, m), run.laplacian.variant) for n, m in MANUFACTURED_LEVELS]
        order = convergence_order(errors, [m for _, m in MANUFACTURED_LEVELS])
        fine = dict(zip(MANUFACTURED_LEVELS, errors))[(64, 48)]
        return _item(
            order >= 1.5 and fine <= 1e-3,
            levels=[list(lv) for lv in MANUFACTURED_LEVELS],
            errors=errors,
            order=order,
        )

    def stencil() -> Dict[str, Any]:
        chosen, study = adjudicate_stencil()
        return _item(True, chosen=chosen, study=study)

    def eigenvalue() -> Dict[str, Any]:
        lam = smallest_eigenvalue(run.laplacian, grid)
        hyp = theorem_hypothesis(lam)
        rel = abs(lam - LAMBDA_1) / LAMBDA_1
        return _item(rel <= LAMBDA_TOL and hyp["holds"], reference=LAMBDA_1, rel_error=rel, **hyp)

    def quadrature() -> Dict[str, Any]:
        area = integrate(grid.constant(1.0))
        second = integrate(grid.sample(lambda r, phi: r**2))
        area_err = abs(area - math.pi) / math.pi
        return _item(
            area_err <= 1e-3,
            area=area,
            area_rel_error=area_err,
            r2_moment=second,
            r2_rel_error=abs(second - math.pi / 2) / (math.pi / 2),
        )

    def uniqueness() -> Dict[str, Any]:
        zero = grid.zeros()
        gap = uniqueness_gap(zero, grid, fp, laplacian=run.laplacian)
        state = solve_equilibrium_robust(zero, grid, fp, laplacian=run.laplacian)
        min_U = float(np.min(state.U.values))
        return _item(gap <= 1e-9 and min_U >= -1e-10, gap=gap, min_U=min_U)

    for name, fn in (
        ("manufactured_solution", manufactured),
        ("stencil_adjudication", stencil),
        ("poincare_hypothesis", eigenvalue),
        ("quadrature", quadrature),
        ("uniqueness", uniqueness),
    ):
        items[name] = _guarded(fn)
        mark = run.console.ok if items[name]["passed"] else run.console.fail
        mark(f"{name}: {'pass' if items[name]['passed'] else 'FAIL'}")

    passed = all(item["passed"] for item in items.values())
    run.emit_json("validate.json", items=items, passed=passed)
    return EXIT_OK if passed else EXIT_CHECKS


# -- CLI -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="equidesign",
        description="Equilibrium densities on the unit disk and H1-gradient design of the control potential.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "forward": "Solve the equilibrium for a control (zero unless the config names a file)",
        "optimize": "Minimize the regularized ensemble objective with NCG",
        "gradcheck": "Compare the adjoint derivative against central differences",
        "validate": "Run the operator, eigenvalue, quadrature and uniqueness checks",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", default=None, help="JSON run configuration (or a report JSON)")
        p.add_argument("-o", "--output-dir", default=None, help="Directory for the outputs")
        p.add_argument("--grid", nargs=2, type=int, metavar=("N", "M"), help="Angular and radial node counts")
        p.add_argument("--alpha", type=float, default=None, help="Regularization weight")
        p.add_argument("--tol", type=float, default=None, help="Stopping tolerance on the H1 step")
        p.add_argument("--max-iters", type=int, default=None, help="Iteration cap (k_max)")
        p.add_argument(
            "--stencil",
            choices=("auto", "literal", "symmetric"),
            default=None,
            help="Interior radial diagonal variant (auto picks by the order test)",
        )
        p.add_argument("-q", "--quiet", action="store_true", help="Suppress success lines")
        p.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
        p.add_argument("--adjoint-sign-flip", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_environment()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=log_level(args.verbose),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    console = Console(args.quiet)

    try:
        config = apply_overrides(
            load_config(args.config),
            grid=tuple(args.grid) if args.grid else None,
            alpha=args.alpha,
            tol=args.tol,
            max_iters=args.max_iters,
            output_dir=args.output_dir,
            stencil=args.stencil,
        )
        threads = thread_count()
        run = Run(config, console)
    except (ConfigError, ValleyError, FieldDumpError, ValueError) as e:
        console.fail(f"bad configuration: {e}")
        return EXIT_FORWARD
    except SolverError as e:
        console.fail(f"operator setup failed: {e}")
        return EXIT_FORWARD

    logger.debug("resolved config: %s", config.to_dict())
    sign = -1.0 if args.adjoint_sign_flip else 1.0
    if args.command == "forward":
        return cmd_forward(run)
    if args.command == "optimize":
        return cmd_optimize(run, adjoint_sign=sign)
    if args.command == "gradcheck":
        return cmd_gradcheck(run, adjoint_sign=sign, threads=threads)
    return cmd_validate(run)


if __name__ == "__main__":
    raise SystemExit(main())
