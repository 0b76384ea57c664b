# optimizer.py
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from equilibrium import EquilibriumState, FixedPointError, FixedPointParams
from objective import ensemble_term, reduced_objective, regularizer
from operators import SolverError, SparseSystem, laplacian_for
from polar_grid import FieldError, ScalarField, h1_inner, h1_norm
from sensitivity import (
    LINEARIZATIONS,
    RIESZ_METRICS,
    GradientBundle,
    directional_derivative,
    reduced_gradient,
)

__all__ = [
    "LineSearchParams",
    "Box",
    "OptimizeConfig",
    "IterateRecord",
    "OptimizeReport",
    "LineSearchResult",
    "StationaryPoint",
    "LineSearchError",
    "NonDescentError",
    "check_control",
    "fr_beta",
    "armijo_search",
    "ncg_minimize",
]

logger = logging.getLogger(__name__)

METHODS = ("ncg", "steepest")
INITIAL_STEPS = ("fixed", "interpolate")

# forward failures at a trial point are treated as a rejected step
_TRIAL_FAILURES = (FixedPointError, SolverError, FieldError, FloatingPointError)


class StationaryPoint(ArithmeticError):
    """Previous gradient is zero; the caller stops instead of forming beta."""


class NonDescentError(ValueError):
    def __init__(self, dd: float):
        super().__init__(f"direction is not a descent direction (dJ[d] = {dd:.3e})")
        self.dd = dd


class LineSearchError(RuntimeError):
    def __init__(self, message: str, trials: List[Tuple[float, Optional[float]]]):
        super().__init__(message)
        self.trials = trials


@dataclass(frozen=True)
class LineSearchParams:
    c1: float = 1e-4
    shrink: float = 0.5
    s0: float = 1.0
    max_backtracks: int = 30
    initial: str = "fixed"
    s_max: float = 1e4

    def __post_init__(self) -> None:
        if not 0.0 < self.c1 < 1.0:
            raise ValueError("c1 must lie in (0, 1)")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink must lie in (0, 1)")
        if not self.s0 > 0 or not self.s_max >= self.s0:
            raise ValueError("need 0 < s0 <= s_max")
        if self.max_backtracks < 0:
            raise ValueError("max_backtracks must be non-negative")
        if self.initial not in INITIAL_STEPS:
            raise ValueError(f"initial must be one of {INITIAL_STEPS}")


@dataclass(frozen=True)
class Box:
    """Nodewise bounds M1 <= u <= M2 off the boundary ring, which stays at 0."""

    lower: float
    upper: float

    def __post_init__(self) -> None:
        if not self.lower <= self.upper:
            raise ValueError(f"box lower bound {self.lower} exceeds upper bound {self.upper}")

    def project(self, u: ScalarField) -> ScalarField:
        values = np.clip(u.values, self.lower, self.upper)
        values[u.grid.boundary] = 0.0
        return u.like(values)


def check_control(u: ScalarField) -> None:
    """Raise FieldError unless u vanishes on the boundary ring and takes one
    value on the origin ring."""
    ring = u.values[u.grid.origin_ring]
    if np.any(u.values[u.grid.boundary]):
        raise FieldError("control must vanish on the boundary ring")
    if np.any(ring != ring[0]):
        raise FieldError("control must take a single value on the origin ring")


@dataclass(frozen=True)
class OptimizeConfig:
    alpha: float = 1e-3
    tol: float = 1e-6
    k_max: int = 150
    ls: LineSearchParams = field(default_factory=LineSearchParams)
    restart_period: int = 10
    method: str = "ncg"
    box: Optional[Box] = None
    fp: FixedPointParams = field(default_factory=FixedPointParams)
    linearization: str = "normalized"
    riesz: str = "gram"
    gtol: float = 1e-12

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")
        if self.restart_period < 1:
            raise ValueError("restart_period must be at least 1")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.linearization not in LINEARIZATIONS:
            raise ValueError(f"linearization must be one of {LINEARIZATIONS}")
        if self.riesz not in RIESZ_METRICS:
            raise ValueError(f"riesz must be one of {RIESZ_METRICS}")
        if self.gtol < 0:
            raise ValueError("gtol must be non-negative")


@dataclass
class IterateRecord:
    k: int
    J: float
    ensemble: float
    regularizer: float
    grad_h1_norm: float
    step: float = 0.0
    backtracks: int = 0
    beta: float = 0.0
    restarted: bool = True
    E: float = math.nan


@dataclass
class OptimizeReport:
    records: List[IterateRecord] = field(default_factory=list)
    reason: str = "k_max"
    message: str = ""

    @property
    def iterations(self) -> int:
        return max(len(self.records) - 1, 0)

    @property
    def J_values(self) -> List[float]:
        return [rec.J for rec in self.records]

    def monotone(self) -> bool:
        J = self.J_values
        return all(b <= a for a, b in zip(J, J[1:]))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "reason": self.reason,
            "message": self.message,
            "iterations": self.iterations,
            "monotone": self.monotone(),
            "records": [asdict(rec) for rec in self.records],
        }


@dataclass(frozen=True, eq=False)
class LineSearchResult:
    step: float
    u: ScalarField
    J: float
    state: Any
    backtracks: int


def fr_beta(g_new: ScalarField, g_old: ScalarField) -> float:
    """Fletcher-Reeves ratio in the discrete H1 product."""
    denom = h1_inner(g_old, g_old)
    if denom <= 0.0:
        raise StationaryPoint("previous gradient vanishes")
    return h1_inner(g_new, g_new) / denom


def armijo_search(
    J_at: Callable[[ScalarField], Tuple[float, Any]],
    u: ScalarField,
    d: ScalarField,
    dd: float,
    params: LineSearchParams,
    *,
    J0: float,
    start: Optional[float] = None,
    project: Optional[Callable[[ScalarField], ScalarField]] = None,
    derivative: Optional[Callable[[ScalarField], float]] = None,
) -> LineSearchResult:
    """Backtracking over {start * shrink^n}.

    With ``project`` the sufficient-decrease test runs along the actual
    displacement P(u + s d) - u, with ``derivative`` giving dJ of it.
    A trial whose forward solve fails is rejected like a failed test.
    """
    if not dd < 0:
        raise NonDescentError(dd)
    s = params.s0 if start is None else start
    trials: List[Tuple[float, Optional[float]]] = []
    for n in range(params.max_backtracks + 1):
        trial = u + s * d
        if project is not None:
            trial = project(trial)
            if not np.any(trial.values - u.values):
                # the box pins every node; the current state stands
                return LineSearchResult(s, u, J0, None, n)
            slope = derivative(trial - u) if derivative is not None else s * dd
            bound = J0 + params.c1 * min(slope, 0.0)
        else:
            bound = J0 + params.c1 * s * dd
        try:
            J, state = J_at(trial)
        except _TRIAL_FAILURES as e:
            logger.debug("trial step %.3e rejected: %s", s, e)
            trials.append((s, None))
        else:
            trials.append((s, J))
            logger.debug("trial step %.3e: J=%.12e bound=%.12e", s, J, bound)
            if J <= bound:
                return LineSearchResult(s, trial, J, state, n)
        s *= params.shrink
    raise LineSearchError(
        f"no sufficient decrease after {params.max_backtracks} backtracks", trials
    )


def _record(
    k: int,
    state: EquilibriumState,
    V: ScalarField,
    alpha: float,
    g: ScalarField,
    **extra: Any,
) -> IterateRecord:
    ens = ensemble_term(V, state.rho)
    reg = regularizer(state.u, alpha)
    return IterateRecord(k, ens + reg, ens, reg, h1_norm(g), **extra)


def ncg_minimize(
    u0: ScalarField,
    V: ScalarField,
    config: OptimizeConfig,
    *,
    laplacian: Optional[SparseSystem] = None,
    callback: Optional[Callable[[IterateRecord], None]] = None,
    adjoint_sign: float = 1.0,
) -> Tuple[ScalarField, EquilibriumState, OptimizeReport]:
    """Fletcher-Reeves NCG with Armijo backtracking.

    u0 must satisfy check_control. Failures of the very first forward solve
    propagate; later failures end the run with the report so far. A failed
    search along steepest descent is retried once from below its smallest
    trial step; a second consecutive failure aborts.
    """
    check_control(u0)
    grid = u0.grid
    system = laplacian if laplacian is not None else laplacian_for(grid)
    alpha = config.alpha
    box = config.box
    project = box.project if box is not None else None

    def J_at(trial: ScalarField) -> Tuple[float, EquilibriumState]:
        return reduced_objective(
            trial, V, alpha, config.fp, warm_start=state.U, laplacian=system
        )

    def gradient(st: EquilibriumState) -> GradientBundle:
        return reduced_gradient(
            st, V, alpha,
            linearization=config.linearization,
            laplacian=system,
            adjoint_sign=adjoint_sign,
            metric=config.riesz,
        )

    u = project(u0) if project is not None else u0
    J, state = reduced_objective(u, V, alpha, config.fp, laplacian=system)
    bundle = gradient(state)
    g = bundle.grad
    d = -g
    restarted = True
    prev_drop: Optional[float] = None
    steepest_failures = 0
    retry_start: Optional[float] = None

    report = OptimizeReport()
    report.records.append(_record(0, state, V, alpha, g))
    logger.info("NCG start: J=%.10e |g|=%.3e", J, report.records[0].grad_h1_norm)

    k = 0
    while k < config.k_max:
        if h1_norm(g) <= config.gtol:
            report.reason = "tol"
            report.message = "gradient vanished"
            break

        dd = directional_derivative(state, V, alpha, bundle, d)
        if dd >= 0.0 and not restarted:
            logger.info("iterate %d: non-descent direction, reset to steepest descent", k + 1)
            d, restarted = -g, True
            dd = directional_derivative(state, V, alpha, bundle, d)

        start = config.ls.s0
        if retry_start is not None:
            start = retry_start
        elif config.ls.initial == "interpolate" and prev_drop is not None and prev_drop > 0:
            start = min(config.ls.s_max, 2.02 * prev_drop / abs(dd))

        def derivative(disp: ScalarField) -> float:
            return directional_derivative(state, V, alpha, bundle, disp)

        try:
            res = armijo_search(
                J_at, u, d, dd, config.ls,
                J0=J,
                start=start,
                project=project,
                derivative=derivative,
            )
        except (LineSearchError, NonDescentError) as e:
            if not restarted:
                logger.info("iterate %d: %s; retrying along steepest descent", k + 1, e)
                d, restarted = -g, True
                continue
            steepest_failures += 1
            if steepest_failures >= 2:
                report.reason = "line-search-failure"
                report.message = str(e)
                logger.warning("iterate %d: %s; aborting", k + 1, e)
                break
            trials = getattr(e, "trials", [])
            retry_start = trials[-1][0] * config.ls.shrink if trials else config.ls.s0
            logger.info(
                "iterate %d: %s; retrying steepest descent from step %.3e", k + 1, e, retry_start
            )
            continue

        steepest_failures = 0
        retry_start = None
        k += 1
        E = h1_norm(res.u - u)
        prev_drop = J - res.J
        u, J = res.u, res.J
        if res.state is not None:
            state = res.state
        try:
            bundle = gradient(state)
        except (SolverError, ZeroDivisionError) as e:
            report.reason = "forward-failure"
            report.message = str(e)
            logger.warning("iterate %d: gradient failed: %s", k, e)
            break
        g_new = bundle.grad

        used_restart = restarted
        beta = 0.0
        stationary = False
        if config.method == "steepest" or k % config.restart_period == 0:
            d, restarted = -g_new, True
        else:
            try:
                beta = fr_beta(g_new, g)
            except StationaryPoint:
                stationary = True
            d, restarted = -g_new + beta * d, False
        g = g_new

        rec = _record(
            k, state, V, alpha, g,
            step=res.step, backtracks=res.backtracks, beta=beta, restarted=used_restart, E=E,
        )
        report.records.append(rec)
        logger.info(
            "iterate %d: J=%.10e step=%.3e backtracks=%d E=%.3e",
            k, J, res.step, res.backtracks, E,
        )
        if callback is not None:
            callback(rec)
        if stationary or E < config.tol:
            report.reason = "tol"
            break

    return u, state, report
