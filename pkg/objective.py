# objective.py
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from equilibrium import (
    EquilibriumState,
    FixedPointParams,
    solve_equilibrium_robust,
)
from operators import SparseSystem
from polar_grid import PolarGrid, ScalarField, h1_inner, integrate, l2_inner
from utils.field_io import FieldDumpError, read_field

__all__ = [
    "ValleyError",
    "GaussianValley",
    "AnisotropicValley",
    "CloverValley",
    "FileValley",
    "ValleySpec",
    "valley_from_dict",
    "valley_to_dict",
    "valley_eval",
    "clover_mask",
    "ensemble_term",
    "regularizer",
    "evaluate_J",
    "reduced_objective",
    "density_moments",
    "region_mass",
    "axis_profile",
    "count_local_maxima",
    "argmax_radius",
    "ring_means",
]


class ValleyError(ValueError):
    pass


def _positive(name: str, value: float) -> None:
    if not (value > 0 and math.isfinite(value)):
        raise ValleyError(f"{name} must be positive, got {value!r}")


@dataclass(frozen=True)
class GaussianValley:
    """-A exp(-|x - x0|^2 / (2 a^2))."""

    amplitude: float = 1.0
    width: float = 0.05
    center: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        _positive("amplitude", self.amplitude)
        _positive("width", self.width)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if math.hypot(*self.center) > 1.0:
            raise ValleyError(f"center {self.center} lies outside the unit disk")

    def sample(self, grid: PolarGrid) -> np.ndarray:
        x0, y0 = self.center
        d2 = (grid.node_x - x0) ** 2 + (grid.node_y - y0) ** 2
        return -self.amplitude * np.exp(-d2 / (2.0 * self.width**2))


@dataclass(frozen=True)
class AnisotropicValley:
    """-A exp(-r^2 (cos^2 phi / (2 a_x^2) + sin^2 phi / (2 a_y^2)))."""

    width_x: float = 0.05
    width_y: float = 0.3
    amplitude: float = 1.0

    def __post_init__(self) -> None:
        _positive("width_x", self.width_x)
        _positive("width_y", self.width_y)
        _positive("amplitude", self.amplitude)

    def sample(self, grid: PolarGrid) -> np.ndarray:
        r, phi = grid.node_r, grid.node_phi
        expo = r**2 * (
            np.cos(phi) ** 2 / (2.0 * self.width_x**2)
            + np.sin(phi) ** 2 / (2.0 * self.width_y**2)
        )
        return -self.amplitude * np.exp(-expo)


@dataclass(frozen=True)
class CloverValley:
    """-d inside the four-petal rose r <= c |cos 2 phi|, 0 outside."""

    depth: float = 1.0
    scale: float = 0.7

    def __post_init__(self) -> None:
        _positive("depth", self.depth)
        _positive("scale", self.scale)

    def sample(self, grid: PolarGrid) -> np.ndarray:
        return np.where(clover_mask(grid, self.scale), -self.depth, 0.0)


@dataclass(frozen=True)
class FileValley:
    """Valley sampled on the grid, read from a FieldDump CSV."""

    path: str

    def sample(self, grid: PolarGrid) -> np.ndarray:
        if not Path(self.path).is_file():
            raise ValleyError(f"valley file not found: {self.path}")
        try:
            return read_field(self.path, grid).values
        except FieldDumpError as e:
            raise ValleyError(str(e)) from e


ValleySpec = Union[GaussianValley, AnisotropicValley, CloverValley, FileValley]

_KINDS: Dict[str, Any] = {
    "gaussian": GaussianValley,
    "anisotropic": AnisotropicValley,
    "clover": CloverValley,
    "file": FileValley,
}


def valley_from_dict(data: Dict[str, Any]) -> ValleySpec:
    params = dict(data)
    kind = params.pop("kind", None)
    if kind not in _KINDS:
        raise ValleyError(f"unknown valley kind {kind!r}; expected one of {sorted(_KINDS)}")
    try:
        return _KINDS[kind](**params)
    except TypeError as e:
        raise ValleyError(f"bad parameters for {kind} valley: {e}") from e


def valley_to_dict(spec: ValleySpec) -> Dict[str, Any]:
    kind = next(k for k, cls in _KINDS.items() if isinstance(spec, cls))
    data = asdict(spec)
    if "center" in data:
        data["center"] = list(data["center"])
    return {"kind": kind, **data}


def valley_eval(spec: ValleySpec, grid: PolarGrid) -> ScalarField:
    return ScalarField(grid, spec.sample(grid))


def clover_mask(grid: PolarGrid, scale: float = 0.7) -> np.ndarray:
    return grid.node_r <= scale * np.abs(np.cos(2.0 * grid.node_phi))


def ensemble_term(V: ScalarField, rho: ScalarField) -> float:
    """Expected value of V under rho."""
    return l2_inner(V, rho)


def regularizer(u: ScalarField, alpha: float) -> float:
    return 0.5 * alpha * h1_inner(u, u)


def evaluate_J(state: EquilibriumState, V: ScalarField, alpha: float) -> float:
    return ensemble_term(V, state.rho) + regularizer(state.u, alpha)


# -- density diagnostics ----------------------------------------------------


def density_moments(rho: ScalarField) -> Dict[str, float]:
    grid = rho.grid
    mass = integrate(rho)
    mx = float(grid.quad_w @ (grid.node_x * rho.values)) / mass
    my = float(grid.quad_w @ (grid.node_y * rho.values)) / mass
    var_x = float(grid.quad_w @ ((grid.node_x - mx) ** 2 * rho.values)) / mass
    var_y = float(grid.quad_w @ ((grid.node_y - my) ** 2 * rho.values)) / mass
    return {"mass": mass, "mean_x": mx, "mean_y": my, "var_x": var_x, "var_y": var_y}


def region_mass(rho: ScalarField, mask: np.ndarray) -> float:
    return float(rho.grid.quad_w @ np.where(mask, rho.values, 0.0))


def axis_profile(field: ScalarField) -> Tuple[np.ndarray, np.ndarray]:
    """Samples along the vertical axis from y = -1 to y = 1 through the origin.

    Uses the angular columns nearest to phi = 3 pi/2 and phi = pi/2.
    Returns (y, values).
    """
    grid = field.grid
    mat = field.as_matrix()
    up = int(round(grid.n_phi / 4)) % grid.n_phi
    down = int(round(3 * grid.n_phi / 4)) % grid.n_phi
    r = grid.r
    y = np.concatenate([-r[:0:-1], [0.0], r[1:]])
    values = np.concatenate([mat[:0:-1, down], [mat[0, 0]], mat[1:, up]])
    return y, values


def count_local_maxima(profile: np.ndarray) -> int:
    p = np.asarray(profile, dtype=float)
    if p.size < 3:
        return 0
    inner = (p[1:-1] > p[:-2]) & (p[1:-1] > p[2:])
    return int(np.count_nonzero(inner))


def argmax_radius(rho: ScalarField) -> float:
    return float(rho.grid.node_r[int(np.argmax(rho.values))])


def ring_means(field: ScalarField) -> List[float]:
    return [float(v) for v in field.as_matrix().mean(axis=1)]


def reduced_objective(
    u: ScalarField,
    V: ScalarField,
    alpha: float,
    fp: FixedPointParams = FixedPointParams(),
    *,
    warm_start: Optional[ScalarField] = None,
    laplacian: Optional[SparseSystem] = None,
) -> Tuple[float, EquilibriumState]:
    """J(S(u), u): solves the equilibrium for u, then evaluates J."""
    state = solve_equilibrium_robust(
        u, u.grid, fp, warm_start=warm_start, laplacian=laplacian
    )
    return evaluate_J(state, V, alpha), state
