# utils/settings.py
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar

from dotenv import load_dotenv

from equilibrium import FixedPointParams
from objective import (
    FileValley,
    GaussianValley,
    ValleyError,
    ValleySpec,
    valley_from_dict,
    valley_to_dict,
)
from operators import STENCIL_VARIANTS
from optimizer import Box, LineSearchParams, OptimizeConfig
from polar_grid import MIN_PHI, MIN_RADIAL
from sensitivity import DEFAULT_STEPS, LINEARIZATIONS

__all__ = [
    "EMIT_CHOICES",
    "ConfigError",
    "GridConfig",
    "GradcheckConfig",
    "RunConfig",
    "config_from_dict",
    "load_config",
    "apply_overrides",
    "load_environment",
    "thread_count",
    "log_level",
]

EMIT_CHOICES = ("fields", "report", "history")
T = TypeVar("T")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    n_phi: int = 64
    n_radial: int = 48

    def __post_init__(self) -> None:
        if self.n_phi < MIN_PHI or self.n_radial < MIN_RADIAL:
            raise ValueError(
                f"grid ({self.n_phi}, {self.n_radial}) below minimum ({MIN_PHI}, {MIN_RADIAL})"
            )


@dataclass(frozen=True)
class GradcheckConfig:
    seed: int = 0
    steps: Tuple[float, ...] = DEFAULT_STEPS
    # None picks 1e-6 for a zero valley and 1e-4 otherwise
    tolerance: Optional[float] = None
    linearization: str = "normalized"

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(float(h) for h in self.steps))
        if self.linearization not in LINEARIZATIONS:
            raise ValueError(f"linearization must be one of {LINEARIZATIONS}")
        if self.tolerance is not None and not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    valley: ValleySpec = field(default_factory=GaussianValley)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    output_dir: str = "out"
    emit: Tuple[str, ...] = EMIT_CHOICES
    stencil: str = "auto"
    control: Optional[str] = None
    warm_start: Optional[str] = None

    def __post_init__(self) -> None:
        emit = tuple(sorted(set(self.emit)))
        bad = set(emit) - set(EMIT_CHOICES)
        if bad:
            raise ValueError(f"unknown emit entries {sorted(bad)}; expected {EMIT_CHOICES}")
        object.__setattr__(self, "emit", emit)
        if self.stencil != "auto" and self.stencil not in STENCIL_VARIANTS:
            raise ValueError(f"stencil must be 'auto' or one of {STENCIL_VARIANTS}")
        if self.control is not None and not Path(self.control).is_file():
            raise ValueError(f"control file not found: {self.control}")
        if self.warm_start is not None and not Path(self.warm_start).is_file():
            raise ValueError(f"warm-start file not found: {self.warm_start}")
        if isinstance(self.valley, FileValley) and not Path(self.valley.path).is_file():
            raise ValueError(f"valley file not found: {self.valley.path}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid": asdict(self.grid),
            "valley": valley_to_dict(self.valley),
            "optimize": asdict(self.optimize),
            "gradcheck": {**asdict(self.gradcheck), "steps": list(self.gradcheck.steps)},
            "output_dir": self.output_dir,
            "emit": list(self.emit),
            "stencil": self.stencil,
            "control": self.control,
            "warm_start": self.warm_start,
        }


def _build(cls: Type[T], data: Any, where: str) -> T:
    """Instantiate a flat dataclass from a mapping, rejecting unknown keys."""
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _resolve(path: Optional[str], base: Optional[Path]) -> Optional[str]:
    if path is None:
        return None
    p = Path(path).expanduser()
    if not p.is_absolute() and base is not None:
        p = base / p
    return str(p.resolve())


def _optimize_from_dict(data: Any) -> OptimizeConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("optimize: expected an object")
    params = dict(data)
    if "ls" in params:
        params["ls"] = _build(LineSearchParams, params["ls"], "optimize.ls")
    if "fp" in params:
        params["fp"] = _build(FixedPointParams, params["fp"], "optimize.fp")
    if params.get("box") is not None:
        params["box"] = _build(Box, params["box"], "optimize.box")
    return _build(OptimizeConfig, params, "optimize")


def config_from_dict(data: Mapping[str, Any], base_dir: Optional[Path] = None) -> RunConfig:
    """Validate a JSON-shaped mapping into a RunConfig; relative file paths
    resolve against ``base_dir``."""
    if not isinstance(data, Mapping):
        raise ConfigError("configuration must be a JSON object")
    params: Dict[str, Any] = dict(data)
    if "grid" in params:
        params["grid"] = _build(GridConfig, params["grid"], "grid")
    if "valley" in params:
        valley = dict(params["valley"])
        if valley.get("kind") == "file" and "path" in valley:
            valley["path"] = _resolve(valley["path"], base_dir)
        try:
            params["valley"] = valley_from_dict(valley)
        except ValleyError as e:
            raise ConfigError(f"valley: {e}") from e
    if "optimize" in params:
        params["optimize"] = _optimize_from_dict(params["optimize"])
    if "gradcheck" in params:
        params["gradcheck"] = _build(GradcheckConfig, params["gradcheck"], "gradcheck")
    if "emit" in params:
        params["emit"] = tuple(params["emit"])
    if params.get("control") is not None:
        params["control"] = _resolve(params["control"], base_dir)
    if params.get("warm_start") is not None:
        params["warm_start"] = _resolve(params["warm_start"], base_dir)
    return _build(RunConfig, params, "config")


def load_config(path: Optional[str]) -> RunConfig:
    """Read a RunConfig from JSON. A report written by the CLI is accepted
    too: its embedded ``config`` object is used."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if isinstance(data, dict) and isinstance(data.get("config"), dict):
        data = data["config"]
    return config_from_dict(data, base_dir=p.resolve().parent)


def apply_overrides(
    config: RunConfig,
    *,
    grid: Optional[Tuple[int, int]] = None,
    alpha: Optional[float] = None,
    tol: Optional[float] = None,
    max_iters: Optional[int] = None,
    output_dir: Optional[str] = None,
    stencil: Optional[str] = None,
) -> RunConfig:
    """Command-line values win over the file."""
    try:
        if grid is not None:
            config = replace(config, grid=GridConfig(*grid))
        opt_changes: Dict[str, Any] = {}
        if alpha is not None:
            opt_changes["alpha"] = alpha
        if tol is not None:
            opt_changes["tol"] = tol
        if max_iters is not None:
            opt_changes["k_max"] = max_iters
        if opt_changes:
            config = replace(config, optimize=replace(config.optimize, **opt_changes))
        if output_dir is not None:
            config = replace(config, output_dir=output_dir)
        if stencil is not None:
            config = replace(config, stencil=stencil)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return config


def load_environment() -> None:
    """Pick up a local .env without overriding variables already set."""
    load_dotenv(override=False)


def thread_count() -> int:
    raw = os.getenv("EQUIDESIGN_THREADS", "1").strip() or "1"
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"EQUIDESIGN_THREADS must be an integer, got {raw!r}") from e
    if n < 1:
        raise ConfigError("EQUIDESIGN_THREADS must be at least 1")
    return n


def log_level(verbose: bool = False) -> int:
    if verbose:
        return logging.DEBUG
    name = os.getenv("EQUIDESIGN_LOG_LEVEL", "WARNING").strip().upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.WARNING
