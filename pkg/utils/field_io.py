# utils/field_io.py
from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from polar_grid import PolarGrid, ScalarField

__all__ = ["HEADER", "FieldDumpError", "field_frame", "write_field", "read_field"]

HEADER = ["i", "j", "phi", "r", "x", "y", "value"]
FLOAT_FORMAT = "%.17g"

PathLike = Union[str, Path]


class FieldDumpError(ValueError):
    pass


def field_frame(field: ScalarField) -> pd.DataFrame:
    """One row per node, i and j 1-based, angular index running fastest."""
    grid = field.grid
    flat = np.arange(grid.size)
    return pd.DataFrame(
        {
            "i": flat % grid.n_phi + 1,
            "j": flat // grid.n_phi + 1,
            "phi": grid.node_phi,
            "r": grid.node_r,
            "x": grid.node_x,
            "y": grid.node_y,
            "value": field.values,
        },
        columns=HEADER,
    )


def write_field(field: ScalarField, path: PathLike) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    field_frame(field).to_csv(out, index=False, float_format=FLOAT_FORMAT)
    return out


def read_field(path: PathLike, grid: PolarGrid) -> ScalarField:
    """Read a FieldDump back onto ``grid``; rows may come in any order."""
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FieldDumpError(f"cannot read field dump {path}: {e}") from e

    if list(df.columns) != HEADER:
        raise FieldDumpError(f"{path}: header {list(df.columns)} != {HEADER}")
    if len(df) != grid.size:
        raise FieldDumpError(
            f"{path}: {len(df)} rows, grid ({grid.n_phi}, {grid.n_radial}) needs {grid.size}"
        )
    i = df["i"].to_numpy()
    j = df["j"].to_numpy()
    if i.min() < 1 or i.max() > grid.n_phi or j.min() < 1 or j.max() > grid.n_radial:
        raise FieldDumpError(f"{path}: node indices outside the grid")

    flat = (i - 1) + (j - 1) * grid.n_phi
    if np.unique(flat).size != grid.size:
        raise FieldDumpError(f"{path}: duplicate node rows")
    values = np.empty(grid.size)
    values[flat] = df["value"].to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise FieldDumpError(f"{path}: non-finite values")
    return ScalarField(grid, values)
