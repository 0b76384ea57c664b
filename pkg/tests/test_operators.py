import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from operators import (
    SolverError,
    SparseSystem,
    adjudicate_stencil,
    assemble_laplacian,
    assemble_reaction,
    convergence_order,
    laplacian_for,
    manufactured_error,
    manufactured_residual,
    resolve_variant,
    row_scaling,
    scale_rhs,
    smallest_eigenvalue,
    solve,
    solve_transpose,
)
from polar_grid import GridMismatchError, ScalarField, build_grid


def test_boundary_and_equality_rows():
    grid = build_grid(8, 6)
    A = assemble_laplacian(grid).matrix.toarray()
    for i in range(8):
        b = grid.flat(i, 5)
        expected = np.zeros(grid.size)
        expected[b] = 1.0
        assert np.array_equal(A[b], expected)
    for i in range(1, 8):
        row = A[grid.flat(i, 0)]
        assert row[0] == -1.0 and row[i] == 1.0
        assert np.count_nonzero(row) == 2


def test_origin_row_balances():
    grid = build_grid(8, 4)
    A = assemble_laplacian(grid).matrix.toarray()
    assert math.isclose(A[0, 0], -math.pi)
    ring1 = A[0, 8:16]
    assert np.allclose(ring1, math.pi / 8)
    assert math.isclose(A[0].sum(), 0.0, abs_tol=1e-14)


def test_origin_cell_example():
    grid = build_grid(8, 4)
    assert math.isclose(grid.dr[0], 5.0 / 9.0)
    assert math.isclose(row_scaling(grid)[0], math.pi * (5.0 / 18.0) ** 2)


def test_symmetric_stencil_annihilates_constants(small_grid):
    A = assemble_laplacian(small_grid, "symmetric").matrix
    ones = np.ones(small_grid.size)
    assert np.max(np.abs((A @ ones)[small_grid.interior])) <= 1e-9


def test_scale_rhs_uses_r_squared():
    grid = build_grid(8, 5)
    rhs = scale_rhs(grid, grid.constant(1.0))
    assert math.isclose(grid.r[2], 0.75)
    assert np.allclose(rhs[grid.flat(0, 2) : grid.flat(0, 3)], 0.5625)
    assert np.all(rhs[grid.boundary] == 0.0)
    assert np.all(rhs[1:8] == 0.0)


def test_assemble_reaction_shift(small_grid):
    base = assemble_laplacian(small_grid)
    c = 1.0 / math.pi**2 - 1.0 / math.pi
    shifted = assemble_reaction(small_grid, base, small_grid.constant(c))
    diff = (shifted.matrix - base.matrix).diagonal()
    j = 3
    node = small_grid.flat(0, j)
    assert math.isclose(diff[node], c * small_grid.r[j] ** 2)
    assert np.all(diff[small_grid.boundary] == 0.0)


def test_assemble_reaction_zero_is_identity(small_grid):
    base = assemble_laplacian(small_grid)
    assert assemble_reaction(small_grid, base, small_grid.zeros()) is base


def test_assemble_reaction_grid_mismatch(small_grid):
    base = assemble_laplacian(small_grid)
    with pytest.raises(GridMismatchError):
        assemble_reaction(small_grid, base, build_grid(8, 6).zeros())


def test_solve_matches_dense():
    grid = build_grid(8, 6)
    system = assemble_laplacian(grid)
    rng = np.random.default_rng(3)
    rhs = row_scaling(grid) * rng.standard_normal(grid.size)
    x = solve(system, rhs).values
    dense = np.linalg.solve(-system.matrix.toarray(), rhs)
    assert np.max(np.abs(x - dense)) <= 1e-10
    xt = solve_transpose(system, rhs)
    dense_t = np.linalg.solve(-system.matrix.toarray().T, rhs)
    assert np.max(np.abs(xt - dense_t)) <= 1e-10


def test_solve_zero_rhs(small_grid):
    system = assemble_laplacian(small_grid)
    assert not np.any(solve(system, np.zeros(small_grid.size)).values)


def test_solution_constant_on_origin_ring(small_grid):
    system = laplacian_for(small_grid)
    U = solve(system, scale_rhs(small_grid, small_grid.constant(1.0))).as_matrix()
    assert np.allclose(U[0], U[0, 0], rtol=0.0, atol=1e-14)
    assert np.max(np.abs(U[-1])) <= 1e-14
    # discrete maximum principle
    assert np.all(U >= -1e-14)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), low=st.floats(1e-3, 1.0))
def test_maximum_principle_for_positive_sources(small_grid, seed, low):
    g = np.random.default_rng(seed).uniform(low, 2.0, small_grid.size)
    system = assemble_laplacian(small_grid, "symmetric")
    U = solve(system, scale_rhs(small_grid, ScalarField(small_grid, g))).values
    assert np.all(U[~small_grid.boundary] > 0.0)


def test_solve_is_linear(small_grid):
    system = laplacian_for(small_grid)
    rng = np.random.default_rng(8)
    f = rng.standard_normal(small_grid.size)
    g = rng.standard_normal(small_grid.size)
    combined = solve(system, 2.5 * f - 0.75 * g).values
    separate = 2.5 * solve(system, f).values - 0.75 * solve(system, g).values
    assert np.allclose(combined, separate, rtol=1e-9, atol=1e-10)


def test_singular_system_raises(small_grid):
    zero = SparseSystem(small_grid, sp.csr_matrix((small_grid.size, small_grid.size)))
    with pytest.raises(SolverError):
        solve(zero, np.ones(small_grid.size))


def test_rhs_shape_checked(small_grid):
    with pytest.raises(GridMismatchError):
        solve(assemble_laplacian(small_grid), np.ones(3))


def test_manufactured_solution_error_and_order():
    levels = ((16, 12), (32, 24), (64, 48))
    errors = [manufactured_error(build_grid(n, m), "symmetric") for n, m in levels]
    assert errors[-1] <= 1e-3
    assert convergence_order(errors, [m for _, m in levels]) >= 1.5


def test_stencil_adjudication_prefers_symmetric():
    chosen, study = adjudicate_stencil()
    assert chosen == "symmetric"
    assert study["symmetric"]["passed"]
    assert not study["literal"]["passed"]
    assert resolve_variant("auto") == "symmetric"


def test_manufactured_residual_symmetric_decays():
    coarse = manufactured_residual(build_grid(16, 12), "symmetric")
    fine = manufactured_residual(build_grid(32, 24), "symmetric")
    assert fine < coarse / 3.0


def test_convergence_order_simple():
    assert math.isclose(convergence_order([4.0, 1.0], [3, 5]), 2.0)
    assert convergence_order([1.0, 0.0], [3, 5]) == math.inf


def test_resolve_variant_rejects_unknown():
    with pytest.raises(ValueError):
        resolve_variant("upwind")


def test_smallest_eigenvalue_near_bessel_zero(check_grid):
    lam = smallest_eigenvalue(laplacian_for(check_grid), check_grid)
    assert abs(lam - 5.783185962946784) / 5.783185962946784 <= 0.02
