import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import i0

import sensitivity
from equilibrium import dphi, solve_equilibrium
from objective import GaussianValley, valley_eval
from operators import assemble_laplacian, laplacian_for, row_scaling, smallest_eigenvalue
from polar_grid import build_grid, h1_inner, h1_norm, l2_inner
from sensitivity import (
    directional_derivative,
    gradient_check,
    linearize_density,
    reduced_gradient,
    riesz_lift,
    smooth_perturbation,
    solve_adjoint,
    theorem_hypothesis,
)

HELMHOLTZ_SMOOTHING = 2.0


@pytest.fixture(scope="module")
def example1(check_grid):
    V = valley_eval(GaussianValley(amplitude=1.0, width=0.05), check_grid)
    state = solve_equilibrium(check_grid.zeros(), check_grid)
    return V, state


def test_zero_valley_gives_zero_adjoint(small_grid):
    u = smooth_perturbation(small_grid, seed=1)
    state = solve_equilibrium(u, small_grid)
    p = solve_adjoint(state, small_grid.zeros())
    assert not np.any(p.values)
    bundle = reduced_gradient(state, small_grid.zeros(), 1e-2)
    assert np.array_equal(bundle.grad.values, (1e-2 * u).values)
    assert not np.any(bundle.mu.values)


def test_zero_control_zero_valley_is_stationary(small_grid):
    state = solve_equilibrium(small_grid.zeros(), small_grid)
    bundle = reduced_gradient(state, small_grid.zeros(), 1e-3)
    assert not np.any(bundle.grad.values)


def test_adjoint_linear_in_valley(small_grid):
    state = solve_equilibrium(small_grid.zeros(), small_grid)
    V = valley_eval(GaussianValley(width=0.2), small_grid)
    p1 = solve_adjoint(state, V).values
    p3 = solve_adjoint(state, 3.0 * V).values
    assert np.allclose(p3, 3.0 * p1, rtol=1e-9, atol=1e-12)
    W = small_grid.sample(lambda r, phi: r * np.cos(phi))
    pw = solve_adjoint(state, W).values
    psum = solve_adjoint(state, V + W).values
    assert np.allclose(psum, p1 + pw, rtol=1e-9, atol=1e-12)


def test_adjoint_matches_dense_solve():
    grid = build_grid(8, 6)
    V = valley_eval(GaussianValley(width=0.3), grid)
    state = solve_equilibrium(0.5 * V, grid)
    system = assemble_laplacian(grid)
    p = solve_adjoint(state, V, laplacian=system).values

    s = row_scaling(grid)
    d = dphi(state.rho).values
    op = -(system.matrix.toarray() + np.diag(s * d))
    expected = np.linalg.solve(op, s * (-V.values * d))
    assert np.max(np.abs(p - expected)) <= 1e-8
    assert np.all(p[grid.boundary] == 0.0)


def test_normalized_linearization_is_density_jacobian(small_grid):
    u = smooth_perturbation(small_grid, seed=4)
    state = solve_equilibrium(u, small_grid)
    lin = linearize_density(state)
    rho = state.rho.values
    w = small_grid.quad_w
    # mass is preserved to first order
    x = smooth_perturbation(small_grid, seed=5).values
    assert abs(w @ lin.matvec(x)) <= 1e-12
    assert np.allclose(lin.rmatvec(x), -rho * x + w * rho * (rho @ x))


def test_sign_structure_of_density_derivative(example1):
    _, state = example1
    rho = state.rho.values
    d = dphi(state.rho).values
    assert np.all(d[rho <= 1.0] <= 0.0)


def test_riesz_lift_zero_and_boundary(small_grid):
    assert not np.any(riesz_lift(small_grid.zeros()).values)
    mu = riesz_lift(small_grid.sample(lambda r, phi: 1.0 + r * np.sin(phi)))
    assert np.all(mu.values[small_grid.boundary] == 0.0)


def test_riesz_lift_of_one_matches_bessel():
    grid = build_grid(64, 48)
    mu = riesz_lift(grid.constant(1.0))
    expected = 1.0 - 1.0 / i0(1.0)
    assert abs(mu.values[0] - expected) <= 1e-3


def test_bundle_invariants(example1, check_grid):
    V, state = example1
    bundle = reduced_gradient(state, V, 1e-3)
    b = check_grid.boundary
    assert np.all(bundle.p.values[b] == 0.0)
    assert np.all(bundle.mu.values[b] == 0.0)
    assert np.all(bundle.grad.values[b] == 0.0)
    assert np.array_equal(bundle.grad.values, (1e-3 * state.u + bundle.mu).values)
    assert np.any(bundle.grad.values)


def test_descent_along_negative_gradient(example1):
    V, state = example1
    bundle = reduced_gradient(state, V, 1e-3)
    assert directional_derivative(state, V, 1e-3, bundle, -bundle.grad) < 0.0


def test_gradient_represents_derivative_in_h1_product(check_grid):
    V = valley_eval(GaussianValley(amplitude=1.0, width=0.05), check_grid)
    u = 0.5 * smooth_perturbation(check_grid, seed=21)
    state = solve_equilibrium(u, check_grid)
    bundle = reduced_gradient(state, V, 1e-3)
    assert bundle.metric == "gram"
    for seed in (22, 23, 24):
        v = smooth_perturbation(check_grid, seed=seed)
        assert math.isclose(
            directional_derivative(state, V, 1e-3, bundle, v),
            h1_inner(bundle.grad, v),
            rel_tol=1e-8,
            abs_tol=1e-14,
        )
    g = bundle.grad
    assert math.isclose(
        directional_derivative(state, V, 1e-3, bundle, -g), -h1_inner(g, g), rel_tol=1e-8
    )


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0.1, 3.0))
def test_negative_gradient_descends_away_from_zero_control(small_grid, seed, scale):
    V = valley_eval(GaussianValley(width=0.1), small_grid)
    state = solve_equilibrium(scale * smooth_perturbation(small_grid, seed=seed), small_grid)
    bundle = reduced_gradient(state, V, 1e-3)
    if np.any(bundle.grad.values):
        assert directional_derivative(state, V, 1e-3, bundle, -bundle.grad) < 0.0


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0.1, 3.0))
def test_density_derivative_nonpositive_below_one(small_grid, seed, scale):
    state = solve_equilibrium(scale * smooth_perturbation(small_grid, seed=seed), small_grid)
    rho = state.rho.values
    assert np.all(dphi(state.rho).values[rho <= 1.0] <= 0.0)


def test_gram_lift_keeps_control_admissible(small_grid):
    g = small_grid.sample(lambda r, phi: 1.0 + r * np.sin(phi))
    mu = riesz_lift(g, metric="gram").as_matrix()
    assert np.all(mu[-1] == 0.0)
    assert np.all(mu[0] == mu[0, 0])
    assert not np.any(riesz_lift(small_grid.zeros(), metric="gram").values)


@pytest.mark.parametrize("seed", [31, 32, 33])
def test_riesz_lift_smoothing_bounds(check_grid, seed):
    # g vanishes at the origin, so the Gram bound is Cauchy-Schwarz with constant 1
    c = np.random.default_rng(seed).standard_normal(3)
    g = check_grid.sample(
        lambda r, phi: r * (c[0] * np.cos(phi) + c[1] * np.sin(2 * phi)) + c[2] * r**2
    )
    g_l2 = math.sqrt(l2_inner(g, g))
    assert h1_norm(riesz_lift(g, metric="gram")) <= g_l2 * (1.0 + 1e-9)
    assert h1_norm(riesz_lift(g, metric="helmholtz")) <= HELMHOLTZ_SMOOTHING * g_l2


def test_riesz_lift_rejects_unknown_metric(small_grid):
    with pytest.raises(ValueError):
        riesz_lift(small_grid.zeros(), metric="l2")


def test_directional_derivative_trivial_cases(small_grid):
    u = smooth_perturbation(small_grid, seed=2)
    state = solve_equilibrium(u, small_grid)
    zero = small_grid.zeros()
    bundle = reduced_gradient(state, zero, 0.5)
    v = smooth_perturbation(small_grid, seed=3)
    assert directional_derivative(state, zero, 0.5, bundle, zero) == 0.0
    assert math.isclose(
        directional_derivative(state, zero, 0.5, bundle, v),
        0.5 * h1_inner(u, v),
        rel_tol=1e-12,
    )


def test_smooth_perturbation_shape(small_grid):
    v = smooth_perturbation(small_grid, seed=7).as_matrix()
    assert np.all(v[-1] == 0.0)
    assert np.all(v[0] == v[0, 0])
    again = smooth_perturbation(small_grid, seed=7).as_matrix()
    assert np.array_equal(v, again)


def test_gradient_check_pure_regularizer(small_grid):
    u = smooth_perturbation(small_grid, seed=11)
    v = smooth_perturbation(small_grid, seed=12)
    report = gradient_check(u, small_grid.zeros(), 1e-3, v, tolerance=1e-6)
    assert report.min_error <= 1e-6
    assert report.passed


def test_gradient_check_example1(example1, check_grid):
    V, _ = example1
    v = smooth_perturbation(check_grid, seed=0)
    report = gradient_check(check_grid.zeros(), V, 1e-3, v, tolerance=1e-4)
    assert report.min_error <= 1e-4
    assert report.passed
    assert report.pointwise_value is not None
    assert len(report.rel_errors) == 6
    # truncation dominates at the largest step
    assert report.rel_errors[0] > report.min_error


def test_gradient_check_detects_flipped_adjoint(example1, check_grid):
    V, _ = example1
    v = smooth_perturbation(check_grid, seed=0)
    report = gradient_check(
        check_grid.zeros(), V, 1e-3, v, (1e-2, 1e-3, 1e-4), adjoint_sign=-1.0
    )
    assert not report.passed


def test_gradient_check_threads_agree(check_grid):
    V = valley_eval(GaussianValley(width=0.2), check_grid)
    v = smooth_perturbation(check_grid, seed=5)
    steps = (1e-2, 1e-3)
    serial = gradient_check(check_grid.zeros(), V, 1e-2, v, steps, compare_pointwise=False)
    pooled = gradient_check(
        check_grid.zeros(), V, 1e-2, v, steps, compare_pointwise=False, threads=2
    )
    assert np.allclose(serial.fd_values, pooled.fd_values, rtol=1e-12, atol=0.0)


def test_gradient_check_factorizes_once_per_worker(check_grid, monkeypatch):
    built = []

    def counting(grid, variant="symmetric"):
        built.append(variant)
        return assemble_laplacian(grid, variant)

    monkeypatch.setattr(sensitivity, "assemble_laplacian", counting)
    V = valley_eval(GaussianValley(width=0.2), check_grid)
    v = smooth_perturbation(check_grid, seed=6)
    gradient_check(
        check_grid.zeros(), V, 1e-2, v, (1e-2, 1e-3, 1e-4), compare_pointwise=False, threads=2
    )
    assert 1 <= len(built) <= 2


def test_gradient_check_rejects_bad_steps(small_grid):
    with pytest.raises(ValueError):
        gradient_check(small_grid.zeros(), small_grid.zeros(), 1e-3, small_grid.zeros(), (1e-3, 1e-2))


def test_theorem_hypothesis(check_grid):
    lam = smallest_eigenvalue(laplacian_for(check_grid), check_grid)
    hyp = theorem_hypothesis(lam)
    assert hyp["holds"]
    assert math.isclose(hyp["poincare_constant"], 1.0 / lam)
    assert 0.16 < hyp["poincare_constant"] < 0.18
    with pytest.raises(ValueError):
        theorem_hypothesis(0.0)
