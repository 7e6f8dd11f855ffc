import math

import numpy as np
import pytest

from frvi.fields import (
    ScalarField,
    full_torus,
    lp_norm,
    make_grid,
    mask_box,
    scalar_field,
    zero_field,
)
from frvi.fracgrad import frac_gradient, frac_laplacian, hsigma_norm
from frvi.instances import VI_CFG, inactive_1d, small_binding_1d
from frvi.vi import (
    EPS_FLOOR,
    EllipticCoefficients,
    PenaltyConfig,
    ProblemData,
    SolverDivergence,
    Threshold,
    energy,
    extract_multiplier,
    feasibility_violation,
    identity_coefficients,
    multiplier_equation_residual,
    penalized_residual,
    penalty_value,
    penalty_slope,
    sample_feasible,
    solve_penalized,
    solve_vi,
    vi_residual,
    _PenalizedSystem,
)


# -- penalty function ---------------------------------------------------------


def test_penalty_zero_for_negative_excess():
    assert penalty_value(-1.0, 0.5) == 0.0


def test_penalty_at_zero():
    assert penalty_value(0.0, 0.5) == 0.0


def test_penalty_exponential_branch():
    assert penalty_value(1.0, 0.5) == pytest.approx(math.e**2 - 1.0, rel=1e-12)


def test_penalty_cap_branch():
    # s=3 > 1/eps=2 lands on the constant branch e^(1/eps^2) - 1
    assert penalty_value(3.0, 0.5) == pytest.approx(math.e**4 - 1.0, rel=1e-12)


def test_penalty_rejects_eps_below_floor():
    with pytest.raises(ValueError):
        penalty_value(1.0, 0.01)
    with pytest.raises(ValueError):
        penalty_value(1.0, 1.0)


def test_penalty_monotone_in_s_and_eps():
    s_grid = np.linspace(-1.0, 30.0, 400)
    for eps in (0.05, 0.2, 0.8):
        vals = penalty_value(s_grid, eps)
        assert np.all(np.diff(vals) >= 0.0)
        assert np.all(vals >= 0.0)
    for s in (0.1, 1.0, 5.0):
        v_small, v_big = penalty_value(s, 0.05), penalty_value(s, 0.5)
        assert v_small >= v_big


def test_penalty_continuous_at_cap():
    eps = 0.5
    left = penalty_value(1.0 / eps - 1e-12, eps)
    right = penalty_value(1.0 / eps + 1e-12, eps)
    assert left == pytest.approx(right, rel=1e-9)


def test_penalty_slope_right_branch_convention():
    eps = 0.5
    assert penalty_slope(0.0, eps) == pytest.approx(1.0 / eps)
    assert penalty_slope(-1e-9, eps) == 0.0
    assert penalty_slope(1.0 / eps + 1e-9, eps) == 0.0


def test_penalty_floor_value_representable():
    cap = penalty_value(1e9, EPS_FLOOR)
    assert np.isfinite(cap) and cap > 1e250


# -- data types ---------------------------------------------------------------


def test_threshold_requires_positive_floor():
    g = make_grid(1, 1.0, 16)
    with pytest.raises(ValueError):
        Threshold(scalar_field(g, 1.0), 0.0)
    with pytest.raises(ValueError):
        Threshold(scalar_field(g, 0.5), 1.0)


def test_coefficients_scalar_bounds_checked():
    g = make_grid(1, 1.0, 16)
    with pytest.raises(ValueError):
        EllipticCoefficients(g, np.full(g.shape, 0.5), a_star=1.0, a_upper=2.0)


def test_coefficients_matrix_spot_check():
    g = make_grid(2, 1.0, 8)
    vals = np.zeros(g.shape + (2, 2))
    vals[..., 0, 0] = 1.0
    vals[..., 1, 1] = 1.0
    A = EllipticCoefficients(g, vals, a_star=1.0, a_upper=1.0)
    assert A.is_symmetric
    bad = vals.copy()
    bad[..., 0, 0] = -1.0
    with pytest.raises(ValueError, match="ellipticity"):
        EllipticCoefficients(g, bad, a_star=1.0, a_upper=1.0)


def test_penalty_config_floor_enforced():
    with pytest.raises(ValueError, match="floor"):
        PenaltyConfig(eps_min=0.01)
    with pytest.raises(ValueError):
        PenaltyConfig(ratio=1.5)


def test_problem_data_requires_supported_source():
    g = make_grid(1, 2.0, 32)
    m = mask_box(g, 1.0)
    f = scalar_field(g, 1.0)  # nonzero outside
    with pytest.raises(ValueError, match="outside"):
        ProblemData(m, 0.5, identity_coefficients(g), f,
                    Threshold(scalar_field(g, 1.0), 1.0))


# -- residual -----------------------------------------------------------------


def _bump_problem(n=64, gval=1e4):
    g = make_grid(1, 2.0, n)
    m = mask_box(g, 1.0)
    x = g.axis()
    f = ScalarField(g, np.where(m.inside, 3.0, 0.0))
    data = ProblemData(m, 0.5, identity_coefficients(g), f,
                       Threshold(scalar_field(g, gval), gval))
    return g, m, x, data


def test_residual_zero_for_trivial_problem():
    g, m, x, _ = _bump_problem()
    data = ProblemData(m, 0.5, identity_coefficients(g), zero_field(g),
                       Threshold(scalar_field(g, 1.0), 1.0))
    r = penalized_residual(zero_field(g), data, 0.5)
    assert np.all(r.values == 0.0)


def test_residual_matches_linear_operator_when_penalty_inactive():
    g, m, x, data = _bump_problem()
    u = ScalarField(g, np.where(m.inside, (1 - x**2) ** 2, 0.0))
    r = penalized_residual(u, data, 0.5)
    expect = frac_laplacian(u, 0.5).values - data.f.values
    assert np.abs(r.values[m.inside] - expect[m.inside]).max() < 1e-12 * (
        1 + np.abs(expect).max())
    assert np.all(r.values[~m.inside] == 0.0)


def test_jacobian_consistent_with_residual():
    rng = np.random.default_rng(8)
    g, m, x, _ = _bump_problem(gval=1.0)
    data = ProblemData(m, 0.5, identity_coefficients(g),
                       ScalarField(g, np.where(m.inside, 3.0, 0.0)),
                       Threshold(scalar_field(g, 1.0), 1.0))
    sys = _PenalizedSystem(data, 0.3)
    x0 = np.where(m.inside, 0.4 * (1 - x**2) ** 2, 0.0)[m.inside]
    v = rng.normal(size=x0.shape)
    matvec, _ = sys.jacobian_matvec(x0)
    jv = matvec(v)
    t = 1e-7
    fd = (sys.residual(x0 + t * v) - sys.residual(x0 - t * v)) / (2 * t)
    assert np.abs(jv - fd).max() <= 1e-5 * (1 + np.abs(jv).max())


# -- penalized solves ----------------------------------------------------------


def test_solve_penalized_zero_source():
    g, m, x, data = _bump_problem()
    data0 = ProblemData(m, 0.5, identity_coefficients(g), zero_field(g), data.g)
    u = solve_penalized(data0, 0.5, zero_field(g), PenaltyConfig())
    assert np.abs(u.values).max() == 0.0


def test_solve_penalized_spectral_regression():
    # full-torus test mode, penalty identically inactive: exact mode inversion
    g = make_grid(1, math.pi, 64)
    x = g.axis()
    mask = full_torus(g)
    k, sigma, amp = 2, 0.5, 0.5
    f = ScalarField(g, k ** (2 * sigma) * amp * np.sin(k * x))
    gval = 2.0 * k ** (-sigma)
    data = ProblemData(mask, sigma, identity_coefficients(g), f,
                       Threshold(scalar_field(g, gval), gval))
    u = solve_penalized(data, 0.5, zero_field(g), PenaltyConfig(newton_tol=1e-12))
    assert np.abs(u.values - amp * np.sin(k * x)).max() < 1e-8


def test_solve_penalized_classical_order_shares_code_path():
    # sigma = 1 runs the same solver against the classical spectral gradient
    g = make_grid(1, math.pi, 64)
    x = g.axis()
    mask = full_torus(g)
    k, amp = 3, 0.25
    f = ScalarField(g, k**2 * amp * np.sin(k * x))
    data = ProblemData(mask, 1.0, identity_coefficients(g), f,
                       Threshold(scalar_field(g, 10.0), 10.0))
    u = solve_penalized(data, 0.5, zero_field(g), PenaltyConfig(newton_tol=1e-12))
    assert np.abs(u.values - amp * np.sin(k * x)).max() < 1e-8


def test_solve_vi_shrink_flag_gives_strict_feasibility():
    data = small_binding_1d()
    sol = solve_vi(data, VI_CFG, shrink=True)
    assert sol.feas_violation == 0.0
    ref = solve_vi(data, VI_CFG)
    # the shrink factor nu/(nu+eta) is a small contraction of the iterate
    factor = data.g.nu / (data.g.nu + ref.feas_violation)
    assert np.allclose(sol.u.values, factor * ref.u.values, rtol=1e-12)


def test_solve_penalized_divergence_carries_history():
    data = small_binding_1d()
    cfg = PenaltyConfig(newton_tol=1e-13, newton_max=1)
    with pytest.raises(SolverDivergence) as err:
        solve_penalized(data, 0.04, zero_field(data.grid), cfg)
    assert err.value.iterate is not None
    assert len(err.value.history) >= 1


# -- continuation solve ---------------------------------------------------------


def test_solve_vi_zero_source():
    g, m, x, data = _bump_problem()
    data0 = ProblemData(m, 0.5, identity_coefficients(g), zero_field(g), data.g)
    sol = solve_vi(data0)
    assert np.abs(sol.u.values).max() == 0.0
    assert np.abs(sol.multiplier.values).max() == 0.0
    assert sol.feas_violation == 0.0 and sol.comp_gap == 0.0


@pytest.fixture(scope="module")
def binding_solution():
    return solve_vi(small_binding_1d(), VI_CFG, seed=3)


def test_solve_vi_feasibility(binding_solution):
    data = small_binding_1d()
    assert binding_solution.feas_violation <= 1e-3 * data.g.nu


def test_solve_vi_multiplier_nonnegative(binding_solution):
    assert binding_solution.multiplier.values.min() >= 0.0


def test_solve_vi_complementarity(binding_solution):
    data = small_binding_1d()
    lam_l1 = lp_norm(binding_solution.multiplier, 1)
    assert lam_l1 > 0  # the instance binds
    g_inf = float(data.g.g.values.max())
    assert binding_solution.comp_gap <= 1e-3 * lam_l1 * g_inf


def test_solve_vi_multiplier_equation(binding_solution):
    data = small_binding_1d()
    res = multiplier_equation_residual(binding_solution, data)
    f_sup = float(np.abs(data.f.values).max())
    assert res <= 10.0 * VI_CFG.newton_tol * (1.0 + f_sup)


def test_solve_vi_violation_decays_along_schedule(binding_solution):
    viols = [row.feas_violation for row in binding_solution.trace]
    for a, b in zip(viols, viols[1:]):
        assert b <= 1.05 * a + 1e-12


def test_solve_vi_apriori_bound(binding_solution):
    from frvi.qvi import estimate_sobolev_constant, sobolev_exponents

    data = small_binding_1d()
    _, two_sharp = sobolev_exponents(data.grid.dim, data.sigma)
    est = estimate_sobolev_constant(data.grid, data.mask, data.sigma,
                                    restarts=15, iters=50)
    bound = 2.0 * est.value / data.A.a_star * lp_norm(data.f, two_sharp, data.mask)
    assert hsigma_norm(binding_solution.u, data.sigma) <= bound


def test_solve_vi_deterministic_across_initializations():
    data = small_binding_1d()
    cfg = PenaltyConfig(newton_tol=1e-10)
    sol_a = solve_vi(data, cfg)
    rng = np.random.default_rng(5)
    init = sample_feasible(data, rng)
    sol_b = solve_vi(data, cfg, init=init)
    gap = hsigma_norm(ScalarField(data.grid, sol_a.u.values - sol_b.u.values),
                      data.sigma)
    assert gap <= 10.0 * cfg.newton_tol * (
        1.0 + float(np.abs(data.f.values).max()))


def test_scaling_identity_at_vi_level():
    data = small_binding_1d()
    cfg = PenaltyConfig(newton_tol=2e-5)
    sol = solve_vi(data, cfg)
    norm = hsigma_norm(sol.u, data.sigma)
    for mu in (0.5, 2.0, 5.0):
        sol_mu = solve_vi(data.scaled(mu), cfg)
        gap = hsigma_norm(ScalarField(
            data.grid, sol_mu.u.values - mu * sol.u.values), data.sigma)
        assert gap <= 10.0 * cfg.newton_tol * mu * (1.0 + norm)


# -- multiplier extraction -------------------------------------------------------


def test_multiplier_zero_when_inactive():
    data = inactive_1d()
    sol = solve_vi(data, VI_CFG)
    lam = extract_multiplier(sol.u, data, sol.eps_final)
    assert np.all(lam.values == 0.0)
    assert sol.feas_violation == 0.0


def test_multiplier_nonnegative_always():
    rng = np.random.default_rng(9)
    data = small_binding_1d()
    for _ in range(5):
        u = sample_feasible(data, rng)
        u = ScalarField(data.grid, 3.0 * u.values)  # push infeasible
        lam = extract_multiplier(u, data, 0.05)
        assert lam.values.min() >= 0.0


# -- diagnostics -----------------------------------------------------------------


def test_vi_residual_zero_direction_and_solution(binding_solution):
    data = small_binding_1d()
    # v = u itself contributes functional value 0; the solved problem stays
    # above a small negative tolerance over sampled directions
    scale = abs(binding_solution.energy) + 1.0
    assert binding_solution.vi_res >= -1e-6 * scale


def test_vi_residual_detects_perturbed_solution(binding_solution):
    data = small_binding_1d()
    x = data.grid.axis()
    bump = np.where(data.mask.inside, 0.3 * (1 - x**2) ** 2, 0.0)
    bad = ScalarField(data.grid, binding_solution.u.values + bump)
    scale = abs(binding_solution.energy) + 1.0
    assert vi_residual(bad, data, trials=64, seed=11) < -1e-3 * scale


def test_energy_zero_field():
    g, m, x, data = _bump_problem()
    assert energy(zero_field(g), data) == 0.0


def test_energy_minimized_by_solution(binding_solution):
    rng = np.random.default_rng(12)
    data = small_binding_1d()
    ju = energy(binding_solution.u, data)
    scale = abs(ju) + 1.0
    for _ in range(100):
        v = sample_feasible(data, rng)
        assert ju <= energy(v, data) + 1e-10 * scale


def test_energy_requires_symmetric_coefficients():
    g = make_grid(2, 1.0, 8)
    vals = np.zeros(g.shape + (2, 2))
    vals[..., 0, 0] = 1.0
    vals[..., 1, 1] = 1.0
    vals[..., 0, 1] = 0.2
    vals[..., 1, 0] = -0.2
    A = EllipticCoefficients(g, vals, a_star=1.0, a_upper=1.3)
    m = mask_box(g, 0.5)
    data = ProblemData(m, 0.5, A, zero_field(g),
                       Threshold(scalar_field(g, 1.0), 1.0))
    with pytest.raises(ValueError, match="symmetric"):
        energy(zero_field(g), data)


def test_feasibility_violation_zero_field():
    g, m, x, data = _bump_problem(gval=1.0)
    assert feasibility_violation(zero_field(g), data) == 0.0


def test_feasibility_violation_grows_with_amplitude():
    g, m, x, _ = _bump_problem(gval=1.0)
    data = ProblemData(m, 0.5, identity_coefficients(g), zero_field(g),
                       Threshold(scalar_field(g, 1.0), 1.0))
    w = ScalarField(g, np.where(m.inside, (1 - x**2) ** 2, 0.0))
    peak = float(frac_gradient(w, 0.5).magnitude().max())
    for t in (10.0, 100.0, 1000.0):
        viol = feasibility_violation(ScalarField(g, t * w.values), data)
        assert viol == pytest.approx(t * peak - 1.0, rel=1e-12)
