import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st

from fracgo.errors import DegeneratePhaseError, DomainError, RegimeError, SupportError
from fracgo.media import (
    ConstantIndex,
    ConstantPotential,
    Disk,
    ExpSlabIndex,
    ExpSlabPhase,
    GaussianLensIndex,
    GaussianPotential,
    Medium,
    PlanePhase,
    RadialPhase,
    build_polar_chart,
)
from fracgo.spectral import Field, Grid, apply_multiplier, spectral_gradient
from fracgo.transport import (
    BoundaryAmplitude,
    ConstCoefSymbolTable,
    apply_L10,
    axis_window,
    binom_ext,
    const_coef_amplitudes,
    const_coef_symbol,
    l10_polar,
    log_weight,
    phase_correction_phi1,
    polar_amplitude_closed_form,
    principal_amplitude,
    ray_integrals,
    solve_transport_along_rays,
    transport_coefficients,
)

BUMP = BoundaryAmplitude("bump", center=0.0, width=0.6)


def _chart_medium(index, potential, s):
    med = Medium(index, potential, s, omega_prime=Disk(radius=2.0))
    return med, build_polar_chart(med, np.array([-2.0, 0.0]))


# ------------------------------------------------------------- b_s and L10


def test_slab_bs_symbolic():
    # independent symbolic route: b_s = Delta phi + (2s-2) H(grad phi, grad phi) / |grad phi|^2
    x, y, s = sp.symbols("x y s", real=True)
    phi = sp.exp(x)
    g = sp.Matrix([phi.diff(x), phi.diff(y)])
    H = sp.hessian(phi, (x, y))
    b = sp.simplify(H.trace() + (2 * s - 2) * (g.T * H * g)[0] / (g.T * g)[0])
    assert sp.simplify(b - (2 * s - 1) * sp.exp(x)) == 0
    f = sp.lambdify((x, y, s), b, "numpy")
    grid = Grid((32, 32), (3.0, 3.0))
    X, Y = grid.mesh()
    for sv in (0.3, 0.5, 0.75):
        med = Medium(ExpSlabIndex(1.0), s=sv)
        tc = transport_coefficients(ExpSlabPhase(1.0), med, grid)
        assert np.max(np.abs(tc.b_s.values.real - f(X, Y, sv))) <= 1e-8


def test_radial_bs():
    grid = Grid((32, 32), (3.0, 3.0))
    med = Medium(s=0.75)
    tc = transport_coefficients(RadialPhase((-2.0, 0.0)), med, grid)
    rho = np.linalg.norm(grid.points() - np.array([-2.0, 0.0]), axis=-1)
    # a distance phase has Hess(phi) grad phi = 0, so b_s = Delta phi = 1/rho in 2-D
    assert np.allclose(tc.b_s.values.real, 1 / rho, rtol=1e-12)


def test_degenerate_phase_guard():
    grid = Grid((32, 32), (3.0, 3.0))
    with pytest.raises(DegeneratePhaseError):
        transport_coefficients(PlanePhase((1.0, 0.0), speed=0.5), Medium(), grid)


def test_L10_plane_phase():
    grid = Grid((64, 64), (12.0, 12.0))
    s = 0.6
    a = Field.from_function(grid, lambda x, y: np.exp(-(x**2 + 2 * y**2)))
    out = apply_L10(PlanePhase((1.0, 0.0)), s, a)
    x, _ = grid.mesh()
    # plane phase: b_s = 0 and L10 a = -2is d_x a
    expect = -2j * s * (-2 * x) * a.values
    assert np.max(np.abs(out.values - expect)) <= 1e-10


def test_L10_polar_matches_grid():
    # for r = 1 and a = rho^(-1/2): da/drho + a / (2 rho) = 0, so L10 a = 0
    rho = np.linspace(0.5, 2.0, 7)
    a = rho**-0.5
    out = l10_polar(np.ones_like(rho), np.zeros_like(rho), 1 / rho, a, -0.5 * rho**-1.5, 0.7)
    assert np.allclose(out, 0.0, atol=1e-14)


# ------------------------------------------------------------ symbol table


def test_binom_ext():
    assert binom_ext(0.5, 0) == 1.0
    assert binom_ext(0.5, 2) == pytest.approx(-0.125)
    assert binom_ext(3, 4) == 0.0
    assert binom_ext(3, 2) == 3.0


@pytest.mark.parametrize("nu", range(1, 9))
def test_symbol_term_count(nu):
    table = ConstCoefSymbolTable(0.6, (1.0, 0.0), nu_max=10)
    for l in range(nu):
        assert len(table.terms(nu, l)) == (nu - l) // 2 + 1
        assert table.terms(nu, l) == table.terms(nu - l, 0)


def test_low_symbols():
    s = 0.6
    t = ConstCoefSymbolTable(s, (1.0, 0.0))
    xi = np.array([[0.3, -0.7], [1.1, 0.2]])
    ax, k2 = xi[:, 0], np.sum(xi**2, axis=1)
    assert np.allclose(t.symbol_value(1, 0, xi), 2 * s * ax)
    assert np.allclose(t.symbol_value(2, 0, xi), s * k2 + 2 * s * (s - 1) * ax**2)


@given(s=st.floats(0.1, 1.0), x1=st.floats(-3, 3), x2=st.floats(-3, 3))
def test_symbols_sum_to_binomial_series(s, x1, x2):
    # |tau alpha + xi|^(2s) - tau^(2s) = sum_nu tau^(2s - nu) psi_{nu,0}(xi) + O(tau^(2s-13))
    tau = 100.0
    t = ConstCoefSymbolTable(s, (1.0, 0.0), nu_max=12)
    xi = np.array([x1, x2])
    exact = ((tau + x1) ** 2 + x2**2) ** s - tau ** (2 * s)
    series = sum(tau ** (2 * s - nu) * t.symbol_value(nu, 0, xi) for nu in range(1, 13))
    assert abs(series - exact) <= 1e-12 * max(1.0, abs(exact))


def test_symbol_multiplier_and_csv(tmp_path):
    s = 0.6
    t = ConstCoefSymbolTable(s, (1.0, 0.0), nu_max=4)
    grid = Grid((64, 8), (2 * np.pi, 2 * np.pi))
    x, _ = grid.mesh()
    u = Field(grid, np.exp(3j * x))
    out = apply_multiplier(u, const_coef_symbol(t, 2, 0))
    assert np.allclose(out.values, t.symbol_value(2, 0, np.array([3.0, 0.0])) * u.values)
    p = tmp_path / "table.csv"
    t.to_csv(p)
    rows = p.read_text().splitlines()
    assert rows[0] == "nu,l,j,k,c"
    assert len(rows) - 1 == sum((nu - l) // 2 + 1 for nu in range(1, 5) for l in range(nu))
    with pytest.raises(DomainError):
        ConstCoefSymbolTable(s, (1.0, 1.0))


# ------------------------------------------------ constant-coefficient a_l


def _plane_a0(grid, width=0.5):
    return Field.from_function(grid, lambda x, y: np.exp(-(y**2) / width**2) + 0 * x)


def test_const_coef_recursion_on_plateau():
    s, M = 0.6, 3
    grid = Grid((1024, 64), (8.0, 8.0))
    t = ConstCoefSymbolTable(s, (1.0, 0.0))
    a0 = _plane_a0(grid)
    amps = const_coef_amplitudes(t, a0, M)
    w = axis_window(grid, 0)
    al = [a0 * w] + amps
    plateau = w > 1 - 1e-14
    for nu in range(M):
        lhs = spectral_gradient(al[nu + 1])[0].values
        S = sum(apply_multiplier(al[l], const_coef_symbol(t, nu + 2, l)).values for l in range(nu + 1))
        rhs = -0.5j / s * S
        scale = np.max(np.abs(rhs))
        assert np.max(np.abs(lhs - rhs)[plateau]) <= 1e-6 * scale


def test_const_coef_validation():
    t = ConstCoefSymbolTable(0.6, (1.0, 0.0))
    grid = Grid((256, 32), (8.0, 8.0))
    assert const_coef_amplitudes(t, _plane_a0(grid), 0) == []
    with pytest.raises(DomainError):
        const_coef_amplitudes(ConstCoefSymbolTable(0.6, (0.6, 0.8)), _plane_a0(grid), 1)
    vary = Field.from_function(grid, lambda x, y: np.exp(-(x**2 + y**2)))
    with pytest.raises(DomainError):
        const_coef_amplitudes(t, vary, 1)
    flat = Field(grid, np.ones(grid.sizes))
    with pytest.raises(SupportError):
        const_coef_amplitudes(t, flat, 1)


# ------------------------------------------------------------- amplitudes


def test_boundary_amplitude_kinds():
    th = np.linspace(-np.pi, np.pi, 101)
    b = BoundaryAmplitude("bump", center=0.0, width=0.5)
    v = b(th)
    assert v.max() == pytest.approx(1.0) and np.all(v[np.abs(th) >= 0.5] == 0)
    assert np.allclose(b.scaled(3.0)(th), 3 * v)
    assert np.allclose(BoundaryAmplitude("constant", scale=2.0)(th), 2.0)
    tab = BoundaryAmplitude("tabulated", nodes=np.linspace(0, 2 * np.pi, 8, endpoint=False), values=np.ones(8))
    assert np.allclose(tab(th), 1.0)
    with pytest.raises(DomainError):
        BoundaryAmplitude("tabulated", nodes=[0.0, 1.0, 2.0], values=[1.0, -1.0, 1.0])
    with pytest.raises(DomainError):
        BoundaryAmplitude("ring")


def test_log_weight():
    r, j = np.array([1.0, 2.0]), np.array([3.0, 4.0])
    s = 0.7
    assert np.allclose(np.exp(-log_weight(r, j, s)), r ** (0.5 - s) * j**-0.5)


def test_principal_amplitude_constant_index():
    s = 0.75
    med, chart = _chart_medium(ConstantIndex(1.0), ConstantPotential(0.0), s)
    pts = np.random.default_rng(0).uniform(-0.6, 0.6, (20, 2))
    a0, _, smp = principal_amplitude(chart, med, s, BUMP, pts)
    rho = np.linalg.norm(pts - chart.p, axis=-1)
    theta = np.arctan2(pts[:, 1], pts[:, 0] + 2.0)
    assert np.allclose(a0, BUMP(theta) * rho**-0.5, atol=1e-10)


@given(c=st.floats(0.1, 10.0))
def test_amplitude_is_homogeneous_in_b(c):
    s = 0.75
    med, chart = _chart_medium(GaussianLensIndex(0.3, 0.4), ConstantPotential(0.0), s)
    pts = np.array([[0.1, 0.2], [-0.3, 0.0]])
    a = polar_amplitude_closed_form(chart, med, s, BUMP, pts)
    b = polar_amplitude_closed_form(chart, med, s, BUMP.scaled(c), pts)
    assert np.allclose(b, c * a, rtol=1e-12)


@pytest.mark.parametrize("index", [GaussianLensIndex(0.3, 0.4), ExpSlabIndex(1.0)], ids=["lens", "slab"])
@pytest.mark.parametrize("s", [0.5, 0.75])
def test_closed_form_matches_ray_ode(index, s):
    med, chart = _chart_medium(index, GaussianPotential(0.8, 0.3), s)
    pts = np.random.default_rng(1).uniform(-0.6, 0.6, (6, 2))
    cf = polar_amplitude_closed_form(chart, med, s, BUMP, pts)
    ode = solve_transport_along_rays(med, chart, s, BUMP, pts)
    m = np.abs(cf) > 1e-3 * np.max(np.abs(cf))
    assert m.any()
    assert np.max(np.abs(cf - ode)[m] / np.abs(cf)[m]) <= 1e-4


def test_half_order_carries_potential_phase():
    s = 0.5
    med, chart = _chart_medium(ConstantIndex(1.0), ConstantPotential(0.7), s)
    pts = np.array([[0.0, 0.0], [0.4, 0.1]])
    a0 = polar_amplitude_closed_form(chart, med, s, BUMP, pts)
    rho = np.linalg.norm(pts - chart.p, axis=-1)
    theta = np.arctan2(pts[:, 1], pts[:, 0] + 2.0)
    # J = -int q / r drho = -0.7 rho for constant q and r = 1
    assert np.allclose(a0, BUMP(theta) * rho**-0.5 * np.exp(-0.7j * rho), atol=1e-10)
    with pytest.raises(RegimeError):
        polar_amplitude_closed_form(chart, med.with_s(0.4), 0.4, BUMP, pts)


# ------------------------------------------------------------ phase phi1


def test_phi1_constant_potential_plane():
    s = 0.3
    med = Medium(ConstantIndex(1.0), ConstantPotential(1.0), s)
    grid = Grid((32, 32), (3.0, 3.0))
    phi1 = phase_correction_phi1(med, PlanePhase((1.0, 0.0)), s, grid)
    x, _ = grid.mesh()
    # entry level set x1 = -1.25 (the left edge of Omega')
    assert np.allclose(phi1.values.real, -(x + 1.25) / (2 * s), atol=1e-12)


def test_phi1_solves_its_transport_equation():
    s = 0.3
    q = GaussianPotential(1.0, 0.4, (0.2, 0.1))
    med = Medium(ConstantIndex(1.0), q, s)
    phase = RadialPhase((-2.0, 0.0))
    grid = Grid((128, 128), (3.0, 3.0))
    phi1 = phase_correction_phi1(med, phase, s, grid).values.real
    g = phase.grad(grid.points())
    d = np.gradient(phi1, *grid.spacing, edge_order=2)
    lhs = 2 * s * (g[..., 0] * d[0] + g[..., 1] * d[1])
    om = med.omega.mask(grid)
    assert np.max(np.abs(lhs + med.q_on(grid))[om]) <= 5e-3


def test_phi1_regime():
    med = Medium(s=0.5)
    with pytest.raises(RegimeError):
        phase_correction_phi1(med, PlanePhase((1.0, 0.0)), 0.5, Grid((16, 16), (3.0, 3.0)))


def test_ray_integrals_entry_points():
    med = Medium()
    grid = Grid((16, 16), (3.0, 3.0))
    region = med.omega.mask(grid)
    ints, entry = ray_integrals(PlanePhase((1.0, 0.0)), med, grid, region, [lambda x: np.ones(len(x))])
    pts = grid.points()[region]
    assert np.allclose(entry[:, 0], -1.25)
    assert np.allclose(entry[:, 1], pts[:, 1])
    assert np.allclose(ints[:, 0], pts[:, 0] + 1.25)
