import numpy as np
import pytest

from ghostkin.errors import TemperatureNonPositive
from ghostkin.ghost_fluid import (GhostCoefficients, GhostOptions, SlabDomain, WallProfile,
                                  conduction_solution, ghost_gap, residual_report,
                                  shooting_profile, solve_ghost_system)
from manufactured import Manufactured

# hard-sphere values from the 16^3 velocity grid, frozen for speed
HS = GhostCoefficients(1.0, 1.3702, 0.08932, -2.4067, -0.2521, 0.08844, -1.0)


def slope(x, y):
    return np.polyfit(np.log(x), np.log(y), 1)[0]


@pytest.mark.parametrize("n", [(4, 16), (16, 7)])
def test_domain_minimum_size(n):
    with pytest.raises(ValueError):
        SlabDomain(*n)


def test_domain_geometry():
    d = SlabDomain(8, 10, 2.0)
    assert d.hx == 0.25 and d.hz == 0.1
    assert d.xc[0] == pytest.approx(0.125)
    assert len(d.zf) == 11
    assert d.refine().nx == 16
    assert d.norm(np.ones((8, 10))) == pytest.approx(np.sqrt(2.0))


def test_wall_profiles():
    x = np.linspace(0, 1, 9)
    w = WallProfile.single_harmonic(0.1)
    assert np.allclose(w.temperature(0, x, 1.0), 1 + 0.1 * np.sin(2 * np.pi * x))
    assert np.allclose(w.slope(0, x, 1.0), 0.2 * np.pi * np.cos(2 * np.pi * x))
    assert np.allclose(w.curvature(0, x, 1.0), -0.4 * np.pi ** 2 * np.sin(2 * np.pi * x))
    assert np.allclose(w.temperature(1, x, 1.0), 1.0)
    both = WallProfile.single_harmonic(0.1, walls="both")
    assert np.allclose(both.temperature(1, x, 1.0), w.temperature(0, x, 1.0))
    with pytest.raises(ValueError):
        WallProfile.single_harmonic(0.1, walls="side")


@pytest.mark.parametrize("n", [6, 7, 16])
def test_samples_interpolated_exactly(n):
    x = np.arange(n) / n
    bottom = 1 + 0.05 * np.cos(2 * np.pi * x) - 0.02 * np.sin(4 * np.pi * x)
    top = np.full(n, 1.1)
    w = WallProfile.from_samples(bottom, top)
    assert np.allclose(w.temperature(0, x, 1.0), bottom, atol=1e-14)
    assert np.allclose(w.temperature(1, x, 1.0), top, atol=1e-14)


def test_coefficient_laws():
    c = GhostCoefficients(2.0, 1.5, 0.1, -1.0, -0.5, 0.2, -1.0)
    assert c.kappa(4.0) == pytest.approx(1.5 * 32)
    assert c.lam(4.0) == pytest.approx(0.2)
    assert c.beta0(4.0) == pytest.approx(0.2)
    assert c.K2_at(2.0) == pytest.approx(-0.25)
    T = np.array([0.5, 1.0, 1.7])
    assert np.allclose(c.inverse_kirchhoff(c.kirchhoff(T)), T)
    cl = c.classical()
    assert cl.K1 == cl.K2 == cl.beta0_ref == 0.0
    with pytest.raises(ValueError):
        GhostCoefficients(P=-1.0)


def test_uniform_walls_reproduce_rest_state():
    s = solve_ghost_system(SlabDomain(16, 16), WallProfile.uniform(), HS)
    assert np.abs(s.T - 1).max() < 1e-10
    assert max(np.abs(s.ux).max(), np.abs(s.uz).max(), np.abs(s.p_frak).max()) < 1e-10


@pytest.mark.parametrize("tb,tt", [(0.95, 1.05), (1.2, 0.8)])
def test_two_wall_contrast_matches_shooting(tb, tt):
    d = SlabDomain(8, 24)
    w = WallProfile.two_wall_contrast(tb, tt)
    s = solve_ghost_system(d, w, HS)
    assert np.abs(s.T - shooting_profile(tb, tt, d.zc)[None, :]).max() < 1e-6
    assert np.abs(s.ux).max() < 1e-12


def test_residual_report_small():
    w = WallProfile.single_harmonic(0.05)
    s = solve_ghost_system(SlabDomain(16, 16), w, HS)
    rep = residual_report(s, HS, w)
    assert max(v for k, v in rep.items() if k.startswith("eq_")) < 1e-8
    assert rep["bc_normal_velocity"] == 0.0
    assert rep["gauge"] < 1e-12


@pytest.fixture(scope="module")
def mms_errors():
    m = Manufactured(HS)
    return [m.errors(solve_ghost_system(SlabDomain(n, n), m.walls, HS, m.options()))
            for n in (16, 32)]


@pytest.mark.parametrize("field", ["T", "ux", "uz", "p"])
def test_manufactured_order(mms_errors, field):
    assert np.log2(mms_errors[0][field] / mms_errors[1][field]) >= 1.9


def test_fourier_law_limit():
    d = SlabDomain(16, 16)
    deltas = np.array([0.08, 0.04, 0.02])
    dT, du = [], []
    for delta in deltas:
        w = WallProfile.single_harmonic(delta)
        s = solve_ghost_system(d, w, HS)
        dT.append(d.norm(s.T - conduction_solution(d, w, HS)))
        du.append(s.velocity_norm())
    assert slope(deltas, dT) >= 1.5
    assert 0.7 <= slope(deltas, du) <= 1.3


def test_ghost_gap_positive():
    g = ghost_gap(SlabDomain(16, 16), WallProfile.single_harmonic(0.1), HS)
    assert g["gap_ratio"] > 0
    assert g["u1_norm"] > 0
    # without creep and thermal stress there is no flow
    assert g["classical"].velocity_norm() < 1e-12


def test_nonpositive_wall_temperature():
    with pytest.raises(TemperatureNonPositive):
        solve_ghost_system(SlabDomain(8, 8), WallProfile.two_wall_contrast(-0.1, 1.0), HS)


def test_large_gradient_warns():
    with pytest.warns(UserWarning):
        solve_ghost_system(SlabDomain(8, 8), WallProfile.single_harmonic(0.05), HS,
                           GhostOptions(max_amplitude=0.1))
