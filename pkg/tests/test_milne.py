import numpy as np
import pytest

from ghostkin.errors import CutoffTooLarge
from ghostkin.milne import (MilneProblemSpec, build_milne_grid, bv_diagnostic, chi, chibar,
                            cutoff_limit_study, layer_data, mean_free_path, solve_milne,
                            thermal_creep_layer)
from ghostkin.velocity_kinetics import (LocalMaxwellian, assemble_operator, build_grid,
                                        burnett_functions, transport_coefficients)

# hard-sphere thermal creep slip divided by the viscosity constant, from
# linearized-Boltzmann half-space tables
CREEP_RATIO_HS = 1.018


@pytest.fixture(scope="module")
def setup12():
    g = build_grid(12, 7.5)
    op = assemble_operator(g, LocalMaxwellian(1.0, 1.0))
    return g, op, build_milne_grid(g, 20.0)


def test_bump_function():
    y = np.linspace(-3, 3, 601)
    c = chi(y)
    assert np.all(c[np.abs(y) <= 1] == 1.0)
    assert np.all(c[np.abs(y) >= 2] == 0.0)
    assert np.all((c >= 0) & (c <= 1))
    assert np.allclose(chibar(y), 1 - c)
    # monotone on the ramp
    r = c[(y > 1) & (y < 2)]
    assert np.all(np.diff(r) <= 0)


def test_mean_free_path_scaling():
    assert mean_free_path(2.0, 1.0) == pytest.approx(2 * mean_free_path(1.0, 1.0))
    assert mean_free_path(1.0, 2.0, 3.0) == pytest.approx(mean_free_path() / 6)


def test_grid_stretching():
    g = build_grid(12, 7.5)
    mg = build_milne_grid(g, 20.0)
    d = np.diff(mg.eta)
    assert mg.L_mfp == pytest.approx(20.0)
    assert d[0] < d[len(d) // 2]
    with pytest.raises(ValueError):
        build_milne_grid(g, 0.0)


@pytest.mark.parametrize("kw", [{"constraint": "bogus"}, {"theta": -0.1}])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        MilneProblemSpec(np.zeros(3), **kw)


def test_nonfinite_data_rejected():
    with pytest.raises(ValueError):
        MilneProblemSpec(np.array([0.0, np.nan]))


def test_zero_data_gives_zero(setup12):
    _, op, mg = setup12
    sol = solve_milne(mg, MilneProblemSpec(np.zeros(op.grid.size), theta=0.5), operator=op)
    assert np.abs(sol.G).max() <= 1e-12


def test_cutoff_too_large(setup12):
    _, op, mg = setup12
    with pytest.raises(CutoffTooLarge):
        solve_milne(mg, MilneProblemSpec(layer_data(op, [0, 1, 0]), theta=1.0), operator=op)


@pytest.fixture(scope="module")
def study12(setup12):
    _, op, mg = setup12
    vmin = np.abs(op.velocities[:, 0]).min()
    spec = MilneProblemSpec(layer_data(op, [0, 1, 0]))
    return cutoff_limit_study(mg, spec, [vmin, vmin / 2, vmin / 4], operator=op)


def test_cutoff_plateau_and_flux(study12, setup12):
    op = setup12[1]
    for sol in study12["solutions"]:
        band = np.abs(op.velocities[:, 0]) <= sol.spec.theta
        assert np.all(sol.G[:, band] == 0.0)
        assert sol.flux_drift() <= 1e-8 * sol.norm()
        assert sol.decay_rate > 0


def test_cutoff_differences_settle(study12):
    d = study12["differences"]
    assert d[0] > 0
    assert d[1] < d[0]


def test_theta_order_validated(setup12):
    _, op, mg = setup12
    with pytest.raises(ValueError):
        cutoff_limit_study(mg, MilneProblemSpec(np.zeros(op.grid.size)), [0.1, 0.2], operator=op)


def test_bv_rows(study12):
    rows = bv_diagnostic(study12["solutions"])
    assert len(rows) == 3
    assert all(r["tv_eta"] > 0 and r["tv_v"] > 0 for r in rows)
    assert "tv_eta_ratio" in rows[1]


def test_decay_rate_stable_under_domain_doubling(setup12):
    g, op, _ = setup12
    data = layer_data(op, [0, 1, 0])
    k = [solve_milne(build_milne_grid(g, L), MilneProblemSpec(data), operator=op).decay_rate
         for L in (20.0, 40.0)]
    assert k[0] > 0
    assert abs(k[1] / k[0] - 1) < 0.1


def test_creep_layer_and_slip_coefficient():
    g = build_grid(16, 7.5)
    op = assemble_operator(g, LocalMaxwellian(1.0, 1.0))
    bu = burnett_functions(op)
    res = thermal_creep_layer(build_milne_grid(g, 20.0), 1.0, [1.0, 0.0], burnett=bu,
                              operator=op)
    lam = transport_coefficients(bu, op).lam
    assert res.beta0 > 0
    assert res.beta0 / lam == pytest.approx(CREEP_RATIO_HS, rel=0.05)
    # no normal slip, no spanwise slip, zero mass flux
    assert abs(res.u_B[0]) < 1e-10
    assert abs(res.u_B[2]) < 1e-10
    assert res.solution.flux_drift() < 1e-10


@pytest.mark.parametrize("T", [0.5, 2.0])
def test_creep_slip_scales_with_sqrt_temperature(T):
    g = build_grid(12, 7.5)
    out = []
    for Tw in (1.0, T):
        op = assemble_operator(g, LocalMaxwellian(1.0, Tw))
        res = thermal_creep_layer(build_milne_grid(g, 20.0, T_w=Tw), Tw, [1.0, 0.0],
                                  operator=op)
        out.append(res.beta0 / np.sqrt(Tw))
    assert out[1] == pytest.approx(out[0], rel=1e-6)


def test_creep_zero_gradient():
    g = build_grid(12, 7.5)
    res = thermal_creep_layer(build_milne_grid(g, 20.0), 1.0, [0.0, 0.0])
    assert res.beta0 is None
    assert np.all(res.solution.G == 0)
