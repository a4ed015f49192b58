"""Half-space Milne problems with specular reflection at a far boundary.

The unknown G(eta, v) solves

    v_eta dG/deta + nu G = chibar(v_eta / theta) K[G]

on [0, L] with incoming data chibar(v_eta / theta) h at eta = 0 and specular
reflection at eta = L. Velocity axis 0 is the wall normal. The transport
part is integrated by a trapezoidal (diamond) rule in each cell, which keeps
the discrete mass flux exactly constant when theta = 0. The fixed point
G = Sweep(chibar K G) is solved by GMRES preconditioned by the sweep itself.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .errors import CutoffTooLarge, DecayFitFailed, NoConvergence
from .velocity_kinetics import (LocalMaxwellian, assemble_operator,
                                burnett_functions)


def chi(y):
    """Smooth bump: 1 for |y| <= 1, 0 for |y| >= 2."""
    y = np.abs(np.asarray(y, dtype=float))

    def e(t):
        return np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)

    a, b = e(2.0 - y), e(y - 1.0)
    return a / (a + b)


def chibar(y):
    return 1.0 - chi(y)


def mean_free_path(T_w=1.0, P=1.0, q0=1.0):
    """sqrt(T_w) / nu_w(0): the distance a thermal particle travels between collisions."""
    rho = P / T_w
    return 1.0 / (q0 * rho * 4 * np.sqrt(2 * np.pi))


@dataclass(frozen=True, eq=False)
class MilneGrid:
    eta: np.ndarray
    L: float
    mfp: float
    vgrid: object

    @property
    def L_mfp(self):
        return self.L / self.mfp


def build_milne_grid(vgrid, L_mfp=20.0, T_w=1.0, P=1.0, q0=1.0,
                     first_cell=0.02, growth=1.15, max_cell=0.4):
    """Nodes on [0, L] (cell sizes in mean free paths) stretched near the wall."""
    if L_mfp <= 0:
        raise ValueError("L must be positive")
    ell = mean_free_path(T_w, P, q0)
    cells = []
    pos, d = 0.0, first_cell
    while pos < L_mfp - 1e-12:
        d = min(d, max_cell, L_mfp - pos)
        cells.append(d)
        pos += d
        d *= growth
    eta = np.concatenate([[0.0], np.cumsum(cells)]) * ell
    eta[-1] = L_mfp * ell
    return MilneGrid(eta, float(L_mfp * ell), float(ell), vgrid)


@dataclass(frozen=True, eq=False)
class MilneProblemSpec:
    incoming: np.ndarray
    T_w: float = 1.0
    P: float = 1.0
    q0: float = 1.0
    constraint: str = "zero-mass-flux"
    theta: float = 0.0

    def __post_init__(self):
        if self.constraint not in ("zero-mass-flux", "none"):
            raise ValueError(f"unknown constraint {self.constraint!r}")
        if self.theta < 0:
            raise ValueError("theta must be nonnegative")
        if not np.all(np.isfinite(self.incoming)):
            raise ValueError("incoming data must be finite")


@dataclass(frozen=True, eq=False)
class MilneSolution:
    grid: MilneGrid
    spec: MilneProblemSpec
    operator: object
    G: np.ndarray
    flux_trace: np.ndarray
    iteration_log: list
    shift: float = 0.0
    limit: tuple = None
    decay_rate: float = None

    @property
    def velocities(self):
        return self.operator.velocities

    def norm(self):
        """Discrete L2 norm over (eta, v)."""
        w = self.operator.weights
        return float(np.sqrt(np.trapezoid(np.sum(w * self.G ** 2, axis=1), self.grid.eta)))

    def flux_drift(self):
        return float(np.max(np.abs(self.flux_trace - self.flux_trace[0])))


class _Transport:
    """Cellwise trapezoidal sweeps for one velocity grid and cutoff."""

    def __init__(self, mgrid, op, theta):
        v = op.velocities
        self.op = op
        self.eta = mgrid.eta
        self.vn = v[:, 0]
        self.pos = self.vn > 0
        self.mirror = op.grid.permutation(flips=(True, False, False))
        self.cut = chibar(self.vn / theta) if theta > 0 else np.ones_like(self.vn)
        self.nu = op.nu
        dz = np.diff(self.eta)
        a = np.abs(self.vn)[None, :] / dz[:, None]
        self.num = a - 0.5 * self.nu
        self.den = a + 0.5 * self.nu

    def source(self, G):
        # K G = nu G - L G
        return self.cut * (self.nu * G - self.op.apply(G))

    def sweep(self, S, inflow):
        J = len(self.eta)
        G = np.zeros((J, len(self.vn)))
        p, m = self.pos, ~self.pos
        G[0, p] = self.cut[p] * inflow[p]
        for j in range(J - 1):
            G[j + 1, p] = (self.num[j, p] * G[j, p]
                           + 0.5 * (S[j, p] + S[j + 1, p])) / self.den[j, p]
        G[-1, m] = G[-1, self.mirror][m]
        for j in range(J - 2, -1, -1):
            G[j, m] = (self.num[j, m] * G[j + 1, m]
                       + 0.5 * (S[j, m] + S[j + 1, m])) / self.den[j, m]
        return G


def _solve_linear(tr, inflow, tol, maxiter):
    J, n = len(tr.eta), len(tr.vn)
    zero_src = np.zeros((J, n))
    rhs = tr.sweep(zero_src, inflow).ravel()
    none = np.zeros(n)

    def mv(x):
        G = x.reshape(J, n)
        return x - tr.sweep(tr.source(G), none).ravel()

    A = LinearOperator((J * n, J * n), matvec=mv, dtype=float)
    log = []
    rn = np.linalg.norm(rhs)
    if rn == 0:
        return np.zeros((J, n)), log
    x, info = gmres(A, rhs, rtol=tol, atol=0.0, restart=80, maxiter=maxiter,
                    callback=lambda r: log.append(float(r)), callback_type="pr_norm")
    if info != 0:
        G = x.reshape(J, n)
        est = _spectral_radius(tr, G)
        raise NoConvergence(f"GMRES stopped with info={info}; "
                            f"source-iteration spectral radius ~ {est:.4f}", log)
    return x.reshape(J, n), log


def _spectral_radius(tr, G, steps=8):
    none = np.zeros(len(tr.vn))
    x = G / (np.linalg.norm(G) or 1.0)
    r = 0.0
    for _ in range(steps):
        y = tr.sweep(tr.source(x), none)
        r = np.linalg.norm(y)
        x = y / (r or 1.0)
    return r


def _flux(op, G):
    return (G * (op.weights * op.velocities[:, 0] * op.sqrt_mu)).sum(axis=-1)


def solve_milne(mgrid, spec, iter_tol=1e-10, maxiter=400, operator=None):
    """Solve the (L, theta)-approximate Milne problem."""
    op = operator or assemble_operator(mgrid.vgrid, LocalMaxwellian(spec.P, spec.T_w), spec.q0)
    vmin = np.min(np.abs(op.velocities[:, 0]))
    if spec.theta > vmin * (1 + 1e-12):
        raise CutoffTooLarge(f"theta = {spec.theta} exceeds the smallest normal "
                             f"velocity node {vmin:.4f}")
    tr = _Transport(mgrid, op, spec.theta)
    h = np.where(tr.pos, np.asarray(spec.incoming, dtype=float), 0.0)
    G, log = _solve_linear(tr, h, iter_tol, maxiter)
    shift = 0.0
    if spec.constraint == "zero-mass-flux" and spec.theta > 0:
        f0 = _flux(op, G[0])
        unit = np.where(tr.pos, op.sqrt_mu, 0.0)
        G1, log1 = _solve_linear(tr, unit, iter_tol, maxiter)
        f1 = _flux(op, G1[0])
        if abs(f1) > 0:
            shift = -f0 / f1
            G = G + shift * G1
        log = log + log1
    sol = MilneSolution(mgrid, spec, op, G, _flux(op, G), log, shift)
    try:
        return with_limit(sol)
    except DecayFitFailed:
        return sol


def _far_average(sol):
    eta = sol.grid.eta
    m = eta >= 0.75 * sol.grid.L
    return np.trapezoid(sol.G[m], eta[m], axis=0) / (eta[m][-1] - eta[m][0])


def _null_coefficients(op, f):
    v = op.velocities
    ms = op.sqrt_mu
    T = op.maxwellian.T
    basis = np.vstack([ms, v.T * ms, (np.sum(v * v, axis=1) - 3 * T) * ms])
    gram = (basis * op.weights) @ basis.T
    return np.linalg.solve(gram, (basis * op.weights) @ f)


def extract_limit(sol, window=(0.25, 0.75)):
    """Return (p, b, c) of the far-field null state and the fitted decay rate K0.

    K0 is per unit eta; the fit uses the distance to the far-field average of
    the full profile, which coincides with the null limit when theta = 0.
    """
    op = sol.operator
    far = _far_average(sol)
    coef = _null_coefficients(op, far)
    w = op.weights
    dist = np.sqrt(np.sum(w * (sol.G - far) ** 2, axis=1))
    scale = np.sqrt(np.sum(w * sol.G ** 2, axis=1)).max()
    if scale == 0:
        return coef, None
    eta = sol.grid.eta
    L = sol.grid.L
    m = (eta >= window[0] * L) & (eta <= window[1] * L) & (dist > 1e-11 * scale)
    if m.sum() < 3:
        # profile already at its limit throughout the window
        if dist.max() <= 1e-9 * scale:
            return coef, None
        raise DecayFitFailed("too few points above round-off in the fit window")
    slope = np.polyfit(eta[m], np.log(dist[m]), 1)[0]
    if not slope < 0:
        raise DecayFitFailed(f"nonnegative log-slope {slope:.3e}")
    return coef, float(-slope)


def with_limit(sol):
    coef, k0 = extract_limit(sol)
    return MilneSolution(sol.grid, sol.spec, sol.operator, sol.G, sol.flux_trace,
                         sol.iteration_log, sol.shift, tuple(coef), k0)


# ---------------------------------------------------------------- thermal creep

@dataclass(frozen=True, eq=False)
class CreepLayerResult:
    solution: MilneSolution
    rho_B: float
    u_B: np.ndarray
    T_B: float
    beta0: float
    decaying: np.ndarray = field(repr=False, default=None)


def layer_data(op, gradient, burnett=None):
    """Incoming datum A . grad T / (2 T^2), which cancels the Burnett part of
    the first-order interior correction at the wall."""
    burnett = burnett or burnett_functions(op)
    T = op.maxwellian.T
    return np.asarray(gradient) @ burnett.A / (2 * T * T)


def thermal_creep_layer(mgrid, T_w, tangential_gradient, P=1.0, q0=1.0, burnett=None,
                        normal_gradient=0.0, iter_tol=1e-11, operator=None):
    op = operator or assemble_operator(mgrid.vgrid, LocalMaxwellian(P, T_w), q0)
    gt = np.asarray(tangential_gradient, dtype=float)
    grad = np.array([normal_gradient, gt[0], gt[1]])
    data = layer_data(op, grad, burnett)
    spec = MilneProblemSpec(data, T_w, P, q0, "zero-mass-flux", 0.0)
    sol = solve_milne(mgrid, spec, iter_tol=iter_tol, operator=op)
    if not np.any(grad):
        return CreepLayerResult(sol, 0.0, np.zeros(3), 0.0, None, np.zeros_like(sol.G))
    if sol.limit is None:
        sol = with_limit(sol)
    p, b, c = sol.limit[0], np.array(sol.limit[1:4]), sol.limit[4]
    T, rho = op.maxwellian.T, op.maxwellian.rho
    # mu^{1/2}(rho_B/rho + u_B.v/T + T_B (|v|^2-3T)/(2T^2))
    rho_B, u_B, T_B = p * rho, b * T, c * 2 * T * T
    ratios = [u_B[k + 1] / gt[k] for k in range(2) if gt[k] != 0]
    beta0 = float(np.mean(ratios)) if ratios else None
    far = (np.array([p, *b, c]) @ _basis(op))
    return CreepLayerResult(sol, float(rho_B), u_B, float(T_B), beta0, sol.G - far)


def _basis(op):
    v = op.velocities
    ms = op.sqrt_mu
    T = op.maxwellian.T
    return np.vstack([ms, v.T * ms, (np.sum(v * v, axis=1) - 3 * T) * ms])


# ---------------------------------------------------------------- theta studies

def bv_diagnostic(solutions):
    """Discrete L1 norms of d/deta G and d/dv_eta G for each solution."""
    rows = []
    for sol in solutions:
        op = sol.operator
        eta = sol.grid.eta
        w = op.weights
        tv_eta = float(np.sum(np.abs(np.diff(sol.G, axis=0)) * w))
        # one-sided differences along the normal velocity axis
        grid = op.grid
        nxt = _neighbor(grid)
        have = nxt >= 0
        dv = grid.spacing * np.sqrt(op.maxwellian.T)
        diff = np.abs(sol.G[:, nxt[have]] - sol.G[:, have]) / dv
        per_eta = np.sum(diff * w[have], axis=1)
        tv_v = float(np.trapezoid(per_eta, eta))
        rows.append({"theta": sol.spec.theta, "tv_eta": tv_eta, "tv_v": tv_v})
    for a, b in zip(rows[:-1], rows[1:]):
        for key in ("tv_eta", "tv_v"):
            b[key + "_ratio"] = b[key] / a[key] if a[key] > 0 else 1.0
    return rows


def _neighbor(grid):
    out = np.full(grid.size, -1)
    for i, r in enumerate(grid.index):
        key = (r[0] + 1, r[1], r[2])
        out[i] = grid._lookup.get(key, -1)
    return out


def cutoff_limit_study(mgrid, spec, theta_list, operator=None, iter_tol=1e-11):
    """Solutions at decreasing theta and successive L2 differences."""
    thetas = list(theta_list)
    if any(b >= a for a, b in zip(thetas[:-1], thetas[1:])):
        raise ValueError("theta values must decrease")
    sols = []
    for th in thetas:
        s = MilneProblemSpec(spec.incoming, spec.T_w, spec.P, spec.q0, spec.constraint, th)
        sols.append(solve_milne(mgrid, s, iter_tol=iter_tol, operator=operator))
        operator = sols[-1].operator
    w = operator.weights
    eta = mgrid.eta
    diffs = []
    for a, b in zip(sols[:-1], sols[1:]):
        d = np.sqrt(np.trapezoid(np.sum(w * (a.G - b.G) ** 2, axis=1), eta))
        diffs.append(float(d))
    return {"theta": thetas, "differences": diffs, "solutions": sols}
