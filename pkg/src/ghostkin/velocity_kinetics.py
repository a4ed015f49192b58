"""Velocity grids, the hard-sphere linearized collision operator and its moments.

All operators are built once on a reference grid (density 1, temperature 1,
q0 = 1) and rescaled. For a Maxwellian with density rho and temperature T
the grid nodes are sqrt(T) times the reference nodes, and the operator obeys

    L_{rho,T} = q0 * rho * sqrt(T) * L_ref

so a single dense matrix serves every state.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft as sfft
from scipy.special import erf

from .errors import (IsotropyDefect, MemoryBudgetExceeded, NoConvergence,
                     SolvabilityViolation)

DEFAULT_NODE_BUDGET = 9000 ** 2
PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
OFF_DIAGONAL = (3, 4, 5)


# ---------------------------------------------------------------- grid

@dataclass(frozen=True, eq=False)
class VelocityGrid:
    """Uniform midpoint nodes inside the ball |v| <= cutoff_radius."""

    n_axis: int
    cutoff_radius: float
    spacing: float
    axis: np.ndarray
    index: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    gaussian_error: float
    symmetry_tag: str = "full-octahedral"
    _lookup: dict = field(default=None, repr=False)

    @property
    def size(self):
        return len(self.weights)

    def permutation(self, flips=(False, False, False), order=(0, 1, 2)):
        """Index map p with f(S v_i) = f[p[i]] for the signed permutation S."""
        idx = self.index[:, list(order)].copy()
        n = self.n_axis
        for a, flip in enumerate(flips):
            if flip:
                idx[:, a] = n - 1 - idx[:, a]
        return np.array([self._lookup[tuple(r)] for r in idx])

    def to_cube(self, f, pad=0):
        n = self.n_axis + 2 * pad
        box = np.zeros(f.shape[:-1] + (n, n, n))
        ii = self.index + pad
        box[..., ii[:, 0], ii[:, 1], ii[:, 2]] = f
        return box

    def gradient(self, f):
        """Spectral gradient of node values; returns shape (..., 3, n)."""
        pad = self.n_axis // 2
        box = self.to_cube(f, pad)
        n = box.shape[-1]
        k = 2 * np.pi * sfft.fftfreq(n, d=self.spacing)
        fh = sfft.fftn(box, axes=(-3, -2, -1))
        ii = self.index + pad
        out = []
        for a in range(3):
            shape = [1, 1, 1]
            shape[a] = n
            d = np.real(sfft.ifftn(fh * (1j * k).reshape(shape), axes=(-3, -2, -1)))
            out.append(d[..., ii[:, 0], ii[:, 1], ii[:, 2]])
        return np.stack(out, axis=-2)


def build_grid(nodes_per_axis, cutoff_radius, ball=True):
    """Midpoint lattice on [-R, R]^3, restricted to |v| <= R unless ``ball`` is False.

    The ball keeps the corners, where the Maxwellian weight underflows, out of
    the bilinear operator.
    """
    n = int(nodes_per_axis)
    if n != nodes_per_axis or n % 2 or n < 8:
        raise ValueError("nodes_per_axis must be an even integer >= 8")
    R = float(cutoff_radius)
    if R < 5.0:
        raise ValueError("cutoff_radius must be at least 5 thermal speeds")
    h = 2.0 * R / n
    axis = (np.arange(n) - 0.5 * (n - 1)) * h
    ijk = np.stack(np.meshgrid(np.arange(n), np.arange(n), np.arange(n),
                               indexing="ij"), -1).reshape(-1, 3)
    v = axis[ijk]
    r2 = np.sum(v * v, axis=1)
    keep = r2 <= R * R * (1 + 1e-12) if ball else np.ones(len(v), bool)
    ijk, v = ijk[keep], v[keep]
    w = np.full(len(v), h ** 3)
    gauss = np.sum(w * np.exp(-0.5 * np.sum(v * v, axis=1)))
    err = abs(gauss / (2 * np.pi) ** 1.5 - 1.0)
    lookup = {tuple(r): i for i, r in enumerate(ijk)}
    return VelocityGrid(n, R, h, axis, ijk, v, w, float(err), _lookup=lookup)


# ---------------------------------------------------------------- maxwellian

@dataclass(frozen=True)
class LocalMaxwellian:
    P: float
    T: float
    bulk_velocity: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.P > 0 and self.T > 0):
            raise ValueError("pressure and temperature must be positive")

    @property
    def rho(self):
        return self.P / self.T

    def __call__(self, v):
        v = np.asarray(v) - np.asarray(self.bulk_velocity)
        return self.rho * (2 * np.pi * self.T) ** -1.5 * np.exp(
            -np.sum(v * v, axis=-1) / (2 * self.T))

    def sqrt(self, v):
        v = np.asarray(v) - np.asarray(self.bulk_velocity)
        return np.sqrt(self.rho) * (2 * np.pi * self.T) ** -0.75 * np.exp(
            -np.sum(v * v, axis=-1) / (4 * self.T))


def physical_nodes(grid, maxwellian):
    return np.sqrt(maxwellian.T) * grid.nodes


def physical_weights(grid, maxwellian):
    return maxwellian.T ** 1.5 * grid.weights


def _g(r):
    r = np.asarray(r, dtype=float)
    out = np.full(r.shape, 2.0 * np.sqrt(2.0 / np.pi))
    m = r > 1e-8
    rm = r[m]
    out[m] = (np.sqrt(2 / np.pi) * np.exp(-rm ** 2 / 2)
              + (rm + 1 / rm) * erf(rm / np.sqrt(2)))
    return out


def collision_frequency(grid, maxwellian, q0=1.0):
    """nu(v) = 2 pi q0 rho sqrt(T) g(|v - u| / sqrt(T)) at the physical nodes."""
    v = physical_nodes(grid, maxwellian) - np.asarray(maxwellian.bulk_velocity)
    r = np.linalg.norm(v, axis=1) / np.sqrt(maxwellian.T)
    return 2 * np.pi * q0 * maxwellian.rho * np.sqrt(maxwellian.T) * _g(r)


def _reference_invariants(grid):
    v = grid.nodes
    ms = (2 * np.pi) ** -0.75 * np.exp(-np.sum(v * v, axis=1) / 4)
    return np.vstack([ms, v.T * ms, (np.sum(v * v, axis=1) - 3) * ms])


def _orthonormalize(chi, w):
    q, r = np.linalg.qr((chi * np.sqrt(w)).T)
    q = q * np.sign(np.diag(r))
    return q.T / np.sqrt(w)


@lru_cache(maxsize=4)
def _reference_matrix(n_axis, radius, budget):
    grid = build_grid(n_axis, radius)
    n = grid.size
    if n * n > budget:
        raise MemoryBudgetExceeded(
            f"{n} nodes need a {n}x{n} matrix, above the budget of {budget} entries")
    v = grid.nodes
    w = grid.weights[0]
    v2 = np.sum(v * v, axis=1)
    ms = (2 * np.pi) ** -0.75 * np.exp(-v2 / 4)
    nu = 2 * np.pi * _g(np.sqrt(v2))
    c2 = 4.0 / np.sqrt(2 * np.pi)
    A = np.empty((n, n))
    diag = np.empty(n)
    block = max(1, 2_000_000 // n)
    for s in range(0, n, block):
        e = min(n, s + block)
        d = np.sqrt(np.sum((v[None, :, :] - v[s:e, None, :]) ** 2, axis=2))
        dd = np.where(d == 0, 1.0, d)
        apb = (v2[None, :] - v2[s:e, None]) / dd
        k2 = c2 / dd * np.exp(-(d * d + apb * apb) / 8)
        k2[d == 0] = 0.0
        k1 = 2 * np.pi * d * ms[s:e, None] * ms[None, :]
        kw = (k2 - k1) * w
        # diagonal chosen so that the mass invariant is annihilated exactly
        diag[s:e] = (kw @ ms) / ms[s:e]
        A[s:e] = -kw
    A[np.diag_indices(n)] = diag
    A = 0.5 * (A + A.T)
    chi = _reference_invariants(grid)
    raw = [np.linalg.norm(A @ c) / np.linalg.norm(c) for c in chi]
    E = _orthonormalize(chi, grid.weights)
    U = (E * np.sqrt(grid.weights)).T
    AU = A @ U
    A -= AU @ U.T
    A -= U @ (U.T @ A)
    A = 0.5 * (A + A.T)
    A.setflags(write=False)
    return grid, A, nu, E, np.array(raw)


# ---------------------------------------------------------------- operator

@dataclass(frozen=True, eq=False)
class LinearizedOperator:
    grid: VelocityGrid
    maxwellian: LocalMaxwellian
    q0: float
    nu: np.ndarray
    ref_matrix: np.ndarray
    scale: float
    null_ref: np.ndarray
    consistency_residual: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def velocities(self):
        return physical_nodes(self.grid, self.maxwellian)

    @property
    def weights(self):
        return physical_weights(self.grid, self.maxwellian)

    @property
    def sqrt_mu(self):
        return self.maxwellian.sqrt(self.velocities)

    @property
    def null_basis(self):
        """Orthonormal (5, n) basis of the null space in the weighted product."""
        return self.null_ref * self.maxwellian.T ** -0.75

    @property
    def matrix(self):
        return self.scale * self.ref_matrix

    @property
    def gain_matrix(self):
        return np.diag(self.nu) - self.matrix

    def apply(self, f):
        return np.asarray(f) @ self.ref_matrix.T * self.scale

    def inner(self, f, g):
        return np.sum(self.weights * f * g, axis=-1)

    def norm(self, f):
        return np.sqrt(self.inner(f, f))

    def invariants(self):
        v = self.velocities
        ms = self.sqrt_mu
        return np.vstack([ms, v.T * ms,
                          (np.sum(v * v, axis=1) - 3 * self.maxwellian.T) * ms])

    def null_residual(self):
        chi = self.invariants()
        return max(self.norm(self.apply(c)) / self.norm(c) for c in chi)

    def project(self, f):
        E = self.null_basis
        c = np.asarray(f) @ (E * self.weights).T
        return c @ E

    def collision(self, threads=1):
        from .collision_fsm import SpectralCollision
        if "fsm" not in self._cache:
            self._cache["fsm"] = SpectralCollision(self.grid, q0=self.q0, threads=threads)
        return self._cache["fsm"]


def assemble_operator(grid, maxwellian, q0=1.0, node_budget=DEFAULT_NODE_BUDGET):
    if np.any(np.asarray(maxwellian.bulk_velocity) != 0):
        raise ValueError("the operator is linearized about a Maxwellian at rest")
    if grid.size ** 2 > node_budget:
        raise MemoryBudgetExceeded(
            f"{grid.size} nodes exceed the configured budget of {node_budget} entries")
    g, A, _, E, raw = _reference_matrix(grid.n_axis, grid.cutoff_radius, node_budget)
    scale = q0 * maxwellian.rho * np.sqrt(maxwellian.T)
    nu = collision_frequency(grid, maxwellian, q0)
    return LinearizedOperator(grid, maxwellian, float(q0), nu, A, float(scale), E, raw)


# ---------------------------------------------------------------- projections

@dataclass(frozen=True)
class NullProjection:
    p: float
    b: np.ndarray
    c: float
    remainder: np.ndarray


def _hydro_coefficients(op, f, energy_shift):
    v = op.velocities
    ms = op.sqrt_mu
    basis = np.vstack([ms, v.T * ms,
                       (np.sum(v * v, axis=1) - energy_shift * op.maxwellian.T) * ms])
    gram = (basis * op.weights) @ basis.T
    rhs = (basis * op.weights) @ f
    coef = np.linalg.solve(gram, rhs)
    return coef, basis


def project_null(op, f):
    f = np.asarray(f, dtype=float)
    coef, basis = _hydro_coefficients(op, f, 3.0)
    rem = f - op.project(f)
    return NullProjection(float(coef[0]), coef[1:4].copy(), float(coef[4]), rem)


def quasi_inverse(op, g, tol=1e-10, solvability_tol=1e-4, maxiter=None):
    """Solve L f = g on the orthogonal complement of the null space.

    Conjugate gradients with re-projection every step. ``g`` may hold several
    right-hand sides along its first axis.
    """
    g = np.asarray(g, dtype=float)
    single = g.ndim == 1
    G = np.atleast_2d(g)
    gn = op.norm(G)
    pg = op.project(G)
    ratio = op.norm(pg) / np.where(gn > 0, gn, 1.0)
    if np.any(ratio > solvability_tol):
        raise SolvabilityViolation(
            f"null-space fraction {ratio.max():.3e} exceeds {solvability_tol:.1e}")
    b = G - pg
    bn = op.norm(b)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = op.inner(r, r)
    maxiter = maxiter or 10 * op.grid.size
    history = []
    for it in range(maxiter):
        res = np.sqrt(rr) / np.where(bn > 0, bn, 1.0)
        history.append(float(res.max()))
        if res.max() <= tol:
            break
        Ap = op.apply(p)
        pAp = op.inner(p, Ap)
        alpha = np.where(pAp > 0, rr / np.where(pAp > 0, pAp, 1.0), 0.0)
        x += alpha[:, None] * p
        x -= op.project(x)
        r -= alpha[:, None] * Ap
        r -= op.project(r)
        rr_new = op.inner(r, r)
        beta = rr_new / np.where(rr > 0, rr, 1.0)
        p = r + beta[:, None] * p
        rr = rr_new
    else:
        raise NoConvergence("quasi-inverse did not converge", history)
    # recompute the true residual once to guard against drift
    true = op.norm(op.apply(x) - b) / np.where(bn > 0, bn, 1.0)
    if true.max() > 10 * tol:
        raise NoConvergence(f"true residual {true.max():.2e} above tolerance", history)
    return x[0] if single else x


# ---------------------------------------------------------------- Burnett functions

@dataclass(frozen=True, eq=False)
class BurnettFunctions:
    A: np.ndarray
    A_bar: np.ndarray
    B: np.ndarray
    B_bar: np.ndarray
    pairs: tuple = PAIRS

    def B_component(self, i, j):
        k = self.pairs.index(tuple(sorted((i, j))))
        return self.B[k]

    def B_bar_component(self, i, j):
        k = self.pairs.index(tuple(sorted((i, j))))
        return self.B_bar[k]


def burnett_sources(op):
    v = op.velocities
    T = op.maxwellian.T
    ms = op.sqrt_mu
    v2 = np.sum(v * v, axis=1)
    abar = v.T * (v2 - 5 * T) * ms
    bbar = np.array([(v[:, i] * v[:, j] - (v2 / 3 if i == j else 0)) * ms
                     for i, j in PAIRS])
    # orthogonal in the continuum; remove the quadrature-level null component
    return abar - op.project(abar), bbar - op.project(bbar)


def burnett_functions(op, tol=1e-11):
    if "burnett" in op._cache and op._cache["burnett"][0] <= tol:
        return op._cache["burnett"][1]
    abar, bbar = burnett_sources(op)
    sol = quasi_inverse(op, np.vstack([abar, bbar]), tol=tol)
    out = BurnettFunctions(sol[:3], abar, sol[3:], bbar)
    op._cache["burnett"] = (tol, out)
    return out


@dataclass(frozen=True)
class TransportCoefficients:
    kappa: float
    sigma: float
    lam: float
    temperature_at: float
    isotropy_defect: float


def transport_coefficients(burnett, op, isotropy_threshold=1e-8):
    w = op.weights
    v2 = np.sum(op.velocities ** 2, axis=1)
    T = op.maxwellian.T
    kap = (burnett.A * w) @ burnett.A_bar.T
    sig = (burnett.A * w * (v2 - 5 * T)) @ burnett.A_bar.T
    lams = [np.sum(w * burnett.B[k] * burnett.B_bar[k]) / T for k in OFF_DIAGONAL]
    kappa = np.trace(kap) / 3
    sigma = np.trace(sig) / 3
    lam = float(np.mean(lams))

    def off(m):
        return np.max(np.abs(m - np.diag(np.diag(m)))) / abs(np.mean(np.diag(m)))

    defect = max(off(kap), off(sig),
                 np.ptp(np.diag(kap)) / abs(kappa), np.ptp(lams) / abs(lam))
    if defect > isotropy_threshold:
        raise IsotropyDefect(f"isotropy defect {defect:.2e} above {isotropy_threshold:.1e}")
    return TransportCoefficients(float(kappa), float(sigma), lam, T, float(defect))


# ---------------------------------------------------------------- nonlinear term

def collision_term(op, F, G=None, threads=1):
    """Q*(F, G) at the physical nodes for arbitrary node values F, G."""
    fsm = op.collision(threads)
    return op.maxwellian.T ** 2 * fsm(F, G)


def gamma_bilinear(op, f, g=None, threads=1, conservative=True):
    """Gamma[f, g] = mu^{-1/2} Q*[mu^{1/2} f, mu^{1/2} g].

    The spectral evaluation is exact only up to its resolution; with
    ``conservative`` the null-space component is removed afterwards.
    """
    ms = op.sqrt_mu
    q = collision_term(op, ms * f, None if g is None else ms * g, threads)
    out = q / ms
    if conservative:
        out = out - op.project(out)
    return out


# ---------------------------------------------------------------- decomposition

@dataclass(frozen=True)
class HydroDecomposition:
    p: float
    b: np.ndarray
    c: float
    d: np.ndarray
    orthogonal_part: np.ndarray


def decompose(op, burnett, f):
    f = np.asarray(f, dtype=float)
    coef, _ = _hydro_coefficients(op, f, 5.0)
    rest = f - op.project(f)
    M = (burnett.A_bar * op.weights) @ burnett.A.T
    d = np.linalg.solve(M, (burnett.A_bar * op.weights) @ rest)
    ortho = rest - d @ burnett.A
    return HydroDecomposition(float(coef[0]), coef[1:4].copy(), float(coef[4]), d, ortho)


def moment_identities(grid, maxwellian):
    v = physical_nodes(grid, maxwellian)
    w = physical_weights(grid, maxwellian)
    mu = maxwellian(v)
    v2 = np.sum(v * v, axis=1)
    P, T = maxwellian.P, maxwellian.T
    second = float(np.sum(w * mu * v2))
    heat = float(np.sum(w * mu * v2 * (v2 - 5 * T) ** 2))
    return {
        "second_moment": second, "second_target": 3 * P,
        "second_rel_error": abs(second / (3 * P) - 1),
        "heat_moment": heat, "heat_target": 30 * P * T * T,
        "heat_rel_error": abs(heat / (30 * P * T * T) - 1),
    }


# ---------------------------------------------------------------- ghost stress

def stress_constants(op, burnett=None, threads=1):
    """Kinetic constants of the second-order stress.

    Returns lam, K1, K2 such that the traceless part of the second moment of
    the second-order correction equals rho (u u) - tau1 - tau2 (traceless parts),
    plus two defects measuring identities that make that reduction exact: the
    cancellation of the u * grad T cross term and the convection coefficient.
    """
    burnett = burnett or burnett_functions(op)
    T, P, rho = op.maxwellian.T, op.maxwellian.P, op.maxwellian.rho
    w = op.weights
    v = op.velocities
    ms = op.sqrt_mu
    v2 = np.sum(v * v, axis=1)
    B12 = burnett.B_component(0, 1)
    lam = np.sum(w * B12 * burnett.B_bar_component(0, 1)) / T
    a = np.sum(w * B12 * v[:, 0] * burnett.A[1])
    # d/dT (mu^{1/2} A) at fixed v, via the exact scaling X_T(v) = T^{-1/2} X_1(v / sqrt T)
    # d/dT (mu^{1/2} A) at fixed v through the exact scaling
    # mu^{1/2} A_T (v) = T^{-1/2} X(v / sqrt T), X the reference profile
    s = op.grid.nodes
    At = burnett.A[1] * (T ** -0.25 * np.sqrt(rho))
    radial = np.sum(s.T * op.grid.gradient(At), axis=0)
    b = -0.5 * rho ** -0.5 * T ** -0.75 * np.sum(w * B12 * v[:, 0] * (
        At * (1 - 0.5 * np.sum(s * s, axis=1)) + radial))
    c = np.sum(w * B12 * gamma_bilinear(op, burnett.A[0], burnett.A[1], threads))
    d = np.sum(w * B12 * v[:, 0] * v[:, 1] * (v2 - 5 * T) * ms) / (2 * T * T)
    e = np.sum(w * B12 * gamma_bilinear(op, burnett.A[0], ms * v[:, 1], threads))
    f = np.sum(w * B12 * gamma_bilinear(op, ms * v[:, 0], ms * v[:, 1], threads))
    k1 = -a / T ** 2
    k2 = -(b / T ** 2 - 2 * a / T ** 3 + c / (2 * T ** 4))
    return {
        "lam": float(lam),
        "K1": float(k1 * P / lam ** 2),
        "K2": float(k2 * P / lam ** 2),
        "cross_defect": float(abs(lam * T * T - d * T * T - e) / abs(lam * T * T)),
        "convection_defect": float(abs(f - rho * T * T / 2) / (rho * T * T / 2)),
        "raw": {"a": float(a), "b": float(b), "c": float(c), "d": float(d),
                "e": float(e), "f": float(f)},
    }


# ---------------------------------------------------------------- serialization

OPERATOR_FORMAT = "ghostkin-operator/1"


def save_operator(op, stem):
    """Write ``stem.npz`` (arrays) and ``stem.csv`` (key,value metadata).

    The CSV carries the grid parameters, the Maxwellian, q0 and the SHA-256
    of the array file, so a reader can rebuild the grid and check the pair.
    """
    import csv
    import hashlib

    npz = f"{stem}.npz"
    with open(npz, "wb") as fh:
        np.savez(fh, nodes=op.grid.nodes, weights=op.grid.weights, nu=op.nu,
                 ref_matrix=op.ref_matrix, null_ref=op.null_ref,
                 consistency_residual=op.consistency_residual)
    with open(npz, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    meta = [("format", OPERATOR_FORMAT), ("n_axis", op.grid.n_axis),
            ("cutoff_radius", repr(op.grid.cutoff_radius)), ("size", op.grid.size),
            ("P", repr(float(op.maxwellian.P))), ("T", repr(float(op.maxwellian.T))),
            ("q0", repr(op.q0)), ("scale", repr(op.scale)), ("arrays_sha256", digest)]
    with open(f"{stem}.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["key", "value"])
        wr.writerows(meta)
    return npz, f"{stem}.csv"


def load_operator(stem):
    """Inverse of ``save_operator``; raises ValueError on any mismatch."""
    import csv
    import hashlib

    with open(f"{stem}.csv", newline="") as fh:
        meta = {r["key"]: r["value"] for r in csv.DictReader(fh)}
    if meta.get("format") != OPERATOR_FORMAT:
        raise ValueError(f"unsupported operator format {meta.get('format')!r}")
    with open(f"{stem}.npz", "rb") as fh:
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != meta["arrays_sha256"]:
        raise ValueError("array file does not match its metadata checksum")
    with open(f"{stem}.npz", "rb") as fh:
        arr = dict(np.load(fh))
    grid = build_grid(int(meta["n_axis"]), float(meta["cutoff_radius"]))
    if grid.size != len(arr["nodes"]) or not np.array_equal(grid.nodes, arr["nodes"]):
        raise ValueError("stored nodes do not match the rebuilt grid")
    mx = LocalMaxwellian(float(meta["P"]), float(meta["T"]))
    return LinearizedOperator(grid, mx, float(meta["q0"]), arr["nu"], arr["ref_matrix"],
                              float(meta["scale"]), arr["null_ref"],
                              arr["consistency_residual"])
