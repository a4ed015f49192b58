"""Fast spectral evaluation of the hard-sphere collision integral on a velocity grid.

The symmetrized operator is written in Carleman form

    Q(F, G)(v) = 2 q0 ∫∫ δ(z·w) [F(v+w) G(v+z) - F(v+z+w) G(v)] dz dw,

periodized on a padded box and truncated to |z|, |w| <= 2S, where S is the
support radius of the grid. Each direction e of a spherical rule contributes a
product of two Fourier multipliers, so one evaluation costs a few FFTs per
direction.
"""

import numpy as np
import scipy.fft as sfft
from scipy.integrate import lebedev_rule
from scipy.special import j1


def _half_sphere(order):
    e, w = lebedev_rule(order)
    e = e.T
    tol = 1e-12
    upper = e[:, 2] > tol
    eq = np.abs(e[:, 2]) <= tol
    eq_keep = eq & ((e[:, 1] > tol) | ((np.abs(e[:, 1]) <= tol) & (e[:, 0] > 0)))
    keep = upper | eq_keep
    return e[keep], 2.0 * w[keep]


class SpectralCollision:
    """Bilinear collision operator Q* on the nodes of a reference grid (T = 1).

    Inputs and outputs are node-value arrays aligned with ``grid.nodes``.
    For a grid scaled to temperature T, multiply the result by T**2.
    """

    def __init__(self, grid, q0=1.0, angular_order=17, threads=1):
        self.grid = grid
        self.q0 = float(q0)
        self.threads = int(threads)
        h, R, N = grid.spacing, grid.cutoff_radius, grid.n_axis
        support = R
        half_box = 0.5 * (3.0 + np.sqrt(2.0)) * support
        pad = int(np.ceil((half_box - R) / h))
        pad = max(pad, 0)
        self.pad = pad
        self.NF = N + 2 * pad
        xi = 2.0 * np.pi / (self.NF * h)
        Rc = 2.0 * support
        k = sfft.fftfreq(self.NF, 1.0 / self.NF)
        kr = sfft.rfftfreq(self.NF, 1.0 / self.NF)
        K = np.stack(np.meshgrid(k, k, kr, indexing="ij"), axis=-1)

        def phi(s):
            a = xi * s
            out = np.full(a.shape, 0.5 * Rc ** 2)
            m = np.abs(a) > 1e-9
            am = a[m]
            out[m] = Rc * np.sin(Rc * am) / am + (np.cos(Rc * am) - 1.0) / am ** 2
            return out

        def psi(t):
            a = xi * t
            out = np.full(a.shape, np.pi * Rc ** 2)
            m = a > 1e-9
            out[m] = 2.0 * np.pi * Rc * j1(Rc * a[m]) / a[m]
            return out

        dirs, wts = _half_sphere(angular_order)
        self.weights = wts
        self.phi = np.empty((len(dirs),) + K.shape[:-1])
        self.psi = np.empty_like(self.phi)
        for n, e in enumerate(dirs):
            par = K @ e
            perp = np.linalg.norm(K - par[..., None] * e, axis=-1)
            self.phi[n] = phi(par)
            self.psi[n] = psi(perp)

        # loss multiplier depends on |l| only; tabulate with a fine rule
        e2, w2 = lebedev_rule(131)
        e2 = e2.T
        kk = np.linalg.norm(K, axis=-1)
        radii = np.unique(np.round(kk, 10))
        vals = np.empty_like(radii)
        for i, r in enumerate(radii):
            par = e2[:, 2] * r
            perp = np.sqrt(np.maximum(r * r - par * par, 0.0))
            vals[i] = np.sum(w2 * phi(par) * psi(perp))
        self.loss = 2.0 * self.q0 * np.interp(kk, radii, vals)

        # scatter map from ball nodes to the padded cube
        self._index = tuple((grid.index + pad).T)

    def _embed(self, f):
        box = np.zeros((self.NF,) * 3)
        box[self._index] = f
        return box

    def _fwd(self, f):
        return sfft.rfftn(self._embed(f), workers=self.threads)

    def _inv(self, fh):
        return sfft.irfftn(fh, s=(self.NF,) * 3, workers=self.threads)

    def __call__(self, F, G=None):
        """Return Q*(F, G) at the grid nodes; Q*(F, F) when G is omitted."""
        same = G is None
        Fh = self._fwd(F)
        Gh = Fh if same else self._fwd(G)
        gain = np.zeros((self.NF,) * 3)
        for w, ph, ps in zip(self.weights, self.phi, self.psi):
            if same:
                gain += w * self._inv(ph * Fh) * self._inv(ps * Fh)
            else:
                gain += 0.5 * w * (self._inv(ph * Gh) * self._inv(ps * Fh)
                                   + self._inv(ph * Fh) * self._inv(ps * Gh))
        gain *= 2.0 * self.q0
        if same:
            loss = self._inv(self.loss * Fh) * self._embed(F)
        else:
            loss = 0.5 * (self._inv(self.loss * Fh) * self._embed(G)
                          + self._inv(self.loss * Gh) * self._embed(F))
        return (gain - loss)[self._index]

    def pairs(self, Fs, Gs=None):
        """Table Q*(F_i, G_j) of shape (len(Fs), len(Gs), n) for rows of Fs and Gs.

        Costs a few FFTs per row and direction instead of per pair, which is
        what makes low-rank pointwise evaluation affordable.
        """
        Fs = np.atleast_2d(np.asarray(Fs, dtype=float))
        Gs = Fs if Gs is None else np.atleast_2d(np.asarray(Gs, dtype=float))
        shape = (self.NF,) * 3
        axes = (-3, -2, -1)

        def fwd(rows):
            box = np.zeros((len(rows),) + shape)
            box[(slice(None),) + self._index] = rows
            return sfft.rfftn(box, axes=axes, workers=self.threads)

        def inv(mult, hat):
            out = sfft.irfftn(mult * hat, s=shape, axes=axes, workers=self.threads)
            return out[(slice(None),) + self._index]

        Fh, Gh = fwd(Fs), fwd(Gs)
        gain = np.zeros((len(Fs), len(Gs), Fs.shape[1]))
        for w, ph, ps in zip(self.weights, self.phi, self.psi):
            aF, bF = inv(ph, Fh), inv(ps, Fh)
            aG, bG = inv(ph, Gh), inv(ps, Gh)
            gain += 0.5 * w * (bF[:, None, :] * aG[None] + aF[:, None, :] * bG[None])
        gain *= 2.0 * self.q0
        lF, lG = inv(self.loss, Fh), inv(self.loss, Gh)
        loss = 0.5 * (lF[:, None, :] * Gs[None] + Fs[:, None, :] * lG[None])
        return gain - loss
