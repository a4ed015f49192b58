"""Manufactured solutions for the slab fluid solver.

Fields are sums of separable terms c * f(a x) * g(b z) with f, g in {sin, cos},
so every derivative is exact.
"""

import numpy as np

from ghostkin.ghost_fluid import GhostOptions, WallProfile, _Fourier

_D = {"sin": ("cos", 1.0), "cos": ("sin", -1.0)}
_F = {"sin": np.sin, "cos": np.cos}


class Trig:
    def __init__(self, terms, const=0.0):
        self.terms = [tuple(t) for t in terms]  # (c, fx, a, fz, b)
        self.const = const

    def __call__(self, x, z):
        out = np.full(np.broadcast(x, z).shape, float(self.const))
        for c, fx, a, fz, b in self.terms:
            out = out + c * _F[fx](a * x) * _F[fz](b * z)
        return out

    def dx(self):
        return Trig([(c * s * a, g, a, fz, b) for c, fx, a, fz, b in self.terms
                     for g, s in [_D[fx]]])

    def dz(self):
        return Trig([(c * s * b, fx, a, g, b) for c, fx, a, fz, b in self.terms
                     for g, s in [_D[fz]]])


def _derivs(f, order):
    """Dictionary keyed by strings like 'x', 'xz', 'zzz'."""
    out = {"": f}
    frontier = [""]
    for _ in range(order):
        nxt = []
        for key in frontier:
            for ax in "xz":
                k = "".join(sorted(key + ax))
                if k not in out:
                    out[k] = out[key].dx() if ax == "x" else out[key].dz()
                    nxt.append(k)
        frontier = nxt
    return out


class Manufactured:
    """Exact (T, u_x, u_z, p) and the forcing that makes them a discrete-limit solution."""

    def __init__(self, coeffs, amp=0.1, flow=0.2):
        tw = 2 * np.pi
        pi = np.pi
        self.coeffs = coeffs
        self.T = Trig([(amp, "sin", tw, "cos", pi), (0.05, "cos", 0.0, "sin", pi / 2)],
                      const=1.0)
        self.ux = Trig([(flow, "cos", tw, "cos", pi), (0.5 * flow, "sin", tw, "sin", pi)])
        self.uz = Trig([(flow, "sin", tw, "sin", pi)])
        self.p = Trig([(0.3 * flow, "cos", tw, "sin", pi)])
        self.walls = WallProfile(_Fourier(1.0, ((1, 0.0, amp),)),
                                 _Fourier(1.05, ((1, 0.0, -amp),)), "manufactured")

    def fields(self, x, z):
        return (_derivs(self.T, 3), _derivs(self.ux, 2), _derivs(self.uz, 2),
                _derivs(self.p, 1))

    def residuals(self, x, z):
        co = self.coeffs
        P = co.P
        T3, U, W, Pd = self.fields(x, z)
        T = T3[""](x, z)
        t = {k: f(x, z) for k, f in T3.items()}
        u = {k: f(x, z) for k, f in U.items()}
        w = {k: f(x, z) for k, f in W.items()}
        rho = P / T
        div = u["x"] + w["z"]
        div_x = u["xx"] + w["xz"]
        div_z = u["xz"] + w["zz"]
        grad_T2 = t["x"] ** 2 + t["z"] ** 2
        lap_T = t["xx"] + t["zz"]

        energy = 0.5 * co.kappa0 * (np.sqrt(T) * lap_T + 0.5 * grad_T2 / np.sqrt(T)) - 5 * P * div
        continuity = rho * div - P / T ** 2 * (u[""] * t["x"] + w[""] * t["z"])

        lam = co.lam(T)
        lx, lz = 0.5 * co.lambda0 / np.sqrt(T) * t["x"], 0.5 * co.lambda0 / np.sqrt(T) * t["z"]
        visc_x = (lam * (u["xx"] + u["zz"] + div_x / 3)
                  + lx * 2 * u["x"] + lz * (u["z"] + w["x"]) - 2 / 3 * lx * div)
        visc_z = (lam * (w["xx"] + w["zz"] + div_z / 3)
                  + lx * (u["z"] + w["x"]) + lz * 2 * w["z"] - 2 / 3 * lz * div)

        m = co.lambda0 ** 2 * T / P
        K1 = co.K1
        K2 = co.K2_at(T)
        K2p = co.K2 * co.k2_power * T ** (co.k2_power - 1)
        grad = {"x": t["x"], "z": t["z"]}
        hess = {"xx": t["xx"], "xz": t["xz"], "zx": t["xz"], "zz": t["zz"]}
        third = {"x": t["xxx"] + t["xzz"], "z": t["xxz"] + t["zzz"]}

        def tau2_div(i):
            s = 0.0
            for j in "xz":
                s = s + co.lambda0 ** 2 / P * grad[j] * (K1 * hess[i + j] + K2 * grad[i] * grad[j])
                s = s + m * (K2p * grad[j] * grad[i] * grad[j] + K2 * hess[i + j] * grad[j])
            s = s + m * (K1 * third[i] + K2 * grad[i] * lap_T)
            return s

        conv_x = rho * (u[""] * u["x"] + w[""] * u["z"])
        conv_z = rho * (u[""] * w["x"] + w[""] * w["z"])
        mom_x = conv_x + Pd["x"](x, z) - visc_x - tau2_div("x")
        mom_z = conv_z + Pd["z"](x, z) - visc_z - tau2_div("z")
        return {"energy": energy, "continuity": continuity,
                "momentum_x": mom_x, "momentum_z": mom_z}

    def options(self, **kw):
        co = self.coeffs
        L = 1.0

        def pick(key):
            return lambda x, z: self.residuals(x, z)[key]

        def slip(wall):
            z = float(wall)

            def f(x):
                Tw = self.walls.temperature(wall, x, L)
                return self.ux(x, z) - co.beta0(Tw) * self.walls.slope(wall, x, L)
            return f

        forcing = {k: pick(k) for k in ("energy", "continuity", "momentum_x", "momentum_z")}
        forcing["slip_bottom"] = slip(0)
        forcing["slip_top"] = slip(1)
        return GhostOptions(forcing=forcing, **kw)

    def errors(self, state):
        d = state.domain
        Xc, Zc = np.meshgrid(d.xc, d.zc, indexing="ij")
        Xx, Zx = np.meshgrid(d.xf, d.zc, indexing="ij")
        Xz, Zz = np.meshgrid(d.xc, d.zf, indexing="ij")
        return {
            "T": d.norm(state.T - self.T(Xc, Zc)),
            "ux": d.norm(state.ux - self.ux(Xx, Zx)),
            "uz": d.norm(state.uz - self.uz(Xz, Zz)),
            "p": d.norm(state.p_frak - self.p(Xc, Zc)),
        }
