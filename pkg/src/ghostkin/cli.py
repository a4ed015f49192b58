"""Command-line driver.

    ghostkin KIND [--config FILE] [--out DIR] [--seed N] [--threads N]
                  [--set SECTION.KEY=VALUE ...] [--epsilon E] [--eps-sweep E1,E2,...]

KIND is one of coeffs, milne, creep, fluid, expand, sweep. Every run writes
its CSV tables and a JSON manifest (``manifest.json``) into the output
directory. Exit status: 0 when every hard audit passes, 2 when one fails,
1 on an execution error.
"""

import argparse
import csv
import difflib
import hashlib
import io
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import ConfigError, GhostkinError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

KINDS = ("coeffs", "milne", "creep", "fluid", "expand", "sweep")
MANIFEST_SCHEMA = "ghostkin-manifest/1"
WALL_LIBRARY = ("uniform", "single-harmonic", "two-wall-contrast")

# section -> key -> default; None marks an optional value
DEFAULTS = {
    "grid": {"n_axis": 16, "radius": 7.5, "nx": 32, "nz": 32, "L_mfp": 20.0},
    "physics": {"P": 1.0, "q0": 1.0, "T": [1.0], "kappa": None, "lambda": None,
                "K1": None, "K2": None, "walls": "single-harmonic", "delta": 0.05,
                "wall_file": None},
    "solver": {"tol": 1e-8, "update_tol": 1e-11, "iter_tol": 1e-10, "max_picard": 200},
    "milne": {"T_w": 1.0, "theta": 0.0, "gradient": [1.0, 0.0], "normal_gradient": 0.0},
    "expansion": {"alpha": 1.0, "epsilon": 0.1, "eps_sweep": [], "r": 6.0},
    "sweep": {"deltas": [0.08, 0.04, 0.02]},
    "run": {"seed": 0, "threads": 1, "out": "ghostkin-out"},
}
INT_KEYS = {"grid.n_axis", "grid.nx", "grid.nz", "solver.max_picard", "run.seed",
            "run.threads"}
LIST_KEYS = {"physics.T", "milne.gradient", "expansion.eps_sweep", "sweep.deltas"}
STR_KEYS = {"physics.walls", "physics.wall_file", "run.out"}


# ---------------------------------------------------------------- configuration

def _all_keys():
    return [f"{s}.{k}" for s, sec in DEFAULTS.items() for k in sec]


def _suggest(name):
    keys = _all_keys()
    short = {k.split(".", 1)[1]: k for k in keys}
    hit = difflib.get_close_matches(name, keys, n=1, cutoff=0.5)
    if not hit:
        hit = [short[h] for h in difflib.get_close_matches(name.split(".")[-1], list(short),
                                                            n=1, cutoff=0.5)]
    return f"; did you mean '{hit[0]}'?" if hit else ""


def _resolve_key(name):
    """Map 'section.key' or a bare unique 'key' to 'section.key'."""
    if "." in name:
        sec, key = name.split(".", 1)
        if sec in DEFAULTS and key in DEFAULTS[sec]:
            return name
        raise ConfigError(f"unknown key '{name}'{_suggest(name)}")
    owners = [s for s, sec in DEFAULTS.items() if name in sec]
    if len(owners) == 1:
        return f"{owners[0]}.{name}"
    raise ConfigError(f"unknown key '{name}'{_suggest(name)}")


def _flatten(table, prefix=""):
    out = {}
    for k, v in table.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict):
            if prefix or k not in DEFAULTS:
                raise ConfigError(f"unknown section '{path}'{_suggest(path)}")
            out.update(_flatten(v, path + "."))
        else:
            out[path] = v
    return out


def _coerce(path, value):
    if value is None:
        return None
    if path in LIST_KEYS:
        if isinstance(value, (int, float)):
            value = [value]
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{path}: expected a list of numbers, got {value!r}")
        return [float(v) for v in value]
    if path in STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if path in INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_config(path=None, overrides=None, kind=None):
    """Validated configuration as a nested dict with defaults applied.

    ``overrides`` maps dotted (or bare, when unique) keys to values and wins
    over the file.
    """
    cfg = {s: dict(sec) for s, sec in DEFAULTS.items()}
    raw = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file '{path}' does not exist")
        with open(path, "rb") as fh:
            try:
                table = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        file_kind = table.pop("kind", None)
        if file_kind is not None:
            if kind is not None and file_kind != kind:
                raise ConfigError(f"config kind '{file_kind}' does not match subcommand '{kind}'")
            kind = file_kind
        raw.update(_flatten(table))
    raw.update(overrides or {})
    for name, value in raw.items():
        full = _resolve_key(name)
        sec, key = full.split(".", 1)
        cfg[sec][key] = _coerce(full, value)
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {', '.join(KINDS)}; got {kind!r}")
    cfg["kind"] = kind
    _validate(cfg)
    return cfg


def _validate(cfg):
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    g, ph, so, mi, ex, sw, run = (cfg[k] for k in
                                  ("grid", "physics", "solver", "milne", "expansion",
                                   "sweep", "run"))
    for key in ("tol", "update_tol", "iter_tol"):
        need(so[key] > 0, f"solver.{key} must be positive")
    need(so["max_picard"] >= 1, "solver.max_picard must be at least 1")
    need(g["n_axis"] >= 8 and g["n_axis"] % 2 == 0, "grid.n_axis must be an even integer >= 8")
    need(g["radius"] > 0, "grid.radius must be positive")
    need(g["L_mfp"] > 0, "grid.L_mfp must be positive")
    need(g["nx"] >= 8 and g["nz"] >= 8, "grid.nx and grid.nz must be at least 8")
    need(ph["P"] > 0 and ph["q0"] > 0, "physics.P and physics.q0 must be positive")
    need(len(ph["T"]) >= 1 and all(t > 0 for t in ph["T"]), "physics.T entries must be positive")
    for key in ("kappa", "lambda"):
        need(ph[key] is None or ph[key] > 0, f"physics.{key} must be positive")
    need(ph["walls"] in WALL_LIBRARY or ph["walls"] == "file",
         f"physics.walls must be one of {', '.join(WALL_LIBRARY)} or 'file'")
    if ph["walls"] == "file" or ph["wall_file"] is not None:
        need(ph["wall_file"] is not None, "physics.wall_file is required with walls = 'file'")
        need(os.path.isfile(ph["wall_file"]), f"physics.wall_file '{ph['wall_file']}' does not exist")
        ph["walls"] = "file"
    need(ph["delta"] >= 0, "physics.delta must be non-negative")
    need(mi["T_w"] > 0, "milne.T_w must be positive")
    need(mi["theta"] >= 0, "milne.theta must be non-negative")
    need(len(mi["gradient"]) == 2, "milne.gradient must have two tangential components")
    need(0 < ex["epsilon"] < 1, "expansion.epsilon must lie in (0, 1)")
    need(ex["alpha"] >= 1, "expansion.alpha must be at least 1")
    need(2 <= ex["r"] <= 6, "expansion.r must lie in [2, 6]")
    need(all(0 < e < 1 for e in ex["eps_sweep"]), "expansion.eps_sweep values must lie in (0, 1)")
    if ex["eps_sweep"]:
        e = sorted(ex["eps_sweep"])
        need(len(e) >= 4 and e[-1] / e[0] >= 8 - 1e-9,
             "expansion.eps_sweep needs at least four values spanning close to a decade")
    need(len(sw["deltas"]) >= 3 and all(d > 0 for d in sw["deltas"]),
         "sweep.deltas needs at least three positive values")
    need(run["threads"] >= 1, "run.threads must be at least 1")


# ---------------------------------------------------------------- output helpers

def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


class Run:
    def __init__(self, cfg):
        self.cfg = cfg
        self.out = cfg["run"]["out"]
        self.tables = {}
        self.metrics = {}
        self.audits = []
        self.timings = {}

    def table(self, name, header, rows):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(header)
        clean = []
        for r in rows:
            cells = [_fmt(v) for v in r]
            wr.writerow(cells)
            clean.append([_json_num(v) for v in r])
        data = buf.getvalue().encode()
        with open(os.path.join(self.out, name), "wb") as fh:
            fh.write(data)
        self.tables[name] = {"columns": list(header), "rows": clean,
                             "sha256": hashlib.sha256(data).hexdigest()}

    def audit(self, name, value, threshold, passed, hard=True):
        self.audits.append({"name": name, "value": _json_num(value),
                            "threshold": _json_num(threshold),
                            "passed": bool(passed), "hard": bool(hard)})

    def timed(self, label):
        run = self

        class _T:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[label] = round(time.perf_counter() - self.t, 3)
        return _T()

    @property
    def failed(self):
        return any(a["hard"] and not a["passed"] for a in self.audits)

    def manifest(self, status):
        return {
            "schema": MANIFEST_SCHEMA,
            "version": __version__,
            "kind": self.cfg["kind"],
            "config": {k: v for k, v in self.cfg.items()},
            "status": status,
            "timings": self.timings,
            "metrics": self.metrics,
            "audits": self.audits,
            "artifacts": self.tables,
        }


def _json_num(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, str) or v is None:
        return v
    if isinstance(v, (list, tuple)):
        return [_json_num(x) for x in v]
    v = float(v)
    return None if math.isnan(v) or math.isinf(v) else v


# ---------------------------------------------------------------- experiments

def _reference_grid(cfg):
    from .velocity_kinetics import build_grid
    return build_grid(cfg["grid"]["n_axis"], cfg["grid"]["radius"])


def run_coeffs(run):
    from .velocity_kinetics import (LocalMaxwellian, assemble_operator, burnett_functions,
                                    transport_coefficients)
    cfg = run.cfg
    P, q0 = cfg["physics"]["P"], cfg["physics"]["q0"]
    grid = _reference_grid(cfg)
    rng = np.random.default_rng(cfg["run"]["seed"])
    rows = []
    for T in cfg["physics"]["T"]:
        with run.timed(f"operator_T{T!r}"):
            op = assemble_operator(grid, LocalMaxwellian(P, T), q0)
            tc = transport_coefficients(burnett_functions(op), op)
        rows.append((T, P, q0, tc.kappa, tc.sigma, tc.lam, tc.isotropy_defect))
        tag = f"T={T!r}"
        res = op.null_residual()
        f = rng.standard_normal((20, grid.size))
        g = rng.standard_normal((20, grid.size))
        sym = max(abs(op.inner(a, op.apply(b)) - op.inner(op.apply(a), b))
                  / (op.norm(a) * op.norm(b)) for a, b in zip(f, g))
        run.metrics[tag] = {"kappa": tc.kappa, "sigma": tc.sigma, "lambda": tc.lam,
                            "isotropy_defect": tc.isotropy_defect,
                            "invariant_residual": float(res), "symmetry_defect": float(sym)}
        run.audit(f"isotropy[{tag}]", tc.isotropy_defect, 1e-8, tc.isotropy_defect <= 1e-8)
        run.audit(f"positivity[{tag}]", min(tc.kappa, tc.lam), 0.0, tc.kappa > 0 and tc.lam > 0)
        run.audit(f"self_adjoint[{tag}]", sym, 1e-12, sym <= 1e-12)
        run.audit(f"invariant_residual[{tag}]", res, 1e-3, res <= 1e-3, hard=False)
    run.table("coeffs.csv", ["T", "P", "q0", "kappa", "sigma", "lambda", "isotropy_defect"], rows)


def _milne_setup(cfg):
    from .milne import build_milne_grid
    from .velocity_kinetics import LocalMaxwellian, assemble_operator, burnett_functions
    mi, ph = cfg["milne"], cfg["physics"]
    grid = _reference_grid(cfg)
    op = assemble_operator(grid, LocalMaxwellian(ph["P"], mi["T_w"]), ph["q0"])
    mgrid = build_milne_grid(grid, cfg["grid"]["L_mfp"], T_w=mi["T_w"], P=ph["P"], q0=ph["q0"])
    return op, burnett_functions(op), mgrid


def run_milne(run):
    from .milne import MilneProblemSpec, layer_data, solve_milne
    cfg = run.cfg
    mi, ph = cfg["milne"], cfg["physics"]
    op, burnett, mgrid = _milne_setup(cfg)
    grad = np.array([mi["normal_gradient"], *mi["gradient"]])
    spec = MilneProblemSpec(layer_data(op, grad, burnett), mi["T_w"], ph["P"], ph["q0"],
                            "zero-mass-flux", mi["theta"])
    with run.timed("solve"):
        sol = solve_milne(mgrid, spec, iter_tol=cfg["solver"]["iter_tol"], operator=op)
    v = op.velocities
    prof = [(e, v[i, 0], v[i, 1], v[i, 2], sol.G[j, i])
            for j, e in enumerate(mgrid.eta) for i in range(len(v))]
    run.table("milne_profile.csv", ["eta", "v_eta", "v_phi", "v_psi", "G"], prof)
    gnorm = float(np.sqrt(np.trapezoid(np.sum(op.weights * sol.G ** 2, axis=1), mgrid.eta)))
    lim = sol.limit if sol.limit is not None else (np.nan,) * 5
    k0 = sol.decay_rate if sol.decay_rate is not None else np.nan
    gt = mi["gradient"][0]
    beta0 = lim[2] * mi["T_w"] / gt if gt != 0 and sol.limit is not None else np.nan
    summary = (mgrid.L, mi["theta"], lim[0], lim[2], lim[3], lim[4], k0, sol.flux_drift(), beta0)
    run.table("milne_summary.csv", ["L", "theta", "p_inf", "b_inf_phi", "b_inf_psi", "c_inf",
                                    "K0", "flux_drift", "beta0"], [summary])
    run.metrics.update({"G_norm": gnorm, "flux_drift": sol.flux_drift(), "K0": _json_num(k0),
                        "iterations": len(sol.iteration_log)})
    run.audit("flux_drift", sol.flux_drift(), 1e-8 * gnorm, sol.flux_drift() <= 1e-8 * max(gnorm, 1e-300))
    if gnorm > 0:
        run.audit("decay_rate_positive", k0, 0.0, bool(k0 > 0))
    if mi["theta"] > 0:
        plateau = float(np.abs(sol.G[:, np.abs(v[:, 0]) <= mi["theta"]]).max(initial=0.0))
        run.audit("cutoff_plateau", plateau, 0.0, plateau == 0.0)


def run_creep(run):
    from .milne import build_milne_grid, thermal_creep_layer
    from .velocity_kinetics import LocalMaxwellian, assemble_operator, burnett_functions
    cfg = run.cfg
    ph, mi = cfg["physics"], cfg["milne"]
    grid = _reference_grid(cfg)
    rows = []
    for T in ph["T"]:
        op = assemble_operator(grid, LocalMaxwellian(ph["P"], T), ph["q0"])
        mgrid = build_milne_grid(grid, cfg["grid"]["L_mfp"], T_w=T, P=ph["P"], q0=ph["q0"])
        with run.timed(f"creep_T{T!r}"):
            res = thermal_creep_layer(mgrid, T, mi["gradient"], ph["P"], ph["q0"],
                                      burnett_functions(op), mi["normal_gradient"],
                                      cfg["solver"]["iter_tol"], op)
        beta0 = res.beta0 if res.beta0 is not None else np.nan
        rows.append((T, ph["P"], ph["q0"], beta0, res.u_B[1], res.u_B[2], res.T_B, res.rho_B,
                     res.solution.flux_drift()))
    run.table("creep.csv", ["T_w", "P", "q0", "beta0", "u_B_phi", "u_B_psi", "T_B", "rho_B",
                            "flux_drift"], rows)
    # slip coefficient scales like sqrt(T_w) / P
    scaled = [r[3] * ph["P"] / math.sqrt(r[0]) for r in rows if not math.isnan(r[3])]
    if len(scaled) > 1:
        spread = (max(scaled) - min(scaled)) / abs(np.mean(scaled))
        run.metrics["beta0_scaling_spread"] = spread
        run.audit("beta0_sqrtT_scaling", spread, 1e-6, spread <= 1e-6)
    for r in rows:
        run.audit(f"flux_drift[T_w={r[0]!r}]", r[8], 1e-8, r[8] <= 1e-8)


def _walls(cfg):
    from .ghost_fluid import WallProfile
    ph = cfg["physics"]
    if ph["walls"] == "file":
        data = np.genfromtxt(ph["wall_file"], delimiter=",", names=True)
        if data.dtype.names is None or not {"T_bottom", "T_top"} <= set(data.dtype.names):
            raise ConfigError(f"{ph['wall_file']}: need columns T_bottom,T_top")
        return WallProfile.from_samples(np.atleast_1d(data["T_bottom"]),
                                        np.atleast_1d(data["T_top"]))
    if ph["walls"] == "uniform":
        return WallProfile.uniform()
    if ph["walls"] == "two-wall-contrast":
        return WallProfile.two_wall_contrast()
    return WallProfile.single_harmonic(ph["delta"])


def _fluid_inputs(run):
    from .ghost_fluid import GhostCoefficients, GhostOptions, SlabDomain
    from .hilbert import build_reference
    cfg = run.cfg
    g, ph, so = cfg["grid"], cfg["physics"], cfg["solver"]
    with run.timed("kinetic_reference"):
        ref = build_reference(g["n_axis"], g["radius"], ph["q0"], g["L_mfp"],
                              cfg["run"]["threads"])
    co = ref.fluid_coefficients(ph["P"])
    over = {"kappa0": ph["kappa"], "lambda0": ph["lambda"], "K1": ph["K1"], "K2": ph["K2"]}
    fields = {k: v for k, v in over.items() if v is not None}
    if fields:
        vals = {f: getattr(co, f) for f in ("P", "kappa0", "lambda0", "K1", "K2",
                                            "beta0_ref", "k2_power")}
        vals.update(fields)
        co = GhostCoefficients(**vals)
    opts = GhostOptions(tol=so["tol"], update_tol=so["update_tol"], max_picard=so["max_picard"])
    run.metrics["coefficients"] = {"kappa0": co.kappa0, "lambda0": co.lambda0, "K1": co.K1,
                                   "K2": co.K2, "beta0_ref": co.beta0_ref,
                                   "k2_power": co.k2_power}
    return ref, co, opts, SlabDomain(g["nx"], g["nz"]), _walls(cfg)


def run_fluid(run):
    from .ghost_fluid import ghost_gap, residual_report
    _, co, opts, dom, walls = _fluid_inputs(run)
    with run.timed("solve"):
        gap = ghost_gap(dom, walls, co, opts)
    st = gap["full"]
    run.table("fluid.csv", ["x_t1", "x_n", "T", "u_t1", "u_n", "p_frak", "rho"], st.rows())
    rep = residual_report(st, co, walls, opts)
    run.metrics.update({"residuals": rep, "picard_history": st.history,
                        "gap_ratio": gap["gap_ratio"], "u1_norm": gap["u1_norm"],
                        "T_difference": gap["T_difference"]})
    worst = max(v for k, v in rep.items() if k.startswith("eq_"))
    run.audit("fluid_residual", worst, opts.tol, worst <= opts.tol)
    run.audit("positive_temperature", float(st.T.min()), 0.0, bool(st.T.min() > 0))


def run_expand(run, eps_sweep=None):
    from .hilbert import (build_bundle, convergence_moments, prepare_interior, scaling_sweep,
                          source_terms)
    from .ghost_fluid import solve_ghost_system
    cfg = run.cfg
    ex = cfg["expansion"]
    ref, co, opts, dom, walls = _fluid_inputs(run)
    with run.timed("fluid"):
        fluid = solve_ghost_system(dom, walls, co, opts)
    with run.timed("interior"):
        it = prepare_interior(fluid, walls, co, ref, check_solvability=False)
    sol = it.solvability
    run.metrics["solvability"] = {k: v for k, v in sol.items() if k != "row_profile"}
    run.audit("solvability", sol["band_defect"], sol["tolerance"],
              sol["band_defect"] <= sol["tolerance"])
    eps_list = eps_sweep if eps_sweep else ex["eps_sweep"]
    rows = []
    if eps_list:
        with run.timed("sweep"):
            res = scaling_sweep(it, eps_list, ex["alpha"], r=ex["r"], strict=False)
        audits, moments, eps_vals = res.audits, res.moments, res.epsilon
        fit_rows = []
        for name, f in res.fits.items():
            fit_rows.append((name, f["slope"], f["r2"], f["target"], f["threshold"], f["passed"]))
            run.audit(f"exponent[{name}]", f["slope"], f["threshold"], f["passed"])
            run.audit(f"fit_r2[{name}]", f["r2"], 0.9, bool(f["r2"] >= 0.9))
        run.table("fits.csv", ["norm_name", "slope", "r2", "target", "threshold", "passed"],
                  fit_rows)
        run.metrics["fits"] = {k: {kk: vv for kk, vv in f.items() if kk != "values"}
                               for k, f in res.fits.items()}
    else:
        with run.timed("audit"):
            b = build_bundle(it, ex["epsilon"], ex["alpha"])
            audits, moments, eps_vals = [source_terms(b, ex["r"])], [convergence_moments(b)], \
                [ex["epsilon"]]
    for e, a, m in zip(eps_vals, audits, moments):
        for k, v in a.norms().items():
            rows.append((e, k, v))
        for k in ("density", "energy", "momentum"):
            rows.append((e, "moment_" + k, m[k]))
        tag = f"eps={e!r}"
        comp_tol = 1e-10 * max(a.compatibility_scale, 1e-300)
        run.audit(f"compatibility[{tag}]", abs(a.compatibility), comp_tol,
                  abs(a.compatibility) <= comp_tol)
        run.audit(f"flux_identity[{tag}]", a.flux_defect, 1e-10, a.flux_defect <= 1e-10)
        orth_tol = opts.tol * max(a.s4_orthogonality_scale, 1e-300)
        run.audit(f"s4_orthogonality[{tag}]", a.s4_orthogonality, orth_tol,
                  a.s4_orthogonality <= orth_tol, hard=False)
        run.metrics[tag] = {"audit": {k: _json_num(v) for k, v in vars(a).items()},
                            "moments": m}
    run.table("sweep.csv" if eps_list else "audit.csv", ["epsilon", "norm_name", "value"], rows)


def run_sweep(run):
    """Fourier-law limit: shrink the wall amplitude and fit the departures."""
    from .ghost_fluid import WallProfile, conduction_solution, solve_ghost_system
    cfg = run.cfg
    _, co, opts, dom, _ = _fluid_inputs(run)
    rows, dT, du = [], [], []
    deltas = sorted(cfg["sweep"]["deltas"], reverse=True)
    for d in deltas:
        walls = WallProfile.single_harmonic(d)
        with run.timed(f"delta{d!r}"):
            st = solve_ghost_system(dom, walls, co, opts)
            Tc = conduction_solution(dom, walls, co, opts)
        a, b = dom.norm(st.T - Tc), st.velocity_norm()
        dT.append(a)
        du.append(b)
        rows += [(d, "T_minus_conduction", a), (d, "u1", b)]
    run.table("delta_sweep.csv", ["delta", "norm_name", "value"], rows)
    sT = float(np.polyfit(np.log(deltas), np.log(dT), 1)[0]) if min(dT) > 0 else float("nan")
    su = float(np.polyfit(np.log(deltas), np.log(du), 1)[0]) if min(du) > 0 else float("nan")
    run.metrics.update({"slope_T": sT, "slope_u1": su})
    run.audit("fourier_slope_T", sT, 1.5, bool(sT >= 1.5))
    run.audit("fourier_slope_u1", su, [0.7, 1.3], bool(0.7 <= su <= 1.3))


RUNNERS = {"coeffs": run_coeffs, "milne": run_milne, "creep": run_creep,
           "fluid": run_fluid, "expand": run_expand, "sweep": run_sweep}


# ---------------------------------------------------------------- entry point

def _parser():
    p = argparse.ArgumentParser(prog="ghostkin", description=__doc__.split("\n\n")[0])
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration value (repeatable)")
    p.add_argument("--epsilon", type=float, help="single epsilon for 'expand'")
    p.add_argument("--eps-sweep", help="comma-separated epsilon list for 'expand'")
    return p


def run_config(cfg):
    """Execute a validated configuration; returns (exit code, manifest)."""
    os.makedirs(cfg["run"]["out"], exist_ok=True)
    run = Run(cfg)
    t0 = time.perf_counter()
    RUNNERS[cfg["kind"]](run)
    run.timings["total"] = round(time.perf_counter() - t0, 3)
    status = "audit-failure" if run.failed else "pass"
    manifest = run.manifest(status)
    with open(os.path.join(cfg["run"]["out"], "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return (2 if run.failed else 0), manifest


def main(argv=None):
    args = _parser().parse_args(argv)
    overrides = {}
    try:
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = _parse_value(v.strip())
        for key, val in (("run.out", args.out), ("run.seed", args.seed),
                         ("run.threads", args.threads), ("expansion.epsilon", args.epsilon)):
            if val is not None:
                overrides[key] = val
        if args.eps_sweep:
            try:
                overrides["expansion.eps_sweep"] = [float(e) for e in args.eps_sweep.split(",")]
            except ValueError:
                raise ConfigError(f"--eps-sweep: cannot parse {args.eps_sweep!r}") from None
        cfg = parse_config(args.config, overrides, args.kind)
        code, manifest = run_config(cfg)
    except (GhostkinError, ValueError, OSError) as exc:
        print(f"ghostkin {args.kind}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # unexpected failures still honour the exit-code contract
        print(f"ghostkin {args.kind}: internal error: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1
    failed = [a["name"] for a in manifest["audits"] if a["hard"] and not a["passed"]]
    print(f"ghostkin {args.kind}: {manifest['status']}"
          + (f" ({', '.join(failed)})" if failed else "")
          + f"; outputs in {cfg['run']['out']}")
    return code


if __name__ == "__main__":
    sys.exit(main())
