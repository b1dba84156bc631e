"""Command-line entry points: configuration, orchestration, persistence.

Every command reads one JSON configuration (built-in defaults when omitted),
runs a pipeline, and writes a JSON report plus CSV artifacts into the output
directory.  Reports embed the configuration hash and the library version;
with a fixed seed all CSV output is byte-identical across runs.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (the
triggering error is embedded in the report).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import flow, geometry, inversion, normalop, tensorfields, transform
from .errors import MagtomoError
from .grids import Grid, component_count


class ConfigError(Exception):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


DEFAULT_CONFIG = {
    "seed": 0,
    "geometry": {"dim": 3, "metric": "euclidean", "magnetic": "constant:0.25",
                 "boundary": "ball:1.0"},
    "family": {"p": [0.0, 0.0, 1.0], "c": 0.2, "eps": 0.3, "n_x": 4, "n_y": 3,
               "n_lambda": 5, "n_omega": 8, "x_floor": 0.0},
    "grid": {"lo": [-0.62, -0.62, 0.72], "hi": [0.62, 0.62, 1.0],
             "shape": [16, 16, 16]},
    "transform": {"F": 1.0, "x_min": 0.02, "max_step": 0.02, "tol": 1e-10},
    "inversion": {"reg": None, "cg_tol": 1e-8},
    "symbol": {"kind": "bf", "F": 1.0, "base_point": [1.0, 0.0, 0.0],
               "mode": "finite", "quad_pts": 181, "grid_radius": 3.0,
               "n_xi": 7, "n_r": 4, "n_ang": 6},
    "geodesic": {"z": [0.0, 0.0, 0.0], "v": [1.0, 0.0, 0.0],
                 "t_span": [-3.0, 3.0]},
    "convexity": {"n_samples": 50},
    "foliation": {"tau": "r", "levels": [0.4, 0.6, 0.8, 1.0],
                  "n_points": 8, "n_dirs": 4},
    "trapping": {"tau": "r", "a": 1.0, "t_max": 10.0, "n_seeds": 30},
    "field": {"kind": "bf",
              "beta": ["exp(-((z1)**2+(z2)**2+(z3-0.88)**2)/0.012)", "0", "0"],
              "phi": "exp(-((z1)**2+(z2)**2+(z3-0.88)**2)/0.012)"},
}


def deep_update(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (overrides or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _require(cond, path, message):
    if not cond:
        raise ConfigError(path, message)


def validate_config(cfg: dict) -> None:
    g = cfg.get("geometry", {})
    _require(int(g.get("dim", 3)) >= 3, "geometry.dim", "must be >= 3")
    fam = cfg.get("family", {})
    _require(fam.get("c", 0.2) > 0, "family.c", "must be positive")
    _require(fam.get("eps", 0.3) >= 0, "family.eps", "must be nonnegative")
    tr = cfg.get("transform", {})
    _require(tr.get("F", 1.0) > 0, "transform.F", "must be positive")
    _require(tr.get("x_min", 0.02) > 0, "transform.x_min", "must be positive")
    sym = cfg.get("symbol", {})
    _require(sym.get("F", 1.0) > 0, "symbol.F", "must be positive")
    _require(sym.get("kind", "bf") in ("bf", "hb"), "symbol.kind", "bf or hb")
    shape = cfg.get("grid", {}).get("shape", [16, 16, 16])
    _require(all(int(s) >= 2 for s in shape), "grid.shape", "needs >= 2 per axis")


def sympy_scalar(expr: str, n: int):
    import sympy as sp

    zs = sp.symbols(f"z1:{n + 1}")
    local = {f"z{k + 1}": zs[k] for k in range(n)}
    local["r"] = sp.sqrt(sum(s**2 for s in zs))
    f = sp.lambdify(zs, sp.sympify(expr, locals=local), "numpy")

    def fn(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.asarray(f(*(pts[:, k] for k in range(n))), dtype=float) \
            * np.ones(pts.shape[0])

    return fn


def build_field(cfg_field: dict, grid: Grid, geom) -> tensorfields.TensorPair:
    """Pair from component expressions (exact callables kept) or a manifest."""
    if "pair_manifest" in cfg_field:
        return tensorfields.load_pair(cfg_field["pair_manifest"])
    n = grid.ndim
    kind = cfg_field.get("kind", "bf")
    betas = [sympy_scalar(e, n) for e in cfg_field.get("beta", ["0"] * n)]

    def beta_fn(pts):
        return np.stack([b(pts) for b in betas], axis=1)

    beta = tensorfields.OneForm.from_function(grid, beta_fn)
    if kind == "bf":
        phi_fn = sympy_scalar(cfg_field.get("phi", "0"), n)
        phi = tensorfields.ScalarField.from_function(grid, phi_fn)
        return tensorfields.TensorPair("bf", beta, phi=phi)
    m = component_count("hb", n) - n
    hs = [sympy_scalar(e, n) for e in cfg_field.get("h", ["0"] * m)]

    def h_fn(pts):
        return np.stack([h(pts) for h in hs], axis=1)

    h = tensorfields.SymTwoTensor.from_function(grid, h_fn)
    return tensorfields.TensorPair("hb", beta, h=h)


def _geom(cfg):
    return geometry.make_geometry(cfg["geometry"])


def _grid(cfg):
    g = cfg["grid"]
    return Grid(np.array(g["lo"], dtype=float), np.array(g["hi"], dtype=float),
                tuple(int(s) for s in g["shape"]))


def _family(cfg, geom, x_floor=None):
    fam = cfg["family"]
    ctl = flow.StepControl(tol=cfg["transform"].get("tol", 1e-10),
                           fixed_step=cfg["transform"].get("max_step", 0.02))
    return flow.olocal_family(
        geom, np.array(fam["p"], dtype=float), c=fam["c"], eps=fam["eps"],
        n_y=fam.get("n_y", 3), n_lambda=fam.get("n_lambda", 5),
        n_omega=fam.get("n_omega", 8), n_x=fam.get("n_x", 4),
        x_floor=fam.get("x_floor", 0.0) if x_floor is None else x_floor,
        step_ctl=ctl)


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _report(outdir: Path, cfg: dict, command: str, payload: dict) -> dict:
    rep = {"command": command, "version": __version__,
           "config_hash": config_hash(cfg), **payload}
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True))
    return rep


# -- commands -------------------------------------------------------------------


def cmd_geodesic(cfg, outdir, threads):
    geom = _geom(cfg)
    gc = cfg["geodesic"]
    ctl = flow.StepControl(tol=cfg["transform"].get("tol", 1e-10))
    start = flow.PhasePoint(np.array(gc["z"], dtype=float),
                            np.array(gc["v"], dtype=float)).unit(geom)
    path = flow.integrate(geom, start, tuple(gc.get("t_span", [-3.0, 3.0])), ctl)
    n = geom.dim
    header = ["t"] + [f"z{k + 1}" for k in range(n)] + [f"v{k + 1}" for k in range(n)]
    rows = [[t, *z, *v] for t, z, v in zip(path.times, path.zs, path.vs)]
    _write_csv(outdir / "path.csv", header, rows)
    drift = flow.speed_drift(path, geom)
    _report(outdir, cfg, "geodesic", {
        "exit_entry": path.exit_entry, "exit_exit": path.exit_exit,
        "trapped": bool(path.trapped_flag), "speed_drift": drift,
        "n_samples": int(path.times.size)})
    return 0


def cmd_convexity(cfg, outdir, threads):
    geom = _geom(cfg)
    rng = np.random.default_rng(cfg.get("seed", 0))
    n_samples = cfg["convexity"].get("n_samples", 50)
    p = np.array(cfg["family"]["p"], dtype=float)
    rows, worst = [], (np.inf, None)
    for _ in range(n_samples):
        d = rng.normal(size=geom.dim)
        d /= np.linalg.norm(d)
        z = _project_to_boundary(geom, p + 0.0 * d if n_samples == 1 else d)
        fr = geometry.boundary_frame(geom, z)
        w = rng.normal(size=geom.dim - 1)
        v = (w / np.linalg.norm(w)) @ fr.tangent
        val = flow.magnetic_convexity(geom, fr, v)
        val_flow = flow.magnetic_convexity_flow(geom, fr, v)
        rows.append([*z, *v, val, val_flow, abs(val - val_flow)])
        if val < worst[0]:
            worst = (val, z)
    header = ([f"z{k + 1}" for k in range(geom.dim)]
              + [f"v{k + 1}" for k in range(geom.dim)]
              + ["convexity", "convexity_flow", "crosscheck_gap"])
    _write_csv(outdir / "convexity.csv", header, rows)
    _report(outdir, cfg, "convexity", {
        "min_convexity": float(worst[0]),
        "argmin": list(map(float, worst[1])),
        "max_crosscheck_gap": float(max(r[-1] for r in rows)),
        "strictly_convex": bool(worst[0] > 0)})
    return 0


def _project_to_boundary(geom, direction):
    from scipy.optimize import brentq
    d = direction / np.linalg.norm(direction)
    r = brentq(lambda s: geom.rho(s * d), 1e-6,
               float(np.min(geom.bbox[:, 1] / np.abs(d + 1e-12))), xtol=1e-12)
    return r * d


def cmd_foliation(cfg, outdir, threads):
    geom = _geom(cfg)
    fol = cfg["foliation"]
    tau = sympy_scalar(fol["tau"], geom.dim)
    tau_pt = lambda z: float(tau(np.asarray(z)[None, :])[0])
    rep = flow.foliation_check(geom, tau_pt, fol["levels"],
                               n_points=fol.get("n_points", 8),
                               n_dirs=fol.get("n_dirs", 4),
                               rng=cfg.get("seed", 0))
    _write_csv(outdir / "foliation.csv", ["level", "min_value", "passed"],
               [[l.level, l.min_value, int(l.passed)] for l in rep.levels])
    _report(outdir, cfg, "foliation", rep.to_dict())
    return 0


def cmd_trapping(cfg, outdir, threads):
    geom = _geom(cfg)
    tc = cfg["trapping"]
    tau = sympy_scalar(tc["tau"], geom.dim)
    tau_pt = lambda z: float(tau(np.asarray(z)[None, :])[0])
    rep = flow.trapping_check(geom, tau_pt, tc["a"], tc["t_max"],
                              n_seeds=tc.get("n_seeds", 30), rng=cfg.get("seed", 0))
    _report(outdir, cfg, "trapping", rep.to_dict())
    return 0


def cmd_transform(cfg, outdir, threads):
    geom = _geom(cfg)
    grid = _grid(cfg)
    fam = _family(cfg, geom)
    f = build_field(cfg["field"], grid, geom)
    vals = transform.transform_family(f, fam, threads=threads)
    n = geom.dim
    header = (["ix", "iy", "ilam", "iom", "x"] + [f"y{k + 1}" for k in range(n - 1)]
              + ["lam"] + [f"omega{k + 1}" for k in range(n - 1)] + ["value"])
    _write_csv(outdir / "If.csv", header, transform.family_table(fam, vals))
    _report(outdir, cfg, "transform", {
        "n_geodesics": len(fam), "max_abs": float(np.nanmax(np.abs(vals))),
        "n_trapped": int(np.sum(~np.isfinite(vals))), "C": float(fam.C)})
    return 0


def _symbol_inputs(cfg, geom):
    sym = cfg["symbol"]
    p = np.array(sym.get("base_point", cfg["family"]["p"]), dtype=float)
    chart = flow.LensChart(geom, p, cfg["family"]["c"], cfg["family"]["eps"])
    ap, am, a, b = normalop.default_symbol_data(chart)
    if "alpha_plus" in sym:
        ap = np.array(sym["alpha_plus"], dtype=float)
    if "alpha_minus" in sym:
        am = np.array(sym["alpha_minus"], dtype=float)
    if "a" in sym:
        a = np.array(sym["a"], dtype=float)
    if "b" in sym:
        b = np.array(sym["b"], dtype=float)
    return ap, am, a, b


def cmd_symbol_check(cfg, outdir, threads):
    geom = _geom(cfg)
    sym = cfg["symbol"]
    ap, am, a, b = _symbol_inputs(cfg, geom)
    if sym.get("mode", "finite") == "finite":
        freqs = normalop.finite_freq_grid(sym.get("grid_radius", 3.0),
                                          sym.get("n_xi", 7), sym.get("n_r", 4),
                                          sym.get("n_ang", 6))
    else:
        freqs = normalop.infinity_freq_grid(sym.get("n_xi", 7), sym.get("n_ang", 6))
    rep = normalop.ellipticity_scan(sym["kind"], sym["F"], ap, am, a, b,
                                    freq_grid=freqs, mode=sym.get("mode", "finite"),
                                    quad_pts=sym.get("quad_pts", 181))
    payload = rep.to_dict()
    payload["alpha_plus"] = np.asarray(ap).tolist()
    payload["alpha_minus"] = np.asarray(am).tolist()
    payload["b"] = np.asarray(b).tolist()
    _report(outdir, cfg, "symbol-check", payload)
    return 0


def cmd_find_f0(cfg, outdir, threads):
    geom = _geom(cfg)
    ap, am, a, b = _symbol_inputs(cfg, geom)
    sym = cfg["symbol"]
    F0, rep = normalop.find_F0(ap, am, a, b, kind=sym.get("kind", "hb"),
                               quad_pts=sym.get("quad_pts", 121))
    _report(outdir, cfg, "find-f0", {"F0": float(F0), "scan": rep.to_dict()})
    return 0


def _load_measurements(path: Path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    return data[:, -1]


def cmd_invert_local(cfg, outdir, threads, data_path=None):
    geom = _geom(cfg)
    grid = _grid(cfg)
    fam = _family(cfg, geom)
    tr = cfg["transform"]
    truth = build_field(cfg["field"], grid, geom) if "field" in cfg else None
    if data_path is not None:
        meas = _load_measurements(Path(data_path))
    else:
        meas = transform.transform_family(truth, fam, threads=threads)
    chi = normalop.Cutoff.gaussian_for(tr["F"], _alpha_ref(fam))
    result = inversion.invert_local(cfg["field"].get("kind", "bf"), geom, fam,
                                    meas, tr["F"], chi, grid, x_min=tr["x_min"],
                                    reg=cfg["inversion"].get("reg"),
                                    truth=truth,
                                    cg_tol=cfg["inversion"].get("cg_tol", 1e-8))
    tensorfields.save_pair(result.pair, outdir, name="recon")
    tensorfields.save_pair(result.solenoidal, outdir, name="recon_solenoidal")
    _report(outdir, cfg, "invert-local", result.diagnostics)
    return 0


def _alpha_ref(fam) -> float:
    A, _ = fam.chart.alpha_forms(n_omega=8)
    return float(np.trace(A) / A.shape[0])


def cmd_roundtrip(cfg, outdir, threads):
    rc = cmd_invert_local(cfg, outdir, threads)
    rep = json.loads((Path(outdir) / "report.json").read_text())
    rep["command"] = "roundtrip"
    rep["relative_error"] = rep.get("rel_solenoidal_error")
    (Path(outdir) / "report.json").write_text(json.dumps(rep, indent=2,
                                                         sort_keys=True))
    return rc


def cmd_invert_global(cfg, outdir, threads):
    geom = _geom(cfg)
    grid = _grid(cfg)
    gl = cfg.get("layers", {})
    tau = sympy_scalar(gl.get("tau", "r"), geom.dim)
    tau_pt = lambda z: float(tau(np.asarray(z)[None, :])[0])
    gt = gl.get("grad_tau")
    grad_tau = None
    if gt is None and gl.get("tau", "r") == "r":
        grad_tau = lambda z: np.asarray(z) / max(float(np.linalg.norm(z)), 1e-12)
    sched = inversion.LayerSchedule(
        tau=tau_pt, levels=gl.get("levels", [1.0, 0.8, 0.6]),
        depth=gl.get("depth", 0.25), x_min=gl.get("x_min", 0.025),
        grad_tau=grad_tau, family_kwargs=gl.get("family_kwargs", {}))
    truth = build_field(cfg["field"], grid, geom)
    tr = cfg["transform"]
    chi = normalop.Cutoff.gaussian_for(tr["F"], 0.5)
    oracle = lambda path: transform.ray_transform(truth, path)
    res = inversion.layer_strip(cfg["field"].get("kind", "bf"), geom, sched,
                                oracle, tr["F"], chi, grid,
                                cg_tol=cfg["inversion"].get("cg_tol", 1e-8))
    tensorfields.save_pair(res.pair, outdir, name="recon_global")
    err = inversion.global_solenoidal_error("bf", geom, grid,
                                            res.pair + (-1.0 * truth), truth,
                                            mask=res.covered_nodes)
    _report(outdir, cfg, "invert-global", {
        "layers": res.layer_reports, "overlaps": res.overlap_consistency,
        "relative_error": float(err)})
    return 0


COMMANDS = {
    "geodesic": cmd_geodesic,
    "convexity": cmd_convexity,
    "foliation": cmd_foliation,
    "trapping": cmd_trapping,
    "transform": cmd_transform,
    "symbol-check": cmd_symbol_check,
    "find-f0": cmd_find_f0,
    "invert-local": cmd_invert_local,
    "invert-global": cmd_invert_global,
    "roundtrip": cmd_roundtrip,
}


def run(command: str, cfg: dict, outdir, threads: int = 1) -> int:
    """Execute a named pipeline; returns the process exit status."""
    outdir = Path(outdir)
    try:
        validate_config(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    np.random.seed(cfg.get("seed", 0))  # legacy consumers; others use default_rng
    try:
        return COMMANDS[command](cfg, outdir, threads)
    except MagtomoError as exc:
        _report(outdir, cfg, command,
                {"error": {"type": type(exc).__name__, "message": str(exc)}})
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="magtomo",
                                     description="magnetic ray transform toolkit")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=str, default=None,
                        help="JSON config; defaults are used when omitted")
    parser.add_argument("--out", type=str, default="out")
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--kind", type=str, default=None,
                        help="override symbol/field kind (bf or hb)")
    parser.add_argument("--F", dest="F", type=float, default=None,
                        help="override transform/symbol weight F")
    parser.add_argument("--data", type=str, default=None,
                        help="measurement CSV for invert-local")
    args = parser.parse_args(argv)

    overrides = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"config error: cannot read {args.config}: {exc}", file=sys.stderr)
            return 2
    cfg = deep_update(DEFAULT_CONFIG, overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.kind is not None:
        cfg.setdefault("symbol", {})["kind"] = args.kind
        cfg.setdefault("field", {})["kind"] = args.kind
    if args.F is not None:
        cfg.setdefault("symbol", {})["F"] = args.F
        cfg.setdefault("transform", {})["F"] = args.F
    threads = args.threads or int(os.environ.get("MAGTOMO_THREADS", "1"))

    if args.command == "invert-local" and args.data:
        try:
            validate_config(cfg)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        try:
            return cmd_invert_local(cfg, Path(args.out), threads,
                                    data_path=args.data)
        except MagtomoError as exc:
            print(f"numerical failure: {exc}", file=sys.stderr)
            return 3
    return run(args.command, cfg, args.out, threads)


if __name__ == "__main__":
    sys.exit(main())
