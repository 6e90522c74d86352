"""Command-line entry point: ``fracgo run <kind> [--config FILE] [flags]``.

Every run resolves its configuration (defaults, then the JSON config
file, then flags), writes ``manifest.json`` and tags every artifact with
the manifest hash.  Exit status: 0 when all gates pass, 1 when a gate
fails, 2 for configuration errors, 3 for resolution refusals and 4 for
other numerical failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, FracGOError, ResolutionError

KINDS = ("constcoef-demo", "expansion-check", "residual-sweep", "phase-ablation", "xray-recover", "stability-exp")
SCHEMA_VERSION = 1

_COMMON = {"s": float, "jobs": int, "figures": bool, "dat": bool}
_SCHEMA = {
    "constcoef-demo": {"M": int, "tau": float, "grid": list, "box": float, "margin": float, "width": float},
    "expansion-check": {"taus": list, "grid": list, "box": float, "width": float},
    "residual-sweep": {"regime": str, "M": int, "taus": list, "grid": list, "box": float, "margin": float,
                       "width": float, "refine": bool, "with_phi1": bool, "q": float, "lens_beta": float},
    "phase-ablation": {"q": float, "taus": list, "grid": list, "box": float, "margin": float, "width": float,
                       "refine": bool},
    "xray-recover": {"grid_size": int, "n_base": int, "n_dir": int, "iterations": int, "lam": float,
                     "phantom_sigma": float},
    "stability-exp": {"deltas": list, "seeds": list, "t_M": float, "grid_size": int, "n_base": int, "n_dir": int,
                      "iterations": int, "lam": float, "discrepancy": float},
}
_DEFAULTS = {
    "constcoef-demo": {"s": 0.6, "M": 3, "tau": 64.0, "grid": [4096, 256], "box": 8.0, "margin": 0.625,
                       "width": 0.5},
    "expansion-check": {"s": 0.5, "taus": [16, 32, 64, 128, 256], "grid": [4096, 256], "box": 8.0, "width": 0.5},
    "residual-sweep": {"s": 0.6, "regime": "const", "M": 3, "taus": None, "grid": None, "box": None,
                       "margin": None, "width": None, "refine": True, "with_phi1": True, "q": 1.0,
                       "lens_beta": 0.1},
    "phase-ablation": {"s": 0.3, "q": 1.0, "taus": [16, 32, 64, 128, 256], "grid": [4096, 256], "box": 8.0,
                       "margin": 0.625, "width": 0.5, "refine": True},
    "xray-recover": {"s": 0.75, "grid_size": 64, "n_base": 64, "n_dir": 128, "iterations": 200, "lam": 1e-6,
                     "phantom_sigma": 0.3},
    "stability-exp": {"s": 0.75, "deltas": [1e-2, 1e-3, 1e-4, 1e-5], "seeds": [0, 1, 2], "t_M": math.inf,
                      "grid_size": 64, "n_base": 64, "n_dir": 128, "iterations": 200, "lam": 1e-6,
                      "discrepancy": 1.1},
}
# regime-dependent defaults of residual-sweep
_SWEEP = {
    "const": {"taus": [16, 32, 64, 128, 256], "grid": [4096, 256], "box": 8.0, "margin": 0.625, "width": 0.5},
    "high": {"taus": [8, 16, 32, 64], "grid": [1024, 1024], "box": 6.0, "margin": 0.1, "width": 0.6},
    "low": {"taus": [16, 32, 64, 128, 256], "grid": [4096, 256], "box": 8.0, "margin": 0.625, "width": 0.5},
}


# ----------------------------------------------------------------- config


def _check_type(key, value, typ):
    if value is None:
        return value
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is float and value in ("inf", "Infinity"):
        return math.inf
    if typ is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if typ in (bool, str, list) and isinstance(value, typ):
        return value
    raise ConfigError(f"config key {key!r} must be of type {typ.__name__}, got {value!r}")


def resolve_config(kind, file_cfg=None, overrides=None):
    """Merge defaults, a config mapping and flag overrides, validating every key."""
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; choose from {', '.join(KINDS)}")
    schema = {**_COMMON, **_SCHEMA[kind]}
    cfg = {"jobs": 1, "figures": False, "dat": False, **_DEFAULTS[kind]}
    for source in (file_cfg or {}, overrides or {}):
        for key, value in source.items():
            if key in ("kind", "schema_version"):
                continue
            if key not in schema:
                raise ConfigError(f"unknown config key {key!r} for {kind}")
            cfg[key] = _check_type(key, value, schema[key])
    if file_cfg:
        if file_cfg.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {file_cfg.get('schema_version')!r}")
        if file_cfg.get("kind", kind) != kind:
            raise ConfigError(f"config file is for {file_cfg['kind']!r}, not {kind!r}")
    if kind == "residual-sweep":
        if cfg["regime"] not in _SWEEP:
            raise ConfigError("regime must be one of const, high, low")
        for k, v in _SWEEP[cfg["regime"]].items():
            if cfg[k] is None:
                cfg[k] = v
    if not 0 < cfg["s"] < 1:
        raise ConfigError("s must lie in (0, 1)")
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be positive")
    for key in ("taus", "deltas"):
        if key in cfg and (len(cfg[key]) < 2 or any(not isinstance(v, (int, float)) for v in cfg[key])):
            raise ConfigError(f"{key} must be a list of at least two numbers")
        # a file's [16, 32] and the flags' 16.0 32.0 must hash alike
        if key in cfg:
            cfg[key] = [float(v) for v in cfg[key]]
    if "grid" in cfg and (len(cfg["grid"]) != 2 or any(not isinstance(v, int) for v in cfg["grid"])):
        raise ConfigError("grid must be a list of two integers")
    return {"kind": kind, "schema_version": SCHEMA_VERSION, **cfg}


def manifest_for(cfg):
    body = {"config": cfg, "fracgo_version": __version__}
    text = json.dumps(body, sort_keys=True, default=str)
    return {**body, "sha256": hashlib.sha256(text.encode()).hexdigest()}


# ---------------------------------------------------------------- outputs


class Artifacts:
    """Writes tagged artifacts into one run directory."""

    def __init__(self, root, manifest):
        self.manifest = manifest
        self.tag = manifest["sha256"]
        self.dir = Path(root) / f"{manifest['config']['kind']}-{self.tag[:12]}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.written = []
        self.json("manifest.json", manifest)

    def _path(self, name):
        p = self.dir / name
        self.written.append(str(p))
        return p

    def csv(self, name, header, rows):
        with open(self._path(name), "w") as fh:
            fh.write(f"# manifest_sha256={self.tag}\n")
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    def dat(self, name, header, rows):
        with open(self._path(name), "w") as fh:
            fh.write(f"# manifest_sha256={self.tag}\n# " + " ".join(header) + "\n")
            for row in rows:
                fh.write(" ".join(f"{float(v):.17g}" for v in row) + "\n")

    def json(self, name, obj):
        obj = dict(obj)
        obj.setdefault("manifest_sha256", self.tag)
        with open(self._path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")

    def text(self, name, lines):
        with open(self._path(name), "w") as fh:
            fh.write(f"manifest_sha256={self.tag}\n")
            fh.write("\n".join(lines) + "\n")

    def figure(self, name, draw):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4))
        draw(ax)
        fig.tight_layout()
        fig.savefig(self._path(name), dpi=120, metadata={"Software": None})
        plt.close(fig)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return str(v)


def _table(art, cfg, name, header, rows):
    art.csv(name + ".csv", header, rows)
    if cfg["dat"]:
        art.dat(name + ".dat", header, rows)


def _loglog(art, cfg, name, x, ys, labels, xlabel):
    if not cfg["figures"]:
        return

    def draw(ax):
        for y, lab in zip(ys, labels):
            ax.loglog(x, y, "o-", label=lab)
        ax.set_xlabel(xlabel)
        ax.legend()

    art.figure(name + ".png", draw)


# -------------------------------------------------------------- pipelines


def _plane_setup(cfg):
    from .spectral import Grid
    from .transport import BoundaryAmplitude

    L = cfg["box"]
    return Grid(tuple(cfg["grid"]), (L, L)), BoundaryAmplitude("gaussian", width=cfg["width"])


def _run_constcoef(cfg, art):
    from .go import build_const_coef, bump_cutoff
    from .residual import apply_operator, residual, upgrade_const

    grid, prof = _plane_setup(cfg)
    s, tau = cfg["s"], cfg["tau"]
    ans = build_const_coef(s, (1.0, 0.0), grid, prof, cfg["M"], margin=cfg["margin"])
    um = _evaluate(ans, tau)
    # source restricted to a cutoff equal to one near Omega: u_M + v is exact there
    psi = bump_cutoff(grid, ans.medium.omega, 0.1)
    u, corr, ratio = upgrade_const(ans, tau, source_mask=psi)
    om = ans.medium.omega.mask(grid)
    # relative to the operator scale tau^(2s) ||u_M||; ||L u_M|| itself is
    # nearly zero at large tau and would only measure rounding
    exact = apply_operator(ans.medium, u, tau).l2_norm(om) / (tau ** (2 * s) * um.l2_norm(om))
    res0 = residual(ans.medium, um, tau, beta=0)
    x = grid.axes()[0]
    uv = um.values[:, grid.sizes[1] // 2]
    _table(art, cfg, "profile", ["x1", "re_u", "im_u"], zip(x, uv.real, uv.imag))
    gates = {"upgrade_exact": exact <= 1e-10}
    summary = {"tau": tau, "residual_b0": res0, "correction_Hs": corr, "correction_ratio": ratio,
               "upgrade_relative_residual": exact, "gates": gates}
    art.json("summary.json", summary)
    return gates, [f"residual (beta=0) at tau={tau}: {res0:.3e}",
                   f"upgrade correction ||v||_Hs = {corr:.3e}, ||v||/||u_M|| = {ratio:.3e}",
                   f"on Omega ||L(u_M + v)|| / (tau^2s ||u_M||) = {exact:.2e} (gate <= 1e-10)"]


def _evaluate(ans, tau):
    from .go import evaluate

    return evaluate(ans, tau)


def _run_expansion(cfg, art):
    from .media import PlanePhase
    from .residual import expansion_order_check
    from .spectral import Field

    grid, _ = _plane_setup(cfg)
    w = cfg["width"]
    a = Field.from_function(grid, lambda x, y: np.exp(-(x**2 + y**2) / w**2))
    rep = expansion_order_check(PlanePhase((1.0, 0.0)), a, cfg["s"], cfg["taus"])
    _table(art, cfg, "expansion", ["tau", "D0", "D1"], zip(rep.taus, rep.D0, rep.D1))
    _loglog(art, cfg, "expansion", rep.taus, [rep.D0, rep.D1], ["D0", "D1"], "tau")
    gates = {"D0": abs(rep.slope_D0 - rep.expected_D0) <= 0.2, "D1": abs(rep.slope_D1 - rep.expected_D1) <= 0.2}
    art.json("summary.json", {**rep.to_dict(), "gates": gates})
    return gates, [f"D0 slope {rep.slope_D0:+.3f} (expected {rep.expected_D0:+.3f})",
                   f"D1 slope {rep.slope_D1:+.3f} (expected {rep.expected_D1:+.3f})"]


def _sweep_prediction(regime, s, M, with_phi1):
    if regime == "const":
        return -float(M), 0.3
    if regime == "high":
        if abs(s - 0.5) < 1e-14:
            return -1.0, 0.2
        return (-min(2 - 2 * s, 2 * s - 1), 0.1) if M == 2 else (0.0, 0.2)
    return (-2 * s, 0.2) if with_phi1 else (0.0, 0.1)


def _high_setup(cfg):
    from .media import Disk, GaussianLensIndex, GaussianPotential, Medium, build_polar_chart
    from .spectral import Grid
    from .transport import BoundaryAmplitude

    med = Medium(GaussianLensIndex(cfg["lens_beta"], 0.4), GaussianPotential(cfg["q"], 0.3), cfg["s"],
                 omega_prime=Disk(radius=2.0))
    chart = build_polar_chart(med, np.array([-2.0, 0.0]))
    L = cfg["box"]
    return med, chart, Grid(tuple(cfg["grid"]), (L, L)), BoundaryAmplitude("bump", center=0.0, width=cfg["width"])


def _run_sweep(cfg, art):
    from .go import build_const_coef, build_high_s, build_low_s
    from .media import ConstantIndex, ConstantPotential, Medium, PlanePhase
    from .residual import tau_sweep

    s, regime, M = cfg["s"], cfg["regime"], cfg["M"]
    if regime == "const":
        grid, prof = _plane_setup(cfg)
        build = lambda g: build_const_coef(s, (1.0, 0.0), g, prof, M, margin=cfg["margin"])
    elif regime == "high":
        med, chart, grid, b = _high_setup(cfg)
        build = lambda g: build_high_s(med, chart, b, M, g, margin=cfg["margin"])
    else:
        grid, prof = _plane_setup(cfg)
        med = Medium(ConstantIndex(1.0), ConstantPotential(cfg["q"]), s)
        build = lambda g: build_low_s(med, PlanePhase((1.0, 0.0)), prof, cfg["with_phi1"], g, cfg["margin"])
    pred, tol = _sweep_prediction(regime, s, M, cfg["with_phi1"])
    rep = tau_sweep(build, grid, cfg["taus"], predicted=pred, note=f"{regime} regime, tolerance {tol}",
                    refine=cfg["refine"], jobs=cfg["jobs"])
    _table(art, cfg, "sweep", ["tau", "residual_b0", "residual_b1"],
           zip(rep.taus, rep.residual_b0, rep.residual_b1))
    _loglog(art, cfg, "sweep", rep.taus, [rep.residual_b0, rep.residual_b1], ["beta=0", "beta=1"], "tau")
    if regime == "low" and not cfg["with_phi1"]:
        ok = abs(rep.slope - pred) <= tol
    else:
        ok = rep.slope <= pred + tol
    gates = {"slope": ok}
    if cfg["refine"]:
        gates["refinement"] = rep.citable
    art.json("summary.json", {**rep.to_dict(), "gates": gates})
    lines = [f"fitted slope {rep.slope:+.3f} +- {rep.stderr:.3f} (predicted {pred:+.3f}, tolerance {tol})"]
    if rep.refinement:
        lines.append(f"refinement slope change {rep.refinement['slope_change']:.2e}")
    return gates, lines


def _run_ablation(cfg, art):
    from .media import ConstantIndex, ConstantPotential, Medium, PlanePhase
    from .residual import phase_correction_ablation

    grid, prof = _plane_setup(cfg)
    s = cfg["s"]
    med = Medium(ConstantIndex(1.0), ConstantPotential(cfg["q"]), s)
    rep = phase_correction_ablation(med, PlanePhase((1.0, 0.0)), prof, grid, cfg["taus"], cfg["margin"],
                                    refine=cfg["refine"], jobs=cfg["jobs"])
    _table(art, cfg, "ablation", ["tau", "residual_off", "residual_on"],
           zip(rep.off.taus, rep.off.residual_b0, rep.on.residual_b0))
    _loglog(art, cfg, "ablation", rep.off.taus, [rep.off.residual_b0, rep.on.residual_b0],
            ["without phi1", "with phi1"], "tau")
    gates = {"off": -0.1 <= rep.slope_off <= 0.1, "on": rep.slope_on <= -2 * s + 0.2}
    if cfg["refine"]:
        gates["refinement"] = rep.off.citable and rep.on.citable
    art.json("summary.json", {**rep.to_dict(), "gates": gates})
    return gates, [f"slope without phi1 {rep.slope_off:+.3f} (gate [-0.1, 0.1])",
                   f"slope with phi1    {rep.slope_on:+.3f} (gate <= {-2 * s + 0.2:+.2f})"]


def _run_xray(cfg, art):
    from .media import GaussianPotential, Medium
    from .spectral import Grid
    from .xray import build_operator, fan_geometry, invert_cg, ray_transform

    med = Medium(s=cfg["s"])
    L = 2 * med.omega_prime.radius
    grid = Grid((cfg["grid_size"],) * 2, (L, L))
    geo = fan_geometry(med.omega_prime, cfg["n_base"], cfg["n_dir"])
    op = build_operator(med, grid, geo)
    rng = np.random.default_rng(0)
    u = rng.standard_normal(op.matrix.shape[1]) + 1j * rng.standard_normal(op.matrix.shape[1])
    v = rng.standard_normal(op.matrix.shape[0]) + 1j * rng.standard_normal(op.matrix.shape[0])
    lhs, rhs = np.vdot(v, op.apply(u)), np.vdot(op.adjoint(v), u)
    adj = abs(lhs - rhs) / abs(lhs)
    phantom = GaussianPotential(1.0, cfg["phantom_sigma"], (0.15, -0.1))
    data = ray_transform(med, phantom, geo)
    data.to_csv(art._path("xray_data.csv"))
    res = invert_cg(data, op, cfg["iterations"], cfg["lam"])
    truth = phantom(grid.points())[op.mask]
    err = float(np.linalg.norm(res.field.values[op.mask] - truth) / np.linalg.norm(truth))
    x, y = grid.mesh()
    rows = zip(x[op.mask], y[op.mask], res.field.values[op.mask].real, res.field.values[op.mask].imag, truth)
    _table(art, cfg, "recovered", ["x", "y", "re_Q", "im_Q", "true_Q"], rows)
    if cfg["figures"]:
        art.figure("recovered.png", lambda ax: ax.imshow(res.field.values.real.T, origin="lower",
                                                         extent=[-L / 2, L / 2, -L / 2, L / 2]))
    gates = {"adjoint": adj <= 1e-6, "recovery": err <= 0.05}
    art.json("summary.json", {"adjoint_relative_gap": adj, "relative_l2_error": err,
                              "iterations": res.iterations, "stopped_by": res.stopped_by, "gates": gates})
    return gates, [f"adjoint dot-product gap {adj:.2e} (gate 1e-6)",
                   f"noiseless recovery relative L2 error {err:.3%} (gate 5%)"]


def _run_stability(cfg, art):
    from .xray import StabilityConfig, stability_experiment

    sc = StabilityConfig(s=cfg["s"], deltas=tuple(cfg["deltas"]), seeds=tuple(cfg["seeds"]), t_M=cfg["t_M"],
                         grid_size=cfg["grid_size"], n_base=cfg["n_base"], n_dir=cfg["n_dir"],
                         iterations=cfg["iterations"], lam=cfg["lam"], discrepancy=cfg["discrepancy"],
                         jobs=cfg["jobs"])
    rep = stability_experiment(sc)
    _table(art, cfg, "stability", ["delta", "tau", "median_error"], zip(rep.deltas, rep.taus, rep.median_errors))
    _loglog(art, cfg, "stability", rep.deltas, [rep.median_errors], ["median relative error"], "delta")
    gates = {"exponent_window": rep.within_window}
    art.json("summary.json", {**rep.to_dict(), "gates": gates})
    return gates, [f"fitted exponent {rep.fitted_exponent:.3f} +- {rep.fitted_stderr:.3f}",
                   f"predicted gamma {rep.gamma_pred:.4f}, window [{rep.window[0]:.4f}, {rep.window[1]:.4f}]",
                   f"noiseless floor {rep.noiseless_error:.3e}", rep.note]


_RUNNERS = {
    "constcoef-demo": _run_constcoef,
    "expansion-check": _run_expansion,
    "residual-sweep": _run_sweep,
    "phase-ablation": _run_ablation,
    "xray-recover": _run_xray,
    "stability-exp": _run_stability,
}


# -------------------------------------------------------------------- main


def _parser():
    ap = argparse.ArgumentParser(prog="fracgo", description="Geometrical-optics experiments for the fractional "
                                 "Helmholtz operator.")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("kind", help="one of: " + ", ".join(KINDS))
    run.add_argument("--config", help="JSON configuration file")
    run.add_argument("--out", help="output root (default: $FRACGO_OUTPUT_ROOT or ./fracgo-output)")
    run.add_argument("--s", type=float)
    run.add_argument("--regime", choices=("const", "high", "low"))
    run.add_argument("--M", type=int)
    run.add_argument("--tau", type=float)
    run.add_argument("--taus", type=float, nargs="+")
    run.add_argument("--deltas", type=float, nargs="+")
    run.add_argument("--seeds", type=int, nargs="+")
    run.add_argument("--grid", type=int, nargs=2)
    run.add_argument("--grid-size", dest="grid_size", type=int)
    run.add_argument("--t-M", dest="t_M", type=float)
    run.add_argument("--q", type=float)
    run.add_argument("--no-refine", dest="refine", action="store_false", default=None)
    run.add_argument("--no-phi1", dest="with_phi1", action="store_false", default=None)
    run.add_argument("--jobs", type=int)
    run.add_argument("--figures", action="store_true", default=None, help="also render PNG figures")
    run.add_argument("--dat", action="store_true", default=None, help="also write gnuplot .dat tables")
    return ap


_FLAG_KEYS = ("s", "regime", "M", "tau", "taus", "deltas", "seeds", "grid", "grid_size", "t_M", "q", "refine",
              "with_phi1", "jobs", "figures", "dat")


def run(argv=None, stdout=None):
    """Parse ``argv``, run the experiment and return the exit status."""
    out = stdout or sys.stdout
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        file_cfg = None
        if args.config:
            try:
                with open(args.config) as fh:
                    file_cfg = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
            if not isinstance(file_cfg, dict):
                raise ConfigError("config file must hold a JSON object")
        overrides = {k: getattr(args, k) for k in _FLAG_KEYS if getattr(args, k) is not None}
        if args.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {args.kind!r}; choose from {', '.join(KINDS)}")
        overrides = {k: v for k, v in overrides.items() if k in {**_COMMON, **_SCHEMA[args.kind]}}
        cfg = resolve_config(args.kind, file_cfg, overrides)
    except ConfigError as exc:
        print(f"fracgo: config error: {exc}", file=out)
        return 2
    root = args.out or os.environ.get("FRACGO_OUTPUT_ROOT") or "fracgo-output"
    manifest = manifest_for(cfg)
    try:
        art = Artifacts(root, manifest)
        gates, lines = _RUNNERS[cfg["kind"]](cfg, art)
    except OSError as exc:
        print(f"fracgo: cannot write artifacts: {exc}", file=out)
        return 2
    except FracGOError as exc:
        cause = exc if isinstance(exc, ResolutionError) else exc.__cause__
        if isinstance(cause, ResolutionError):
            print(f"fracgo: resolution refused: {cause} (required sizes {cause.required_sizes})", file=out)
            return 3
        print(f"fracgo: numerical failure: {type(exc).__name__}: {exc}", file=out)
        return 4
    passed = all(gates.values())
    lines = lines + [f"gate {k}: {'PASS' if v else 'FAIL'}" for k, v in gates.items()]
    art.text("summary.txt", lines)
    for line in lines:
        print(line, file=out)
    print(f"artifacts: {art.dir}", file=out)
    return 0 if passed else 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
