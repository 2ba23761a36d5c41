"""Reproducible experiment runner.

``parahom SUBCOMMAND --config c.json`` validates the JSON configuration
against a published schema, runs the experiment with all randomness flowing
from a single seed, and writes artifacts into the output directory:

* ``resolved_config.json`` — the fully resolved configuration,
* ``summary.json``         — the subcommand's numerical results,
* ``plotdata.csv``         — tidy long-format series (x, y, series, stderr),
* ``manifest.json``        — version, config hash, seed, wall clock and
  per-file checksums; written last as the completion marker.

Exit codes: 0 success, 2 configuration/schema error, 3 solver failure,
4 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from importlib import metadata

import jsonschema
import numpy as np

from . import corrector as co
from . import ensemble as en
from . import fluxcor as fx
from . import lattice as lt
from . import solver as sv
from . import stats as st
from . import twoscale as ts

SUBCOMMANDS = ("effective", "beta-sweep", "fluxcor-verify", "rate",
               "residual", "fluct", "minrad", "commutator", "dump-field")

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["ensemble"],
    "properties": {
        "lattice": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d": {"type": "integer", "minimum": 1, "maximum": 3},
                "n": {"type": "integer", "minimum": 2},
                "n_t": {"type": "integer", "minimum": 2},
                "L": {"type": "number", "exclusiveMinimum": 0},
                "tau": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "ensemble": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["constant", "laminate_space",
                                  "laminate_time", "checkerboard",
                                  "gaussian"]},
                "mu": {"type": "number", "exclusiveMinimum": 0,
                       "exclusiveMaximum": 1},
                "ell": {"type": "number", "minimum": 0},
                "ell_t": {"type": "number", "minimum": 0},
                "phases": {"type": "array", "items": {"type": "number"},
                           "minItems": 2, "maxItems": 2},
                "value": {"type": "number"},
                "isotropic": {"type": "boolean"},
                "axis": {"type": "integer", "minimum": 0, "maximum": 2},
                "static": {"type": "boolean"},
            },
        },
        "run": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "out": {"type": "string"},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "workers": {"type": "integer", "minimum": 1},
                "n_samples": {"type": "integer", "minimum": 1},
                "n_rve": {"type": "integer", "minimum": 1},
                "betas": {"type": "array",
                          "items": {"type": "number", "minimum": 0}},
                "include_zero": {"type": "boolean"},
                "radii": {"type": "array",
                          "items": {"type": "number", "exclusiveMinimum": 0}},
                "eps_list": {"type": "array", "minItems": 1,
                             "items": {"type": "number",
                                       "exclusiveMinimum": 0, "maximum": 1}},
                "eps": {"type": "number", "exclusiveMinimum": 0,
                        "maximum": 1},
                "T": {"type": "number", "exclusiveMinimum": 0},
                "sites_per_eps": {"type": "integer", "minimum": 8},
                "macro_n": {"type": "integer", "minimum": 2},
                "theta": {"type": "number", "exclusiveMinimum": 0},
                "p_list": {"type": "array", "minItems": 1,
                           "items": {"type": "integer", "minimum": 1}},
                "centers": {"type": "array",
                            "items": {"type": "array",
                                      "items": {"type": "integer"}}},
                "index": {"type": "integer", "minimum": 0},
                "field_name": {"type": "string"},
            },
        },
    },
}


def _version() -> str:
    try:
        return metadata.version("parahom")
    except metadata.PackageNotFoundError:
        return "unknown"


def load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise lt.ConfigurationError(f"config file not found: {path}")
    with open(path) as f:
        try:
            cfg = json.load(f)
        except json.JSONDecodeError as exc:
            raise lt.ConfigurationError(
                f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}")
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise lt.ConfigurationError(f"{path}: at {where}: {exc.message}")
    return cfg


def build_lattice(cfg: dict) -> lt.Lattice:
    blk = cfg.get("lattice", {})
    return lt.make_lattice(blk.get("d", 2), blk.get("n", 16),
                           blk.get("n_t", 32), blk.get("L", 1.0),
                           tau_override=blk.get("tau"))


def build_spec(cfg: dict) -> en.EnsembleSpec:
    blk = dict(cfg["ensemble"])
    if "phases" in blk:
        blk["phases"] = tuple(blk["phases"])
    return en.EnsembleSpec(**blk)


# ---------------------------------------------------------------------------
# Subcommand implementations.  Each returns (summary dict, plotdata rows).

def _cell_solve(spec, lat, seed, index, tol):
    a = en.sample(spec, lat, seed=seed, index=index)
    cs = co.solve_cell(a, tol=tol)
    return a, cs


def run_effective(cfg, run, seed, tol):
    lat = build_lattice(cfg)
    spec = build_spec(cfg)
    acc = np.zeros((lat.d, lat.d))
    resid = 0.0
    n_rve = run.get("n_rve", 1)
    for i in range(n_rve):
        a, cs = _cell_solve(spec, lat, seed, i, tol)
        acc += co.effective(a, cs).abar
        resid = max(resid, co.rms(cs.residuals(a)))
    abar = acc / n_rve
    summary = {"abar": abar.tolist(), "n_rve": n_rve,
               "max_residual_rms": resid}
    series = [{"x": i, "y": abar[i, i], "series": "abar_diag", "stderr": ""}
              for i in range(lat.d)]
    return summary, series


def run_beta_sweep(cfg, run, seed, tol):
    lat = build_lattice(cfg)
    spec = build_spec(cfg)
    a = en.sample(spec, lat, seed=seed, index=0)
    rows = co.beta_sweep(a, run.get("betas", [1.0, 0.5, 0.25]),
                         tol=tol, include_zero=run.get("include_zero", False))
    out_rows = []
    series = []
    for row in rows:
        r = dict(row)
        if not r["failed"]:
            r["abar"] = np.asarray(r["abar"]).tolist()
            series.append({"x": r["beta"], "y": r["grad_norm"],
                           "series": "grad_norm", "stderr": ""})
            series.append({"x": r["beta"], "y": r["phi_norm"],
                           "series": "phi_norm", "stderr": ""})
        out_rows.append(r)
    return {"rows": out_rows}, series


def run_fluxcor_verify(cfg, run, seed, tol):
    lat = build_lattice(cfg)
    spec = build_spec(cfg)
    a, cs = _cell_solve(spec, lat, seed, 0, tol)
    fl = co.flux(a, cs, co.effective(a, cs))
    fc = fx.solve_sigma(fl)
    rep = fx.verify_identities(fc, fl, cs)
    summary = {"skew_defect": fx.skew_defect(fc), **rep}
    series = []
    radii = run.get("radii")
    if radii:
        profile = fx.growth_profile(fc, radii)
        summary["growth_profile"] = profile
        for row in profile:
            series.append({"x": row["r"], "y": row["rms"],
                           "series": "growth_rms", "stderr": ""})
            series.append({"x": row["r"], "y": st.mu_d(row["r"], lat.d),
                           "series": "mu_d", "stderr": ""})
    return summary, series


def run_rate(cfg, run, seed, tol):
    spec = build_spec(cfg)
    out = ts.rate_experiment(
        spec, run.get("eps_list", [1 / 8, 1 / 16, 1 / 32]),
        run.get("n_samples", 16), seed=seed, T=run.get("T", 1 / 32),
        sites_per_eps=run.get("sites_per_eps", 8), tol=tol)
    series = [{"x": np.log(e), "y": np.log(m), "series": "log_err",
               "stderr": ""}
              for e, m in zip(out["eps_list"], out["mean_errors"])]
    return out, series


def run_residual(cfg, run, seed, tol):
    lat = build_lattice(cfg)
    spec = build_spec(cfg)
    a, cs = _cell_solve(spec, lat, seed, 0, tol)
    ab = co.effective(a, cs)
    fc = fx.solve_sigma(co.flux(a, cs, ab))
    eps = run.get("eps", 1 / 8)
    tau = eps**2 * lat.tau
    n_steps = int(round(run.get("T", 0.375) / tau))
    prob = ts.CylinderProblem(
        d=2, R0=1.0, T=n_steps * tau, eps=eps, n=run.get("macro_n", 64),
        n_steps=n_steps, periodic=True,
        source=lambda c, t: np.sin(2 * np.pi * c[0]) * np.sin(2 * np.pi * c[1]))
    u_eps = ts.solve_eps(a, eps, prob, tol=tol)
    u0 = ts.solve_hom(ab.abar, prob, tol=tol)
    w, rep, aux = ts.expansion(u_eps, u0, cs, fc, eps, prob, a, seed=seed)
    res = ts.residual_check(a, eps, w, u0, cs, fc, prob, ab.abar, aux=aux)
    summary = {"eps": eps, "err_l2": rep.err_l2, "w_norm": rep.w_norm,
               "grad_w_norm": rep.grad_w_norm, "degenerate": rep.degenerate,
               **res}
    series = [{"x": eps, "y": res["residual"], "series": "residual",
               "stderr": ""}]
    return summary, series


def run_fluct(cfg, run, seed, tol):
    lat = build_lattice(cfg)
    spec = build_spec(cfg)
    center = run.get("centers", [None])[0]
    out = st.fluct_suite(spec, lat, run.get("n_samples", 16),
                         run.get("p_list", [1, 2]), seed=seed, tol=tol,
                         center=tuple(center) if center else None)
    estimates = [vars(e) for e in out["estimates"]]
    summary = {"estimates": estimates, "failures": out["failures"],
               "center": list(out["center"])}
    series = [{"x": e["p"], "y": e["estimate"],
               "series": e["label"], "stderr": e["half_width"]}
              for e in estimates]
    return summary, series


def run_minrad(cfg, run, seed, tol):
    lat = build_lattice(cfg)
    spec = build_spec(cfg)
    centers = run.get("centers")
    out = st.minrad_ensemble(
        spec, lat, run.get("n_samples", 16), theta=run.get("theta", 0.1),
        seed=seed, tol=tol,
        centers=[tuple(c) for c in centers] if centers else None)
    series = []
    for entry in out["centers"]:
        label = "chi_" + "_".join(str(c) for c in entry["center"])
        values, counts = np.unique(entry["chi_values"], return_counts=True)
        for v, c in zip(values, counts):
            series.append({"x": v, "y": int(c), "series": label,
                           "stderr": ""})
    return out, series


def run_commutator(cfg, run, seed, tol):
    spec = build_spec(cfg)
    out = st.variance_scaling(
        spec, run.get("eps_list", [1 / 8, 1 / 16]),
        run.get("n_samples", 32), seed=seed, T=run.get("T", 0.3),
        sites_per_eps=run.get("sites_per_eps", 8), tol=tol)
    series = [{"x": row["eps"], "y": row["rescaled_sd"],
               "series": "rescaled_sd", "stderr": ""}
              for row in out["table"]]
    return out, series


def run_dump_field(cfg, run, seed, tol, out_dir):
    lat = build_lattice(cfg)
    spec = build_spec(cfg)
    a = en.sample(spec, lat, seed=seed, index=run.get("index", 0))
    if not a.is_scalar:
        raise lt.ConfigurationError(
            "dump-field supports scalar coefficient fields only")
    name = run.get("field_name", "field.phom")
    path = os.path.join(out_dir, name)
    lt.write_field(path, lat, a.values)
    summary = {"path": name, "min": float(np.min(a.values)),
               "max": float(np.max(a.values)),
               "mean": float(np.mean(a.values))}
    return summary, []


# ---------------------------------------------------------------------------
# Artifact plumbing

def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: str, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def write_plotdata(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["x", "y", "series", "stderr"])
        writer.writeheader()
        writer.writerows(rows)


def _series_from_summary(summary: dict) -> list[dict]:
    rows = summary.get("plot_series")
    if rows is None:
        raise lt.ConfigurationError("summary carries no plot series")
    return rows


def emit_plotdata(run_dir: str) -> str:
    """Regenerate plotdata.csv from a completed run directory."""
    manifest = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(manifest):
        raise lt.ConfigurationError(
            f"incomplete run: no manifest in {run_dir}")
    with open(os.path.join(run_dir, "summary.json")) as f:
        summary = json.load(f)
    path = os.path.join(run_dir, "plotdata.csv")
    write_plotdata(path, _series_from_summary(summary))
    return path


RUNNERS = {
    "effective": run_effective,
    "beta-sweep": run_beta_sweep,
    "fluxcor-verify": run_fluxcor_verify,
    "rate": run_rate,
    "residual": run_residual,
    "fluct": run_fluct,
    "minrad": run_minrad,
    "commutator": run_commutator,
}


def _resolve_workers(args) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("PARAHOM_WORKERS")
    if env is not None:
        try:
            workers = int(env)
        except ValueError:
            raise lt.ConfigurationError(
                f"PARAHOM_WORKERS must be an integer, got {env!r}")
        if workers < 1:
            raise lt.ConfigurationError("PARAHOM_WORKERS must be >= 1")
        return workers
    return 1


def run(subcommand: str, args) -> int:
    t0 = time.time()
    cfg = load_config(args.config)
    run_blk = dict(cfg.get("run", {}))
    seed = args.seed if args.seed is not None else run_blk.get("seed", 0)
    tol = args.tol if args.tol is not None else run_blk.get("tol", 1e-9)
    workers = _resolve_workers(args)
    out_dir = args.out or run_blk.get("out") or "parahom_out"
    os.makedirs(out_dir, exist_ok=True)

    resolved = {"subcommand": subcommand, "lattice": cfg.get("lattice", {}),
                "ensemble": cfg["ensemble"],
                "run": {**run_blk, "seed": seed, "tol": tol,
                        "workers": workers, "out": out_dir}}
    _write_json(os.path.join(out_dir, "resolved_config.json"), resolved)

    try:
        if subcommand == "dump-field":
            summary, series = run_dump_field(cfg, run_blk, seed, tol, out_dir)
        else:
            summary, series = RUNNERS[subcommand](cfg, run_blk, seed, tol)
    except sv.SolverError as exc:
        _write_json(os.path.join(out_dir, "summary.json"),
                    {"subcommand": subcommand, "failed": True,
                     "error": str(exc)})
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3

    summary = {"subcommand": subcommand, "failed": False,
               "plot_series": series, **summary}
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    write_plotdata(os.path.join(out_dir, "plotdata.csv"), series)

    outputs = ["resolved_config.json", "summary.json", "plotdata.csv"]
    if subcommand == "dump-field":
        outputs.append(summary["path"])
    manifest = {
        "version": _version(),
        "config_hash": hashlib.sha256(
            json.dumps(resolved, sort_keys=True).encode()).hexdigest(),
        "seed": seed,
        "workers": workers,
        "wall_clock_s": time.time() - t0,
        "outputs": [{"path": name,
                     "sha256": _sha256(os.path.join(out_dir, name))}
                    for name in outputs],
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parahom",
        description="Stochastic-homogenization experiment runner")
    parser.add_argument("--version", action="version", version=_version())
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--tol", type=float, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args.subcommand, args)
    except (lt.ConfigurationError, lt.CompatibilityError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except sv.SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
