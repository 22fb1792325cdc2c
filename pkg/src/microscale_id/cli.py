"""``microscale-id`` command line: synthesize, identify, homogenize, rve.

Exit codes: 0 success, 1 numerical or stage failure, 2 usage/config error.
"""
import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .errors import MicroscaleError, ParameterError
from .homogenize import Tangents, extract_length_scale, homogenize, pore_moduli
from .inverse import (Alpha, Beta, MacroModel, MicroIngredients, corrupt_measurements,
                      identify_macro, identify_micro, stage1_config, stage2_config)
from .macro import MeasurementSet, build_cantilever, load_point_for
from .rve import RveSpec, build_grid, export_image
from .voigt import IsotropicModuli, lame_from_engineering

log = logging.getLogger("microscale_id")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class StageFailure(Exception):
    """A stage finished but did not produce a usable result."""


# -- file helpers -------------------------------------------------------------

def _meta_line(**meta):
    items = [f"version={__version__}"] + [f"{k}={v}" for k, v in meta.items()]
    return "# " + ", ".join(items)


def write_table(path, columns, rows, **meta):
    with open(path, "w") as fh:
        fh.write(_meta_line(**meta) + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else
                              (str(v) if isinstance(v, (int, np.integer)) else f"{v:.17g}")
                              for v in row) + "\n")


def read_table(path):
    """Return (meta dict, column names, float array) of a package CSV."""
    meta = {}
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    body = []
    for ln in lines:
        if ln.startswith("#"):
            for item in ln[1:].split(","):
                if "=" in item:
                    k, v = item.split("=", 1)
                    meta[k.strip()] = v.strip()
        else:
            body.append(ln)
    cols = body[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in body[1:]])
    return meta, cols, data.reshape(-1, len(cols))


def write_measurements(path, data: MeasurementSet, **meta):
    write_table(path, ["x", "y", "v", "clean_v"],
                zip(data.x, data.y, data.values, data.clean),
                units="mm", gamma=data.gamma, noise_seed=data.seed, **meta)


def read_measurements(path) -> MeasurementSet:
    meta, cols, arr = read_table(path)
    gamma = float(meta.get("gamma", 0.0))
    seed = meta.get("noise_seed")
    seed = None if seed in (None, "None") else int(seed)
    return MeasurementSet(arr[:, cols.index("x")], arr[:, cols.index("y")],
                          arr[:, cols.index("v")], gamma, seed, arr[:, cols.index("clean_v")])


def write_convergence(path, result, names, **meta):
    rows = []
    for h in result.history:
        rows.append([h["iteration"], *h["x"], h["f"], h["gnorm"], h["step"]])
    write_table(path, ["iteration", *names, "objective", "grad_norm", "step"], rows,
                termination=result.reason, **meta)


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir, cfg, stages, timings, files):
    manifest = {
        "tool": "microscale-id",
        "version": __version__,
        "config": cfg.as_dict(),
        "stages": stages,
        "timings_s": timings,
        "files": {os.path.basename(f): sha256(f) for f in sorted(files)},
    }
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=float)
    return path


def verify_manifest(path):
    """True when every listed file exists with the recorded checksum."""
    with open(path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(path)
    for name, digest in manifest["files"].items():
        f = os.path.join(base, name)
        if not os.path.exists(f) or sha256(f) != digest:
            return False
    return True


# -- model construction ------------------------------------------------------

def matrix_moduli(cfg: ExperimentConfig) -> IsotropicModuli:
    return lame_from_engineering(cfg.matrix.youngs_modulus, cfg.matrix.poisson_ratio)


def reference_spec(cfg: ExperimentConfig) -> RveSpec:
    r = cfg.reference
    return RveSpec(r.phi, r.vf, r.size_factor, r.seed, r.raster_n)


def macro_model(cfg: ExperimentConfig) -> MacroModel:
    b = cfg.beam
    mesh = build_cantilever(b.length, b.depth, b.nx, b.ny)
    return MacroModel(mesh, load_point_for(mesh, b.load_location), b.load)


def ingredients(cfg: ExperimentConfig) -> MicroIngredients:
    mat = matrix_moduli(cfg)
    return MicroIngredients(mat, pore_moduli(mat, cfg.matrix.pore_stiffness_ratio),
                            cfg.reference.size_factor, cfg.stage2.rve_seed,
                            cfg.reference.raster_n)


# -- stages -------------------------------------------------------------------

def run_synthesize(cfg, outdir, model=None):
    mat = matrix_moduli(cfg)
    spec = reference_spec(cfg)
    tangents = homogenize(spec, mat, pore_moduli(mat, cfg.matrix.pore_stiffness_ratio))
    model = model or macro_model(cfg)
    clean = model.sample(tangents.C, tangents.D)
    data = corrupt_measurements(clean, cfg.noise.gamma, cfg.noise.seed)
    meas = os.path.join(outdir, "measurements.csv")
    write_measurements(meas, data, load_kN=cfg.beam.load, load_location=cfg.beam.load_location)
    tan = os.path.join(outdir, "reference_tangents.csv")
    tangents.to_csv(tan)
    l_fit, res = extract_length_scale(tangents)
    summary = dict(n_samples=len(data), tip_clean=float(clean.values[-1]),
                   reference_l_fit=l_fit, reference_l_residual=res,
                   n_circles=tangents.meta["n_circles"])
    return data, [meas, tan], summary


def run_identify_macro(cfg, outdir, data, model=None):
    s1 = cfg.stage1
    model = model or macro_model(cfg)
    res = identify_macro(data, Alpha(s1.lam, s1.mu, s1.l), model,
                         stage1_config(tol_f=s1.tol_f, tol_g=s1.tol_g, max_iter=s1.max_iter),
                         rel_step=s1.rel_step)
    a = res.params
    apath = os.path.join(outdir, "alpha.csv")
    write_table(apath, ["lambda", "mu", "l"], [[a.lam, a.mu, a.l]],
                units="GPa GPa mm", objective=f"{res.f:.17g}", termination=res.reason)
    cpath = os.path.join(outdir, "convergence_stage1.csv")
    write_convergence(cpath, res, ["lambda", "mu", "l"], units="GPa GPa mm")
    summary = dict(alpha=[a.lam, a.mu, a.l], objective=res.f, iterations=res.n_iter,
                   termination=res.reason)
    return res, [apath, cpath], summary


def read_alpha(path) -> Alpha:
    _, cols, arr = read_table(path)
    return Alpha(*(arr[0, cols.index(c)] for c in ("lambda", "mu", "l")))


def run_identify_micro(cfg, outdir, alpha: Alpha):
    s2 = cfg.stage2
    res = identify_micro(alpha, Beta(s2.phi, s2.vf), ingredients(cfg),
                         stage2_config(tol_f=s2.tol_f, tol_g=s2.tol_g, max_iter=s2.max_iter))
    b = res.params
    bpath = os.path.join(outdir, "beta.csv")
    write_table(bpath, ["phi", "vf"], [[b.phi, b.vf]], units="mm 1",
                objective=f"{res.f:.17g}", termination=res.reason, rve_seed=s2.rve_seed)
    cpath = os.path.join(outdir, "convergence_stage2.csv")
    write_convergence(cpath, res, ["phi", "vf"], units="mm 1")
    files = [bpath, cpath]
    for k, _, grid in res.snapshots:
        p = os.path.join(outdir, f"iter_{k}.pgm")
        with open(p, "wb") as fh:
            fh.write(export_image(grid))
        files.append(p)
    summary = dict(beta=[b.phi, b.vf], objective=res.f, iterations=res.n_iter,
                   termination=res.reason, homogenizations=res.n_homogenizations)
    return res, files, summary


def _check_result(res, stage):
    """Raise for an optimizer failure; the best-so-far files are already written."""
    if res.reason == "line_search" or res.reason.startswith("gradient_failed"):
        raise StageFailure(f"{stage} stopped early ({res.reason}); best-so-far result kept")
    if not res.converged:
        log.warning("%s ended with termination reason %r", stage, res.reason)


# -- commands -------------------------------------------------------------------

def cmd_synthesize(cfg, outdir):
    t0 = time.perf_counter()
    data, files, summary = run_synthesize(cfg, outdir)
    write_manifest(outdir, cfg, {"synthesize": summary},
                   {"synthesize": time.perf_counter() - t0}, files)
    return EXIT_OK


def cmd_identify_macro(cfg, outdir, measurements):
    t0 = time.perf_counter()
    data = read_measurements(measurements)
    res, files, summary = run_identify_macro(cfg, outdir, data)
    write_manifest(outdir, cfg, {"identify_macro": summary},
                   {"identify_macro": time.perf_counter() - t0}, files)
    _check_result(res, "identify-macro")
    return EXIT_OK


def cmd_identify_micro(cfg, outdir, alpha_path):
    t0 = time.perf_counter()
    res, files, summary = run_identify_micro(cfg, outdir, read_alpha(alpha_path))
    write_manifest(outdir, cfg, {"identify_micro": summary},
                   {"identify_micro": time.perf_counter() - t0}, files)
    _check_result(res, "identify-micro")
    return EXIT_OK


def cmd_pipeline(cfg, outdir):
    stages, timings, files = {}, {}, []
    model = macro_model(cfg)

    def finish():
        write_manifest(outdir, cfg, stages, timings, files)

    t0 = time.perf_counter()
    data, f, stages["synthesize"] = run_synthesize(cfg, outdir, model)
    files += f
    timings["synthesize"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    res1, f, stages["identify_macro"] = run_identify_macro(cfg, outdir, data, model)
    files += f
    timings["identify_macro"] = time.perf_counter() - t0
    try:
        _check_result(res1, "identify-macro")
    except StageFailure:
        finish()
        raise

    t0 = time.perf_counter()
    res2, f, stages["identify_micro"] = run_identify_micro(cfg, outdir, res1.params)
    files += f
    timings["identify_micro"] = time.perf_counter() - t0
    finish()
    _check_result(res2, "identify-micro")
    return EXIT_OK


def cmd_homogenize(cfg, outdir, spec):
    mat = matrix_moduli(cfg)
    t = homogenize(spec, mat, pore_moduli(mat, cfg.matrix.pore_stiffness_ratio))
    l_fit, res = extract_length_scale(t)
    t.meta.update(l_fit=l_fit, l_fit_residual=res)
    t.to_csv(os.path.join(outdir, "tangents.csv"))
    return EXIT_OK


def cmd_rve(cfg, outdir, spec):
    circles, grid = build_grid(spec)
    circles.to_csv(os.path.join(outdir, "circles.csv"), edge=spec.edge,
                   header=_meta_line(units="mm", phi=spec.phi, vf=spec.vf,
                                     size_factor=spec.size_factor, seed=spec.seed)[2:])
    with open(os.path.join(outdir, "rve.pgm"), "wb") as fh:
        fh.write(export_image(grid))
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="microscale-id",
                                description="Two-stage identification of porous microstructure "
                                            "from cantilever deflections.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI configuration file (defaults reproduce the "
                                         "porous-cantilever experiment)")
        sp.add_argument("--out", help="output directory (overrides [output] directory)")
        sp.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
        sp.add_argument("--seed-override", type=int, default=None,
                        help="replace the noise seed (synthesize/pipeline) or RVE seed "
                             "(homogenize/rve)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("synthesize", help="generate noisy top-surface measurements"))
    sp = common(sub.add_parser("identify-macro", help="stage 1: fit lambda, mu, l"))
    sp.add_argument("--measurements", help="measurements CSV (default <out>/measurements.csv)")
    sp = common(sub.add_parser("identify-micro", help="stage 2: fit pore diameter and fraction"))
    sp.add_argument("--alpha", help="alpha CSV (default <out>/alpha.csv)")
    common(sub.add_parser("pipeline", help="synthesize, then both identification stages"))
    for name, text in (("homogenize", "homogenized tangents of one RVE"),
                       ("rve", "circle packing and raster image of one RVE")):
        sp = common(sub.add_parser(name, help=text))
        sp.add_argument("--phi", type=float, required=True, help="pore diameter (mm)")
        sp.add_argument("--vf", type=float, required=True, help="target pore fraction")
        sp.add_argument("--size-factor", type=float, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--raster-n", type=int, default=None)
    return p


def _spec_from_args(cfg, args):
    r = cfg.reference
    seed = args.seed if args.seed is not None else r.seed
    if args.seed_override is not None:
        seed = args.seed_override
    return RveSpec(args.phi, args.vf,
                   args.size_factor if args.size_factor is not None else r.size_factor,
                   seed, args.raster_n if args.raster_n is not None else r.raster_n)


def _thread_limit(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        if args.out:
            overrides["output.directory"] = args.out
        if args.seed_override is not None and args.command in ("synthesize", "pipeline"):
            overrides["noise.seed"] = args.seed_override
        cfg = load_config(args.config, overrides)
        outdir = cfg.output
        os.makedirs(outdir, exist_ok=True)
        if not os.access(outdir, os.W_OK):
            raise ConfigError(f"output directory {outdir} is not writable")
        if args.command in ("homogenize", "rve"):
            spec = _spec_from_args(cfg, args)
    except (ConfigError, ParameterError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"microscale-id: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        with _thread_limit(args.threads):
            if args.command == "synthesize":
                return cmd_synthesize(cfg, outdir)
            if args.command == "identify-macro":
                path = args.measurements or os.path.join(outdir, "measurements.csv")
                if not os.path.exists(path):
                    raise ConfigError(f"measurements file not found: {path}")
                return cmd_identify_macro(cfg, outdir, path)
            if args.command == "identify-micro":
                path = args.alpha or os.path.join(outdir, "alpha.csv")
                if not os.path.exists(path):
                    raise ConfigError(f"alpha file not found: {path}")
                return cmd_identify_micro(cfg, outdir, path)
            if args.command == "pipeline":
                return cmd_pipeline(cfg, outdir)
            if args.command == "homogenize":
                return cmd_homogenize(cfg, outdir, spec)
            return cmd_rve(cfg, outdir, spec)
    except ConfigError as exc:
        print(f"microscale-id: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MicroscaleError, StageFailure) as exc:
        log.error("%s failed: %s", args.command, exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
