"""Command-line interface: ``asinv {decompose,invert,observe,verify}``.

Every run writes ``manifest.json`` (config hash, versions, seed, outputs)
and the normalized ``config.toml`` into the output directory. Exit codes:
0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from asinv import __version__
from asinv.config import ConfigError, ScenarioConfig
from asinv.fem import (FineQuadrature, ForwardProblem, NonpositiveMediumError, interpolate_medium,
                       write_field_csv)
from asinv.inversion import HISTORY_COLUMNS, ASIError, ASIState, ObservationSet, asi_run
from asinv.linalg import ConvergenceError, FactorizationError
from asinv.medium import Medium, RegionSeparationError
from asinv.mesh import build_rect_mesh
from asinv.scenarios import generate_observations, perimeter_sources
from asinv.spectral import (as_decomposition, compute_background, compute_eigenbasis,
                            verify_estimates)

log = logging.getLogger("asinv")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERICAL_ERRORS = (ASIError, ConvergenceError, FactorizationError, NonpositiveMediumError,
                    RegionSeparationError, np.linalg.LinAlgError)


# ---------------------------------------------------------------------------
# shared helpers

def build_mesh(cfg: ScenarioConfig, extra_refine: int = 0):
    m = cfg.section("mesh")
    return build_rect_mesh(cfg.domain, m["nx"], m["ny"], refine=m["refine"] + extra_refine)


def build_sources(cfg: ScenarioConfig):
    f = cfg.section("forward")
    width = f["source_width"] or 2.0 * cfg.mesh_h()
    if f["sources"] == "perimeter":
        return perimeter_sources(cfg.domain, width, f["source_amplitude"])
    from asinv.fem import GaussianSource

    return [GaussianSource(tuple(c), width, f["source_amplitude"]) for c in f["sources"]]


def build_problems(cfg: ScenarioConfig, mesh):
    f = cfg.section("forward")
    sources = build_sources(cfg)
    return [ForwardProblem(mesh, float(nu), sources, observe=tuple(f["observe"]),
                           sound_hard=tuple(f["sound_hard"])) for nu in f["frequencies"]]


def make_observations(cfg: ScenarioConfig, mesh, seed: int | None) -> list[ObservationSet]:
    f, o = cfg.section("forward"), cfg.section("observations")
    rng = np.random.default_rng(seed) if seed is not None else None
    sources = build_sources(cfg)
    medium = cfg.medium()
    return [generate_observations(medium, mesh, float(nu), sources, noise=float(o["noise"]),
                                  rng=rng, refine=o["refine"], tags=tuple(f["observe"]),
                                  sound_hard=tuple(f["sound_hard"]))
            for nu in f["frequencies"]]


def write_observations(out: Path, mesh, observations: list[ObservationSet]) -> list[Path]:
    """One CSV per frequency: ``node,x,y`` then ``re_l,im_l`` for every source ``l``."""
    paths = []
    for p, obs in enumerate(observations):
        path = out / f"observations_{p}.csv"
        xy = mesh.vertices[obs.nodes]
        cols = [obs.nodes, xy[:, 0], xy[:, 1]]
        header = ["node", "x", "y"]
        for l in range(obs.n_sources):
            cols += [obs.data[:, l].real, obs.data[:, l].imag]
            header += [f"re_{l}", f"im_{l}"]
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in zip(*cols):
                fh.write(f"{int(row[0])}," + ",".join(repr(float(v)) for v in row[1:]) + "\n")
        path.with_suffix(".json").write_text(json.dumps(
            {"frequency": obs.frequency, "noise_level": obs.noise_level, "tags": list(obs.tags),
             "n_sources": obs.n_sources}, indent=2))
        paths.append(path)
    return paths


def read_observations(directory: Path) -> list[ObservationSet]:
    paths = sorted(Path(directory).glob("observations_*.csv"),
                   key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    if not paths:
        raise ConfigError("observations.directory", f"no observations_*.csv in {directory}")
    out = []
    for path in paths:
        meta = json.loads(path.with_suffix(".json").read_text())
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        Y = data[:, 3::2] + 1j * data[:, 4::2]
        out.append(ObservationSet(data[:, 0].astype(np.int64), Y, meta["frequency"],
                                  meta["noise_level"], tuple(meta["tags"])))
    return out


def write_rows(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return path


def write_history(path: Path, history: list[dict]) -> Path:
    return write_rows(path, HISTORY_COLUMNS, ([row[c] for c in HISTORY_COLUMNS] for row in history))


def _plots_enabled(args) -> bool:
    return not args.no_plots


# ---------------------------------------------------------------------------
# verbs

def run_verify(cfg: ScenarioConfig, out: Path, args) -> tuple[int, list[Path], dict]:
    medium = _piecewise(cfg)
    mesh = build_mesh(cfg)
    dec = cfg.section("decomposition")
    report = verify_estimates(medium, mesh, cfg.weight(), delta=dec["delta"] or None,
                              n_eigs=dec["n_eigs"] or None, region=dec["region"] or None)
    path = out / "estimates.csv"
    report.to_csv(path)
    info = {"passed": report.passed, "constants": {k: v for k, v in report.constants.items()
                                                   if isinstance(v, float)}}
    for c in report.checks:
        log.info("%-13s k=%d lhs=%.3e rhs=%.3e %s", c.check, c.index, c.lhs, c.rhs,
                 "ok" if c.passed else "FAIL")
    return (EXIT_OK if report.passed else EXIT_NUMERIC), [path], info


def run_decomposition(cfg: ScenarioConfig, out: Path, args) -> tuple[int, list[Path], dict]:
    medium = _piecewise(cfg)
    dec = cfg.section("decomposition")
    spec = cfg.weight()
    K = dec["n_eigs"] or max(medium.n_inclusions, 1)
    n_total = K + dec["extra_eigs"]
    outputs = []

    # eigenvalues against refinement
    rows = []
    for r in range(dec["refinements"] + 1):
        mesh = build_mesh(cfg, r)
        u = interpolate_medium(medium, mesh).values
        phi0 = compute_background(mesh, u, u, spec)
        basis = compute_eigenbasis(mesh, u, n_total, spec, background=phi0)
        rows.append([r, mesh.h_max] + [float(v) for v in basis.values])
        log.info("refinement %d h=%.4g lambda=%s", r, mesh.h_max,
                 np.array2string(basis.values, precision=4))
    outputs.append(write_rows(out / "eigenvalues.csv",
                              ["refinement", "h_max"] + [f"lambda_{k + 1}" for k in range(n_total)],
                              rows))

    # base-mesh eigenfunctions and AS projections
    mesh = build_mesh(cfg)
    u_d = interpolate_medium(medium, mesh).values
    phi0 = compute_background(mesh, u_d, u_d, spec)
    basis = compute_eigenbasis(mesh, u_d, n_total, spec, background=phi0)
    fdir = out / "fields"
    fdir.mkdir(exist_ok=True)
    write_field_csv(fdir / "medium.csv", mesh, u_d, {"field": "interpolated medium"})
    write_field_csv(fdir / "background.csv", mesh, phi0.values, {"field": "background"})
    for k in range(n_total):
        write_field_csv(fdir / f"eigenfunction_{k + 1}.csv", mesh, basis.vectors[:, k],
                        {"field": "eigenfunction", "index": k + 1,
                         "eigenvalue": float(basis.values[k])})
    outputs.append(fdir)

    quad = FineQuadrature(mesh, level=2)
    u_exact = medium.evaluate(quad.points)
    nrm_u = quad.norm(u_exact)
    nrm_ud = float(np.sqrt(u_d @ (_mass(mesh) @ u_d)))
    interp_err = quad.distance(u_d, u_exact) / nrm_u
    proj_rows = []
    for k in range(0, n_total + 1):
        approx = as_decomposition(mesh, u_d, basis, k)
        d = approx - u_d
        e_ud = float(np.sqrt(d @ (_mass(mesh) @ d))) / nrm_ud
        e_u = quad.distance(approx, u_exact) / nrm_u
        proj_rows.append([k, e_ud, e_u, interp_err])
        if k == K:
            write_field_csv(fdir / "as_projection.csv", mesh, approx, {"field": "AS projection",
                                                                       "n_terms": K})
    outputs.append(write_rows(out / "projection.csv",
                              ["n_terms", "rel_L2_vs_u_delta", "rel_L2_vs_u", "interp_error"],
                              proj_rows))

    code, paths, info = run_verify(cfg, out, args)
    outputs += paths
    info["projection_error_at_K"] = proj_rows[K][1]

    if _plots_enabled(args):
        from asinv.plotting import plot_field, plot_fields

        outputs.append(plot_field(mesh, u_d, out / "medium.png", "medium (interpolant)"))
        outputs.append(plot_field(mesh, as_decomposition(mesh, u_d, basis, K),
                                  out / "as_projection.png", f"AS projection, K={K}"))
        outputs.append(plot_fields(mesh, {f"phi_{k + 1} (lambda={basis.values[k]:.3g})":
                                          basis.vectors[:, k] for k in range(n_total)},
                                   out / "eigenfunctions.png", cmap="RdBu_r"))
    return code, outputs, info


def run_observe(cfg: ScenarioConfig, out: Path, args) -> tuple[int, list[Path], dict]:
    mesh = build_mesh(cfg)
    obs = make_observations(cfg, mesh, cfg.seed)
    paths = write_observations(out, mesh, obs)
    if _plots_enabled(args):
        from asinv.plotting import plot_field

        paths.append(plot_field(mesh, interpolate_medium(cfg.medium(), mesh).values,
                                out / "medium.png", "true medium"))
    return EXIT_OK, paths, {"n_frequencies": len(obs), "n_sources": obs[0].n_sources}


def run_inversion(cfg: ScenarioConfig, out: Path, args) -> tuple[int, list[Path], dict]:
    mesh = build_mesh(cfg)
    medium = cfg.medium()
    problems = build_problems(cfg, mesh)
    o = cfg.section("observations")
    if o["directory"]:
        observations = read_observations(Path(o["directory"]))
        if len(observations) != len(problems):
            raise ConfigError("observations.directory", "one file per frequency expected")
    else:
        observations = make_observations(cfg, mesh, cfg.seed)
        obs_paths = write_observations(out, mesh, observations)

    truth_nodal = interpolate_medium(medium, mesh).values
    boundary = truth_nodal
    init = cfg.section("inversion")["initial"]
    if init == 0:
        init = float(np.mean(truth_nodal[mesh.boundary_nodes]))
    u0 = np.full(mesh.n_vertices, float(init))

    quad = FineQuadrature(mesh, level=2)
    u_exact = medium.evaluate(quad.points)
    nrm = quad.norm(u_exact)

    def truth(u):
        return quad.distance(u, u_exact) / nrm

    state = ASIState.load(args.resume, mesh) if args.resume else None
    outputs = [out / "history.csv", out / "final_medium.csv", out / "snapshots"]
    if not o["directory"]:
        outputs += obs_paths
    try:
        res = asi_run(cfg.asi(), problems, observations, u0, boundary, truth=truth, state=state,
                      snapshot_dir=out / "snapshots")
    except ASIError as exc:
        write_history(out / "history.csv", exc.history)
        raise
    write_history(out / "history.csv", res.history)
    write_field_csv(out / "final_medium.csv", mesh, res.u, {"field": "reconstructed medium"})
    final = res.history[-1]
    info = {"converged": res.converged, "iterations": len(res.history),
            "final_rel_L2_error": final["rel_L2_error"], "final_J": int(final["J_m"])}
    if _plots_enabled(args):
        from asinv.plotting import plot_field, plot_history

        lo, hi = float(truth_nodal.min()), float(truth_nodal.max())
        outputs.append(plot_field(mesh, res.u, out / "final_medium.png", "reconstruction",
                                  vmin=lo, vmax=hi))
        outputs.append(plot_field(mesh, truth_nodal, out / "true_medium.png", "true medium",
                                  vmin=lo, vmax=hi))
        outputs.append(plot_history(res.history, out / "history.png"))
    return EXIT_OK, outputs, info


def _piecewise(cfg: ScenarioConfig) -> Medium:
    medium = cfg.medium()
    if not isinstance(medium, Medium):
        raise ConfigError("medium", "the decomposition study needs a piecewise-constant medium")
    return medium


def _mass(mesh):
    from asinv.spectral import _mass as cached

    return cached(mesh)


VERBS = {
    "decompose": run_decomposition,
    "invert": run_inversion,
    "observe": run_observe,
    "verify": run_verify,
}


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asinv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"asinv {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)
    for name, help_ in [("decompose", "eigenvalue/projection study of a medium"),
                        ("invert", "adaptive spectral inversion"),
                        ("observe", "generate synthetic boundary observations"),
                        ("verify", "check the decomposition estimates")]:
        p = sub.add_parser(name, help=help_)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", type=Path, help="TOML scenario file")
        src.add_argument("--preset", help="built-in scenario name")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override scenario.seed")
        p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
        p.add_argument("--no-plots", action="store_true", help="skip PNG rendering")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "invert":
            p.add_argument("--resume", type=Path, default=None, help="snapshot .npz to resume from")
    return parser


def _versions() -> dict:
    import scipy

    return {"asinv": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def load_config(args) -> ScenarioConfig:
    cfg = ScenarioConfig.load(args.config) if args.config else ScenarioConfig.preset(args.preset)
    if args.seed is not None:
        cfg = cfg.with_overrides(scenario={"seed": args.seed})
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.toml")
    manifest = {"verb": args.verb, "config_sha256": cfg.digest(), "seed": cfg.seed,
                "versions": _versions(), "status": "running"}
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
        manifest["threads"] = args.threads
    else:
        limiter = nullcontext()
    t0 = time.perf_counter()
    code = EXIT_OK
    with limiter:
        try:
            code, outputs, info = VERBS[args.verb](cfg, out, args)
            manifest.update(info)
            manifest["outputs"] = sorted(str(Path(p).relative_to(out)) for p in outputs
                                         if Path(p).exists())
            manifest["status"] = "ok" if code == EXIT_OK else "failed"
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            manifest.update(status="config_error", error=str(exc))
            code = EXIT_CONFIG
        except NUMERICAL_ERRORS as exc:
            print(f"numerical failure: {exc}", file=sys.stderr)
            manifest.update(status="numerical_failure", error=str(exc))
            code = EXIT_NUMERIC
    manifest["elapsed_s"] = round(time.perf_counter() - t0, 3)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=float))
    return code


if __name__ == "__main__":
    sys.exit(main())
