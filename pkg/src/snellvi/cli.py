"""Command line entry point: ``snellvi <subcommand> --config job.json [--out DIR]``.

Exit codes: 0 success (or verification pass), 2 verification failure, 1 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from .density import estimate_density, positivity_set
from .errors import SnellVIError
from .harness import (JobConfig, _jsonable, load_job_config, mc_time_nodes, prepare, run_chain,
                      run_diagnostics, run_lsm, run_vi, verify_equivalence)
from .io import density_to_csv, save_surface, surface_to_csv
from .model import SpaceTimeGrid
from .sde import simulate_paths
from .vi import extract_regions

logger = logging.getLogger("snellvi")

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_ERROR)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="job config JSON")
    common.add_argument("--out", help="output directory (default: config output_dir)")
    common.add_argument("--seed", type=int, help="override the Monte Carlo seed")
    common.add_argument("--n-paths", type=int, help="override the number of regression paths")
    common.add_argument("--quiet", action="store_true", help="suppress the text table")
    p = _Parser(prog="snellvi", description="American-option variational inequality and Snell-envelope checks")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)
    sub.add_parser("price-vi", parents=[common], help="solve the variational inequality")
    mc = sub.add_parser("price-mc", parents=[common], help="Monte Carlo / chain Snell-envelope price")
    mc.add_argument("--method", choices=["lsm", "chain_dp"], default="lsm")
    sub.add_parser("verify", parents=[common], help="full cross-verification report")
    sub.add_parser("diagnose", parents=[common], help="nondegeneracy and bracket-rank diagnostics")
    rg = sub.add_parser("regions", parents=[common], help="exercise / continuation regions")
    rg.add_argument("--density", action="store_true", help="also estimate the density and positivity set")
    return p


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, config: JobConfig, command: str, files: list[Path]) -> Path:
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(config.canonical_json().encode()).hexdigest(),
        "seeds": {"mc": config.mc["seed"]},
        "versions": {"snellvi": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "files": {f.name: _sha256(f) for f in sorted(files)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write_json(path: Path, data: dict) -> Path:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")
    return path


def _table(title: str, rows: list[tuple[str, object]]) -> str:
    width = max(len(k) for k, _ in rows) if rows else 0
    lines = [title]
    for k, v in rows:
        lines.append(f"  {k.ljust(width)}  {v:.6g}" if isinstance(v, float) else f"  {k.ljust(width)}  {v}")
    return "\n".join(lines)


def _price_vi(cfg, out):
    ctx = prepare(cfg)
    surface, info = run_vi(ctx)
    files = [_write_json(out / "vi.json", info), save_surface(surface, out / "surface.npz")]
    M = ctx.grid.M
    files.append(surface_to_csv(surface, out / "surface_t0.csv", time_indices=[0]))
    text = _table("variational inequality", [("price", info["price"]),
                                             ("residual p99", info["residual"]["p99_abs"]),
                                             ("residual max", info["residual"]["max_abs"]),
                                             ("time levels", M)])
    return EXIT_OK, files, text


def _price_mc(cfg, out, method):
    ctx = prepare(cfg)
    if method == "chain_dp":
        data = {"value": run_chain(ctx).price(cfg.x0), "std_error": 0.0, "method": "chain_dp", "n_paths": 0,
                "seed": None}
    else:
        est, _ = run_lsm(ctx)
        data = {"value": est.value, "std_error": est.std_error, "method": est.method, "n_paths": est.n_paths,
                "seed": est.seed, "in_sample_value": est.in_sample_value}
    files = [_write_json(out / "price.json", data)]
    text = _table(f"Snell envelope ({data['method']})", [("value", data["value"]), ("std error", data["std_error"])])
    return EXIT_OK, files, text


def _verify(cfg, out):
    rep = verify_equivalence(cfg)
    files = [out / "report.json"]
    files[0].write_text(rep.to_json() + "\n")
    table = rep.table()
    (out / "report.txt").write_text(table + "\n")
    files.append(out / "report.txt")
    return (EXIT_OK if rep.passed else EXIT_FAIL), files, table


def _diagnose(cfg, out):
    ctx = prepare(cfg)
    info = run_diagnostics(ctx)
    files = [_write_json(out / "diagnostics.json", info)]
    rows = []
    if "nondegeneracy" in info:
        for s in info["nondegeneracy"]["statistics"]:
            rows.append((f"E int (det gamma)^{s['p']:g}", s["value"]))
        rows.append(("nondegenerate", info["nondegeneracy"]["nondegenerate"]))
    if "hormander" in info:
        rows.append(("bracket rank by depth", info["hormander"]["rank_by_depth"]))
        rows.append(("hypoelliptic", info["hormander"]["hypoelliptic"]))
    return EXIT_OK, files, _table("hypothesis diagnostics", rows)


def _regions(cfg, out, density):
    ctx = prepare(cfg)
    surface, info = run_vi(ctx)
    regions = extract_regions(surface, tol_region=cfg.tolerances["tol_region"])
    data = {"summary": regions.summary(), "price": info["price"]}
    if regions.upper_boundary is not None:
        data["upper_boundary"] = regions.upper_boundary.tolist()
        data["lower_boundary"] = regions.lower_boundary.tolist()
        data["time_nodes"] = ctx.grid.time_nodes.tolist()
    files = [out / "regions.csv"]
    nodes = ctx.grid.nodes()
    with open(files[0], "w") as fh:
        fh.write("k,t," + ",".join(f"x{i}" for i in range(ctx.grid.d)) + ",exercise\n")
        for k in range(ctx.grid.M + 1):
            ex = regions.exercise.mask[k].ravel()
            for x, e in zip(nodes, ex):
                if e:
                    fh.write(f"{k},{float(ctx.grid.time_nodes[k])!r}," + ",".join(repr(float(v)) for v in x) + ",1\n")
    rows = [("price", info["price"]), ("exercise fraction", data["summary"]["exercise_fraction_open_interval"])]
    if density:
        dcfg = cfg.diagnostics
        batch = simulate_paths(ctx.model, mc_time_nodes(cfg), int(dcfg["density_paths"]), cfg.x0, cfg.mc["seed"])
        n = int(dcfg["density_nodes"])
        dgrid = SpaceTimeGrid(batch.time_nodes, [np.linspace(lo, hi, n) for lo, hi in zip(ctx.grid.lower,
                                                                                          ctx.grid.upper)])
        steps = int(cfg.mc["n_steps"])
        slices = sorted(set(int(round(v)) for v in np.linspace(0, steps, int(dcfg["density_slices"]) + 1)[1:]))
        dens = estimate_density(batch, dgrid, slices)
        mask = positivity_set(dens, cfg.tolerances["density_threshold"])
        data["density"] = {"mass": dens.mass.tolist(), **mask.summary()}
        files.append(density_to_csv(dens, out / "density.csv"))
        rows.append(("coverage by slice", [round(c, 4) for c in mask.coverage.tolist()]))
        rows.append(("claim", mask.claim()))
    files.append(_write_json(out / "regions.json", data))
    return EXIT_OK, files, _table("regions", rows)


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_ERROR
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = load_job_config(args.config).with_overrides(args.seed, args.n_paths)
    except (OSError, SnellVIError, ValueError, TypeError) as exc:
        print(f"snellvi: config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        with warnings.catch_warnings():
            if args.quiet:
                warnings.simplefilter("ignore")
            if args.command == "price-vi":
                code, files, text = _price_vi(cfg, out)
            elif args.command == "price-mc":
                code, files, text = _price_mc(cfg, out, args.method)
            elif args.command == "verify":
                code, files, text = _verify(cfg, out)
            elif args.command == "diagnose":
                code, files, text = _diagnose(cfg, out)
            else:
                code, files, text = _regions(cfg, out, args.density)
    except SnellVIError as exc:
        print(f"snellvi: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_ERROR
    (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    files.append(out / "config.resolved.json")
    write_manifest(out, cfg, args.command, files)
    if not args.quiet:
        print(text)
    return code


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
