"""Command-line front door for the workbench.

Subcommands cover the full labeling loop at desk scale: ``synth`` makes a
ground-truthed scene, ``run`` fits the estimator, ``influence`` sweeps
exact label-flip influence over chosen units, ``segment`` over-segments a
cube, ``experiment`` reproduces the three study designs (single-point,
recovery, superpixel), and ``serve`` starts the HTTP service.

Every subcommand writes its artifacts under one output directory together
with ``manifest.json`` recording the effective configuration, the seed,
and the library versions, so a directory can be regenerated byte-for-byte
from its manifest. The default output root is the ``EFUMI_WORKSPACE``
environment variable (falling back to the current directory). Exit codes:
0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .core import BagSet, HsiCube
from .em import EfumiConfig, load_result, run_efumi, save_result
from .influence import (
    emit_scatter,
    exact_influence_sweep,
    mislabel_recovery,
    rank_units,
    records_to_csv,
    records_to_json,
    reports_to_json,
    spearman,
    surrogate_pt,
)
from .io import bags_from_json, load_cube, load_mask, mask_to_bags, save_cube, save_mask
from .rng import Rng
from .superpixel import save_segments, segment, superpixel_influence
from .synth import generate_synthetic

__all__ = ["main"]

#: Single-point sweeps default to this many flip units.
DEFAULT_SINGLE_POINT_UNITS = "random:1000"
#: Recovery defaults: 0.5% of negative labels flipped, 20% reviewed.
DEFAULT_ALPHA = 0.005
DEFAULT_BETA_FRAC = 0.2


def _workspace_root() -> Path:
    return Path(os.environ.get("EFUMI_WORKSPACE", "."))


def _out_dir(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else _workspace_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_manifest(out: Path, command: str, config: dict, seed: Optional[int]) -> None:
    import platform

    _write_json(
        out / "manifest.json",
        {
            "command": command,
            "config": config,
            "seed": seed,
            "versions": {
                "efumi": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
                "scipy": scipy.__version__,
            },
        },
    )


def _load_bags(args) -> BagSet:
    if getattr(args, "bags", None):
        return bags_from_json(Path(args.bags).read_text())
    return mask_to_bags(load_mask(args.mask))


def _config_from_args(args) -> EfumiConfig:
    fields = {}
    if getattr(args, "config", None):
        fields.update(json.loads(Path(args.config).read_text()))
    for key in ("m_init", "beta", "lambda_sparse", "lambda_mean", "max_iters", "rel_tol"):
        value = getattr(args, key, None)
        if value is not None:
            fields[key] = value
    if args.seed is not None:
        fields["seed"] = args.seed
    return EfumiConfig(**fields)


def _parse_units(spec: str, cube: HsiCube, bags: BagSet, rng: Rng, baseline=None):
    """Expand a unit spec into (units, unit_ids).

    ``random:N`` draws N distinct bagged pixels; ``top:N`` takes the N
    bagged pixels with the highest target-proportion surrogate (needs a
    baseline); ``pixels:3,17`` lists pixels; ``file:PATH`` reads a JSON
    list of pixel-id lists.
    """
    kind, _, arg = spec.partition(":")
    pool = bags.pixel_ids
    if kind == "random":
        count = min(int(arg), pool.size)
        picks = np.sort(rng.child("units").generator.choice(pool, size=count, replace=False))
        return [[int(p)] for p in picks], [int(p) for p in picks]
    if kind == "top":
        if baseline is None:
            raise ValueError("top:N units need a baseline result")
        scores = surrogate_pt(cube, baseline)
        order = pool[np.lexsort((pool, -scores[pool]))][: int(arg)]
        return [[int(p)] for p in order], [int(p) for p in order]
    if kind == "pixels":
        picks = [int(p) for p in arg.split(",") if p]
        return [[p] for p in picks], picks
    if kind == "file":
        units = json.loads(Path(arg).read_text())
        return [[int(p) for p in unit] for unit in units], list(range(len(units)))
    raise ValueError(f"unknown unit spec {spec!r}")


def _write_sweep_outputs(out: Path, records, summary: Optional[dict] = None) -> None:
    (out / "records.csv").write_text(records_to_csv(records))
    (out / "records.json").write_text(records_to_json(records) + "\n")
    (out / "scatter_pt.csv").write_text(emit_scatter(records, "pt"))
    (out / "scatter_re.csv").write_text(emit_scatter(records, "re"))
    if all(r.exact == 0.0 for r in records):
        print("warning: all exact influences are zero; log axis clamped", file=sys.stderr)
    if summary is not None:
        _write_json(out / "summary.json", summary)


def _sweep_summary(records) -> dict:
    exact = [r.exact for r in records]
    summary = {"n_units": len(records), "clamped": sum(1 for v in exact if v == 0.0)}
    try:
        summary["spearman_pt"] = spearman(exact, [r.surrogate_pt for r in records])
        summary["spearman_re"] = spearman(exact, [r.surrogate_re for r in records])
    except ValueError:
        summary["spearman_pt"] = summary["spearman_re"] = None
    return summary


def cmd_synth(args) -> int:
    out = _out_dir(args, "synth")
    cube, truth, mask = generate_synthetic(
        args.rows, args.cols, args.bands, args.m,
        args.target_fraction, args.noise, Rng(args.seed),
    )
    save_cube(cube, out / "cube.hsic")
    save_mask(mask, out / "mask.hsim")
    matrix = truth.endmembers.matrix
    save_cube(
        HsiCube(rows=1, cols=matrix.shape[1], bands=matrix.shape[0], data=matrix.T),
        out / "truth_endmembers.hsic",
    )
    _write_json(
        out / "truth.json",
        {
            "noise_sigma": truth.noise_sigma,
            "target_pixels": [int(p) for p in truth.target_pixels],
        },
    )
    _write_manifest(
        out,
        "synth",
        {
            "rows": args.rows, "cols": args.cols, "bands": args.bands,
            "m": args.m, "target_fraction": args.target_fraction,
            "noise": args.noise,
        },
        args.seed,
    )
    print(out)
    return 0


def cmd_run(args) -> int:
    out = _out_dir(args, "run")
    cube = load_cube(args.cube)
    bags = _load_bags(args)
    config = _config_from_args(args)
    result = run_efumi(cube, bags, config)
    save_result(result, out / "result")
    _write_manifest(out, "run", config.to_dict(), config.seed)
    print(out)
    return 0


def cmd_influence(args) -> int:
    out = _out_dir(args, "influence")
    cube = load_cube(args.cube)
    bags = _load_bags(args)
    baseline = load_result(args.result)
    units, unit_ids = _parse_units(args.units, cube, bags, Rng(args.seed), baseline)
    records = exact_influence_sweep(
        cube, bags, baseline, units,
        unit_ids=unit_ids, cold_start=args.cold_start, workers=args.jobs,
    )
    _write_sweep_outputs(out, records, _sweep_summary(records))
    _write_manifest(
        out,
        "influence",
        {"units": args.units, "cold_start": args.cold_start, "config": baseline.config.to_dict()},
        args.seed,
    )
    print(out)
    return 0


def cmd_segment(args) -> int:
    out = _out_dir(args, "segment")
    cube = load_cube(args.cube)
    spmap = segment(cube, args.target_segments, args.compactness, Rng(args.seed))
    save_segments(spmap, out / "segments.hsim")
    _write_json(out / "segments.json", {"n_segments": spmap.n_segments})
    _write_manifest(
        out,
        "segment",
        {"target_segments": args.target_segments, "compactness": args.compactness},
        args.seed,
    )
    print(out)
    return 0


def cmd_experiment_single_point(args) -> int:
    out = _out_dir(args, "experiment-single-point")
    cube = load_cube(args.cube)
    bags = _load_bags(args)
    config = _config_from_args(args)
    baseline = run_efumi(cube, bags, config)
    units, unit_ids = _parse_units(args.units, cube, bags, Rng(config.seed), baseline)
    records = exact_influence_sweep(
        cube, bags, baseline, units, unit_ids=unit_ids, workers=args.jobs
    )
    _write_sweep_outputs(out, records, _sweep_summary(records))
    _write_manifest(
        out,
        "experiment single-point",
        {"units": args.units, "config": config.to_dict()},
        config.seed,
    )
    print(out)
    return 0


def cmd_experiment_recovery(args) -> int:
    out = _out_dir(args, "experiment-recovery")
    cube = load_cube(args.cube)
    bags = _load_bags(args)
    config = _config_from_args(args)
    reports = mislabel_recovery(
        cube, bags, config, alpha=args.alpha, beta_frac=args.beta_frac, rng=Rng(args.seed)
    )
    (out / "doi.json").write_text(reports_to_json(reports) + "\n")
    for report in reports:
        print(f"{report.strategy}: DoI {report.doi:.4f}")
    _write_manifest(
        out,
        "experiment recovery",
        {"alpha": args.alpha, "beta_frac": args.beta_frac, "config": config.to_dict()},
        args.seed,
    )
    print(out)
    return 0


def cmd_experiment_superpixel(args) -> int:
    out = _out_dir(args, "experiment-superpixel")
    cube = load_cube(args.cube)
    bags = _load_bags(args)
    config = _config_from_args(args)
    baseline = run_efumi(cube, bags, config)
    targets = args.segments or max(1, (cube.rows * cube.cols) // 10)
    spmap = segment(cube, targets, args.compactness, Rng(args.seed))
    records = superpixel_influence(cube, bags, baseline, spmap, workers=args.jobs)
    save_segments(spmap, out / "segments.hsim")
    _write_sweep_outputs(out, records)
    (out / "scatter_max_pt.csv").write_text(emit_scatter(records, "max_pt"))
    (out / "scatter_sum_pt.csv").write_text(emit_scatter(records, "sum_pt"))
    _write_json(
        out / "summary.json",
        {
            "n_segments": spmap.n_segments,
            "ranking_max_pt": rank_units(records, "max_pt")[:20],
            "ranking_sum_pt": rank_units(records, "sum_pt")[:20],
        },
    )
    _write_manifest(
        out,
        "experiment superpixel",
        {
            "target_segments": targets,
            "compactness": args.compactness,
            "config": config.to_dict(),
        },
        args.seed,
    )
    print(out)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    workspace = Path(args.workspace) if args.workspace else _workspace_root()
    workspace.mkdir(parents=True, exist_ok=True)
    uvicorn.run(create_app(workspace, jobs=args.jobs), host=args.host, port=args.port)
    return 0


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with estimator settings")
    parser.add_argument("--m-init", dest="m_init", type=int)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--lambda-sparse", dest="lambda_sparse", type=float)
    parser.add_argument("--lambda-mean", dest="lambda_mean", type=float)
    parser.add_argument("--max-iters", dest="max_iters", type=int)
    parser.add_argument("--rel-tol", dest="rel_tol", type=float)


def _add_io_flags(parser: argparse.ArgumentParser, mask_required: bool = True) -> None:
    parser.add_argument("--cube", required=True, help=".hsic scene")
    group = parser.add_mutually_exclusive_group(required=mask_required)
    group.add_argument("--mask", help=".hsim label mask")
    group.add_argument("--bags", help="bag-set JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efumi",
        description="Target characterization from bag labels, with "
        "influence-guided relabeling.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a ground-truthed synthetic scene")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--bands", type=int, required=True)
    p.add_argument("--m", type=int, required=True, help="background endmember count")
    p.add_argument("--target-fraction", type=float, default=0.01)
    p.add_argument("--noise", type=float, default=0.002)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="fit the estimator on a labeled scene")
    _add_io_flags(p)
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("influence", help="exact label-flip influence sweep")
    _add_io_flags(p)
    p.add_argument("--result", required=True, help="saved run directory")
    p.add_argument("--units", default="random:100")
    p.add_argument("--cold-start", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_influence)

    p = sub.add_parser("segment", help="over-segment a cube into superpixels")
    p.add_argument("--cube", required=True)
    p.add_argument("--target-segments", dest="target_segments", type=int, required=True)
    p.add_argument("--compactness", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_segment)

    exp = sub.add_parser("experiment", help="reproduce one of the study designs")
    exp_sub = exp.add_subparsers(dest="experiment", required=True)

    p = exp_sub.add_parser("single-point", help="influence vs. surrogates scatter")
    _add_io_flags(p)
    _add_config_flags(p)
    p.add_argument("--units", default=DEFAULT_SINGLE_POINT_UNITS)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment_single_point)

    p = exp_sub.add_parser("recovery", help="mislabel, review, and re-estimate")
    _add_io_flags(p)
    _add_config_flags(p)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--beta-frac", dest="beta_frac", type=float, default=DEFAULT_BETA_FRAC)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment_recovery)

    p = exp_sub.add_parser("superpixel", help="region-level influence sweep")
    _add_io_flags(p)
    _add_config_flags(p)
    p.add_argument("--segments", type=int, default=None)
    p.add_argument("--compactness", type=float, default=0.5)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment_superpixel)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--workspace", help="service state root")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface runtime errors as exit 1, not tracebacks
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
