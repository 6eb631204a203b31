"""``recgan`` command-line entry point.

Exit codes: 0 success, 2 usage or validation error, 3 runtime or data error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import autodiff as ad
from . import config as cfgfile
from . import dataset, evaluate, export, grid, mesh, nets, shapes, train
from .scan import sample_views

log = logging.getLogger("recgan")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


# errors caused by bad data or failures while running; checked before the
# generic ValueError bucket since most of these subclass it
RUNTIME_ERRORS = (grid.GridError, mesh.ObjParseError, mesh.GeometryError, dataset.PipelineError,
                  dataset.ManifestError, train.TrainingDiverged, ad.CheckpointFormatError,
                  ad.CapabilityError)
USAGE_ERRORS = (UsageError, cfgfile.ConfigFileError, nets.ConfigError, FileNotFoundError, ValueError)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _config_values(args, keys: dict[str, str]) -> dict:
    """Config-file values overridden by any flag in ``keys`` (flag dest -> config key) that was given."""
    values = cfgfile.load_config(_existing(args.config, "config file")) if args.config else {}
    for dest, key in keys.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[key] = v
    return values


# ---------------------------------------------------------------------------
# subcommands

def cmd_voxelize(args) -> int:
    if not grid.is_power_of_two(args.res):
        raise UsageError(f"--res must be a power of two, got {args.res}")
    m = mesh.load_obj(_existing(args.mesh, "mesh"))
    placed, frame = mesh.normalize_to_frame(m, args.res, args.pad)
    g = mesh.voxelize_solid(placed, frame)
    grid.write_grid(g, args.out)
    print(f"wrote {args.out}: {int(g.data.sum())} of {args.res ** 3} voxels occupied")
    return EXIT_OK


def cmd_synth(args) -> int:
    values = _config_values(args, {})
    view_cfg = cfgfile.build(dataset.ViewConfig, values, dataset.VIEW_PROFILES[args.profile])
    root = _existing(args.meshes, "mesh directory")
    meshes, bad = dataset.load_mesh_dir(root)
    if not meshes:
        raise UsageError(f"no readable <category>/<model>.obj meshes under {root}")
    pairs, manifest, skipped = dataset.synth_pairs(meshes, view_cfg, args.seed,
                                                   keep_depth=args.save_depth)
    dataset.write_dataset(pairs, manifest, args.out)
    counts = {s: len(manifest.select(s)) for s in dataset.SPLITS}
    print(f"pairs {len(pairs)} skipped {skipped + bad}")
    print(" ".join(f"{s}={n}" for s, n in counts.items()))
    return EXIT_OK


TRAIN_FLAGS = {"mode": "mode", "steps": "steps", "epochs": "epochs", "seed": "seed",
               "batch": "batch", "ckpt_every": "ckpt_every"}


def cmd_train(args) -> int:
    values = _config_values(args, TRAIN_FLAGS)
    arch, tcfg, _ = cfgfile.build_all(values, args.profile)
    data = _existing(args.data, "dataset directory")
    manifest = dataset.read_manifest(_existing(str(data / "manifest.tsv"), "manifest"))
    ad.deterministic(args.threads)
    resume = None
    if args.resume:
        resume = _existing(args.resume, "checkpoint")
    state = train.train_loop(data, manifest, arch, tcfg, args.out, resume=resume)
    print(f"trained {state.step} steps ({tcfg.mode}); checkpoint {train.checkpoint_path(args.out, state.step)}")
    return EXIT_OK


def _predictor(ckpt: Path):
    arch, params = train.load_generator(ckpt)
    return lambda grids: train.predict_batch(params, arch, list(grids))


def cmd_eval(args) -> int:
    data = _existing(args.data, "dataset directory")
    manifest = dataset.read_manifest(_existing(str(data / "manifest.tsv"), "manifest"))
    if args.ground_truth:
        predictor = None
    elif args.ckpt:
        predictor = _predictor(_existing(args.ckpt, "checkpoint"))
    else:
        raise UsageError("eval needs --ckpt or --ground-truth")
    per_cat, global_ = evaluate.evaluate(data, manifest, predictor, args.split)
    out = Path(args.out)
    grid.write_report(per_cat, out)
    grid.write_report(global_, out.with_suffix(".global.csv"))
    for r in per_cat:
        print(",".join(str(v) for v in r.row()))
    return EXIT_OK


def cmd_predict(args) -> int:
    x = grid.read_grid(_existing(args.input, "input grid"))
    if not isinstance(x, grid.OccupancyGrid):
        raise grid.FormatError(f"{args.input}: expected an occupancy grid")
    y = train.predict(x, _existing(args.ckpt, "checkpoint"))
    grid.write_grid(y, args.out)
    print(f"wrote {args.out}: probability grid {y.resolution}^3")
    return EXIT_OK


def cmd_export(args) -> int:
    if not 0 < args.threshold < 1:
        raise UsageError("--threshold must lie in (0, 1)")
    g = grid.read_grid(_existing(args.input, "input grid"))
    export.export_obj(g, args.out, args.threshold)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_describe(args) -> int:
    values = _config_values(args, {})
    arch = cfgfile.build(nets.ArchConfig, values, nets.PROFILES[args.profile])
    print(nets.format_table(nets.describe(arch)))
    return EXIT_OK


def cmd_make_shapes(args) -> int:
    unknown = [c for c in args.categories if c not in shapes.MAKERS]
    if unknown:
        raise UsageError(f"unknown categories {unknown}; choose from {sorted(shapes.MAKERS)}")
    if args.per_category < 1:
        raise UsageError("--per-category must be >= 1")
    paths = shapes.write_library(args.out, args.per_category, args.seed, args.categories)
    print(f"wrote {len(paths)} meshes under {args.out}")
    return EXIT_OK


def cmd_views(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    views = sample_views(args.n)
    for v in views:
        print(v.view_id())
    print(f"{len(views)} views", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="recgan", formatter_class=fmt,
                                     description="3D shape completion from a single depth view.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_, aliases=()):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt,
                           aliases=list(aliases))
        p.set_defaults(func=func)
        return p

    p = add("voxelize", cmd_voxelize, "solid-voxelize an OBJ mesh into an occupancy grid")
    p.add_argument("--mesh", required=True, help="input .obj file")
    p.add_argument("--res", type=int, required=True, help="grid resolution (power of two)")
    p.add_argument("--out", required=True, help="output .rgpp file")
    p.add_argument("--pad", type=float, default=0.05, help="margin left around the mesh, as a fraction of the frame")

    p = add("synth", cmd_synth, "scan meshes into (partial, full) training pairs", aliases=("scan",))
    p.add_argument("--meshes", required=True, help="directory of <category>/<model>.obj")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--profile", choices=sorted(dataset.VIEW_PROFILES), default="desk",
                   help="resolution and view preset")
    p.add_argument("--seed", type=int, default=0, help="seed for the model-level split")
    p.add_argument("--config", default=None, help="key=value file overriding profile fields")
    p.add_argument("--save-depth", action="store_true", help="also write each depth scan as 16-bit PGM (mm)")

    p = add("train", cmd_train, "train the generator (and discriminator in recgan mode)")
    p.add_argument("--data", required=True, help="dataset directory containing manifest.tsv")
    p.add_argument("--out", required=True, help="directory for checkpoints and loss.csv")
    p.add_argument("--config", default=None, help="key=value file of training/architecture fields")
    p.add_argument("--profile", choices=sorted(nets.PROFILES), default="desk", help="architecture preset")
    p.add_argument("--mode", choices=("recgan", "recae"), default=None, help="overrides config 'mode'")
    p.add_argument("--steps", type=int, default=None, help="overrides config 'steps'")
    p.add_argument("--epochs", type=int, default=None, help="overrides config 'epochs'")
    p.add_argument("--batch", type=int, default=None, help="overrides config 'batch'")
    p.add_argument("--seed", type=int, default=None, help="overrides config 'seed'")
    p.add_argument("--ckpt-every", type=int, default=None, help="overrides config 'ckpt_every'")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 keeps runs byte-identical)")

    p = add("eval", cmd_eval, "search thresholds on validation pairs and score a test split")
    p.add_argument("--data", required=True, help="dataset directory containing manifest.tsv")
    p.add_argument("--ckpt", default=None, help="checkpoint file (.rgpw)")
    p.add_argument("--split", choices=evaluate.TEST_SPLITS, default="test-SV", help="test split")
    p.add_argument("--out", required=True, help="CSV with per-category thresholds; <out>.global.csv uses one threshold")
    p.add_argument("--ground-truth", action="store_true", help="score the ground truth against itself instead of a checkpoint")

    p = add("predict", cmd_predict, "complete one partial grid")
    p.add_argument("--ckpt", required=True, help="checkpoint file (.rgpw)")
    p.add_argument("--in", dest="input", required=True, help="input occupancy grid (.rgpp)")
    p.add_argument("--out", required=True, help="output probability grid (.rgpp)")

    p = add("export", cmd_export, "write a grid as a cube-surface OBJ")
    p.add_argument("--in", dest="input", required=True, help="input grid (.rgpp)")
    p.add_argument("--threshold", type=float, default=0.5, help="occupancy threshold for probability grids")
    p.add_argument("--out", required=True, help="output .obj")

    p = add("describe", cmd_describe, "print layer shapes and parameter counts")
    p.add_argument("--profile", choices=sorted(nets.PROFILES), default="desk", help="architecture preset")
    p.add_argument("--config", default=None, help="key=value file overriding profile fields")

    p = add("make-shapes", cmd_make_shapes, "write a small procedural mesh library")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-category", type=int, default=5, help="meshes per category")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--categories", nargs="+", default=["chair", "table", "blob"], help="shape categories")

    p = add("views", cmd_views, "list the n^3 sampled view ids")
    p.add_argument("--n", type=int, default=2, help="samples per rotation axis")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, bad usage 2
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
