"""Command-line surface: simulate, mf, train, eval, bench, convert.

Every command writes a run manifest (command, config snapshot, seed, input
and output paths, tool version, wall time) next to its outputs. All
randomness flows from the --seed flag; reruns with identical arguments
produce bit-identical data files (the manifest's wall time is the one
volatile field, which is why it lives in its own file).

Exit codes: 0 success, 2 usage (including missing input files), 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .datacube import (HyperCube, LabelMask, load_component_map, load_cube, load_mask,
                       load_map, aggregate_minerals, save_cube, save_map, save_mask,
                       select_bands, tile_grid)
from .errors import DataError, NumericError
from .matchedfilter import (DEFAULT_ITERATIONS, DEFAULT_LAMBDA, DEFAULT_THRESHOLD,
                            iterate_mf, morph_kernel, opening, threshold_map)
from .metrics import evaluate_tiles
from .simulate import load_signature, resample_signature
from . import bench as bench_mod
from . import toydata
from .nn import (HyperspectralViT, ModelConfig, TrainConfig, infer, load_checkpoint,
                 samples_from_tiles, save_checkpoint, train)


def _existing_file(value: str) -> Path:
    path = Path(value)
    if not path.exists():
        raise argparse.ArgumentTypeError(f"file not found: {value}")
    return path


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("HSK_THREADS", "1"))


def _write_manifest(out_dir: Path, command: str, args_ns, inputs: list[str],
                    outputs: list[str], seed: int | None, wall: float) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v)
              for k, v in vars(args_ns).items() if k != "func"}
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
        "wall_time_seconds": wall,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_manifest_rows(path: Path, split: str | None = None) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        rows = json.load(fh)
    if not isinstance(rows, list):
        raise DataError("dataset manifest must be a JSON list")
    if split is not None:
        rows = [r for r in rows if r.get("split") == split]
        if not rows:
            raise DataError(f"no manifest rows with split={split!r}")
    return rows


def _rows_to_tiles(rows: list[dict], base: Path) -> list[tuple[HyperCube, LabelMask]]:
    tiles = []
    for row in rows:
        cube = load_cube(base / row["cube"])
        mask = load_mask(base / row["mask"])
        tiles.append((cube, mask))
    return tiles


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    sig = load_signature(args.signature)
    if args.clean_dir is not None:
        headers = sorted(Path(args.clean_dir).glob("*.hdr.json"))
        if not headers:
            raise DataError(f"no cube headers in {args.clean_dir}")
        clean = [load_cube(p) for p in headers]
        library = toydata.make_plume_library(args.seed)
    else:
        clean = [toydata.make_clean_tile(args.seed, i, args.tile_size, args.tile_size)
                 for i in range(args.toy_tiles)]
        library = toydata.make_plume_library(args.seed)
    from .simulate import build_synthetic_dataset
    dataset = build_synthetic_dataset(clean, library, sig, seed=args.seed,
                                      event_fraction=args.event_fraction,
                                      scale=args.scale)
    rows = []
    for i, (cube, mask, alpha) in enumerate(dataset):
        cube_name, mask_name, alpha_name = (f"cube_{i:05d}", f"mask_{i:05d}",
                                            f"alpha_{i:05d}")
        save_cube(cube, out_dir / cube_name)
        save_mask(mask, out_dir / mask_name)
        save_map(alpha.alpha, out_dir / alpha_name)
        rows.append({
            "cube": cube_name, "mask": mask_name, "alpha": alpha_name,
            "split": args.split, "event": bool((mask.values > 0).any()),
        })
    with open(out_dir / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_manifest(out_dir, "simulate", args, inputs=[str(args.signature)],
                    outputs=[str(out_dir / "dataset.json")], seed=args.seed,
                    wall=time.perf_counter() - t0)
    print(f"simulate: wrote {len(rows)} tiles "
          f"({sum(r['event'] for r in rows)} with events) to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# mf
# ---------------------------------------------------------------------------

def cmd_mf(args) -> int:
    t0 = time.perf_counter()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cube = load_cube(args.cube)
    sig = load_signature(args.signature)
    s = resample_signature(sig, cube.band_centers)
    kernel = morph_kernel(args.kernel)
    alpha = iterate_mf(cube, s, iterations=args.iterations, lam=args.reg_lambda)
    mask = opening(threshold_map(alpha, args.threshold), kernel)
    save_map(alpha.alpha, out_dir / "alpha")
    save_mask(LabelMask(values=mask[:, :, None]), out_dir / "mask")
    _write_manifest(out_dir, "mf", args,
                    inputs=[str(args.cube), str(args.signature)],
                    outputs=[str(out_dir / "alpha.hdr.json"),
                             str(out_dir / "mask.hdr.json")],
                    seed=None, wall=time.perf_counter() - t0)
    print(f"mf: {int(mask.sum())} detected pixels "
          f"(threshold {args.threshold} ppm*m, kernel {args.kernel})")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _split_train_val(samples, val_fraction: float, seed: int):
    n = len(samples)
    n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
    order = np.random.default_rng([seed, 0xA1]).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train_s = [samples[i] for i in range(n) if i not in val_idx]
    val_s = [samples[i] for i in range(n) if i in val_idx]
    return train_s, val_s


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = Path(args.dataset).parent
    rows = _load_manifest_rows(Path(args.dataset))
    train_rows = [r for r in rows if r.get("split") in (args.split, None)]
    if not train_rows:
        raise DataError(f"no rows with split {args.split!r} in the dataset manifest")
    tiles = _rows_to_tiles(train_rows, base)
    weights = None
    if args.mf_loss_weight:
        weights = [1.0 + load_map(base / r["alpha"]) / DEFAULT_THRESHOLD
                   for r in train_rows]
    samples = samples_from_tiles(tiles, weights)
    val_rows = [r for r in rows if r.get("split") == "val"]
    if val_rows:
        train_s = samples
        val_s = samples_from_tiles(_rows_to_tiles(val_rows, base))
    else:
        train_s, val_s = _split_train_val(samples, args.val_fraction, args.seed)

    bands = tiles[0][0].bands
    classes = tiles[0][1].classes
    stage_dims = tuple(int(v) for v in args.stage_dims.split(","))
    config = ModelConfig(in_bands=bands, num_classes=classes,
                         multi_hot=classes > 1, variant=args.variant,
                         stage_dims=stage_dims,
                         spectral_layer=args.spectral,
                         decoder_dim=args.decoder_dim)
    model = HyperspectralViT(config, seed=args.seed)
    tcfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                       epochs=args.epochs, seed=args.seed,
                       oversample_positives=not args.no_oversample,
                       mf_loss_weight=args.mf_loss_weight)
    result = train(model, train_s, val_s, tcfg, checkpoint_dir=out_dir,
                   resume=args.resume, verbose=True)
    history = {"train_losses": result.train_losses, "val_losses": result.val_losses,
               "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss}
    with open(out_dir / "history.json", "w", encoding="utf-8") as fh:
        json.dump(history, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_manifest(out_dir, "train", args, inputs=[str(args.dataset)],
                    outputs=[str(out_dir / "best.ckpt"), str(out_dir / "last.ckpt"),
                             str(out_dir / "history.json")],
                    seed=args.seed, wall=time.perf_counter() - t0)
    print(f"train: best epoch {result.best_epoch} "
          f"val loss {result.best_val_loss:.5f} -> {out_dir / 'best.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = Path(args.dataset).parent
    rows = _load_manifest_rows(Path(args.dataset), split=args.split)
    tiles = _rows_to_tiles(rows, base)

    if args.oracle:
        model = None
    else:
        if args.checkpoint is None:
            raise DataError("--checkpoint is required unless --oracle is set")
        arrays, config_dict, _ = load_checkpoint(args.checkpoint)
        config = ModelConfig.from_dict(config_dict)
        model = HyperspectralViT(config, seed=0)
        model.load_state_dict(arrays)
        model.eval()

    scores, truths, valids = [], [], []
    threads = _threads(args)
    for cube, mask in tiles:
        if args.oracle:
            probs = mask.values.transpose(2, 0, 1).astype(np.float32)
        else:
            grid = tile_grid(cube.height, cube.width, args.tile_size, args.overlap,
                             pad=False)
            probs = infer(model, cube, grid, threads=threads)
        scores.append(probs)
        truths.append(mask.values.transpose(2, 0, 1))
        valids.append(cube.valid_mask())
    report = evaluate_tiles(scores, truths, valids,
                            class_names=args.class_names.split(",")
                            if args.class_names else None,
                            threshold=args.threshold, strata=args.strata)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    table = report.format_table()
    with open(out_dir / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    _write_manifest(out_dir, "eval", args,
                    inputs=[str(args.dataset)] +
                           ([str(args.checkpoint)] if args.checkpoint else []),
                    outputs=[str(out_dir / "report.json"), str(out_dir / "report.txt")],
                    seed=None, wall=time.perf_counter() - t0)
    print(table)
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    t0 = time.perf_counter()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.reps < 3:
        raise DataError("reported benchmark runs need --reps >= 3")
    threads = _threads(args)
    granule = toydata.make_granule(args.granule_height, args.granule_width,
                                   bands=args.bands, seed=args.seed)
    if args.pipeline == "mf":
        if args.signature is None:
            raise DataError("--signature is required for the mf pipeline")
        sig = load_signature(args.signature)
        s = resample_signature(sig, granule.band_centers)
        pipeline = bench_mod.mf_pipeline(s, args.iterations, args.threshold,
                                         morph_kernel(args.kernel))
        name, params, post = f"mf[{args.iterations}it]", None, None
    else:
        if args.checkpoint is not None:
            arrays, config_dict, _ = load_checkpoint(args.checkpoint)
            config = ModelConfig.from_dict(config_dict)
            model = HyperspectralViT(config, seed=0)
            model.load_state_dict(arrays)
        else:
            config = ModelConfig(in_bands=granule.bands, variant=args.variant)
            model = HyperspectralViT(config, seed=args.seed)
        pipeline = bench_mod.model_pipeline(model)
        name = f"model[{config.variant}]"
        params = bench_mod.param_count(model)
        post = bench_mod.model_post
    report = bench_mod.time_pipeline(pipeline, granule, reps=args.reps,
                                     tile_size=args.tile_size, name=name,
                                     params=params, threads=threads, post=post)
    hours = bench_mod.daily_projection(report, args.granules_per_day)
    payload = report.to_dict() | {"granules_per_day": args.granules_per_day,
                                  "daily_hours": hours}
    with open(out_dir / "bench.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    table = bench_mod.format_table([report])
    with open(out_dir / "bench.txt", "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    _write_manifest(out_dir, "bench", args, inputs=[],
                    outputs=[str(out_dir / "bench.json")], seed=args.seed,
                    wall=time.perf_counter() - t0)
    print(table)
    print(f"daily projection at {args.granules_per_day} granules/day: {hours:.2f} h")
    return 0


# ---------------------------------------------------------------------------
# convert
# ---------------------------------------------------------------------------

def cmd_convert(args) -> int:
    t0 = time.perf_counter()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.action == "select-bands":
        cube = load_cube(args.cube)
        ranges = []
        for part in args.ranges.split(","):
            lo, hi = part.split("-")
            ranges.append((float(lo), float(hi)))
        save_cube(select_bands(cube, ranges), out)
        outputs = [str(out) + ".hdr.json"]
        print(f"convert: selected {load_cube(out).bands} bands -> {out}")
    else:  # aggregate-minerals
        with open(args.components, encoding="utf-8") as fh:
            entries = json.load(fh)
        ids = [e["id"] for e in entries]
        base = Path(args.components).parent
        masks = np.stack([load_mask(base / e["mask"]).values[:, :, 0] for e in entries])
        cmap = load_component_map(args.map)
        result = aggregate_minerals(masks, ids, cmap, args.mineral_class)
        save_mask(LabelMask(values=result[:, :, None]), out)
        outputs = [str(out) + ".hdr.json"]
        print(f"convert: class {args.mineral_class!r} has {int(result.sum())} pixels")
    out_dir = out.parent
    _write_manifest(out_dir, "convert", args, inputs=[], outputs=outputs,
                    seed=None, wall=time.perf_counter() - t0)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperseg",
                                     description="hyperspectral segmentation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="build a labeled synthetic event dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--signature", required=True, type=_existing_file)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--event-fraction", type=float, default=0.5)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--split", default="train")
    p.add_argument("--clean-dir", type=Path, default=None,
                   help="directory of clean cube pairs (default: generate toy tiles)")
    p.add_argument("--toy-tiles", type=int, default=10)
    p.add_argument("--tile-size", type=int, default=64)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mf", help="matched-filter baseline on one cube")
    p.add_argument("--cube", required=True, type=_existing_file)
    p.add_argument("--signature", required=True, type=_existing_file)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=DEFAULT_ITERATIONS)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--kernel", choices=["cross3", "ones3"], default="cross3")
    p.add_argument("--lambda", dest="reg_lambda", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_mf)

    p = sub.add_parser("train", help="train a segmenter on a dataset manifest")
    p.add_argument("--dataset", required=True, type=_existing_file)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--variant", default="base",
                   choices=["base", "convup", "convupstride"])
    p.add_argument("--spectral", action="store_true",
                   help="insert 1x1 spectral layers into every encoder block")
    p.add_argument("--stage-dims", default="16,32,64,128")
    p.add_argument("--decoder-dim", type=int, default=64)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=6e-5)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--no-oversample", action="store_true")
    p.add_argument("--mf-loss-weight", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="tile+stitch inference and metric report")
    p.add_argument("--dataset", required=True, type=_existing_file)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", type=_existing_file, default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--tile-size", type=int, default=64)
    p.add_argument("--overlap", type=int, default=32)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--class-names", default=None)
    p.add_argument("--strata", action="store_true",
                   help="report strong/weak F1 (plume task only)")
    p.add_argument("--oracle", action="store_true",
                   help="score the ground truth against itself (self-check)")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="granule-scale timing")
    p.add_argument("--pipeline", choices=["mf", "model"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--signature", type=_existing_file, default=None)
    p.add_argument("--checkpoint", type=_existing_file, default=None)
    p.add_argument("--variant", default="convup",
                   choices=["base", "convup", "convupstride"])
    p.add_argument("--granule-height", type=int, default=1280)
    p.add_argument("--granule-width", type=int, default=1242)
    p.add_argument("--bands", type=int, default=86)
    p.add_argument("--tile-size", type=int, default=128)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--iterations", type=int, default=DEFAULT_ITERATIONS)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--kernel", choices=["cross3", "ones3"], default="cross3")
    p.add_argument("--granules-per-day", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("convert", help="axis/mask utilities")
    p.add_argument("action", choices=["select-bands", "aggregate-minerals"])
    p.add_argument("--out", required=True)
    p.add_argument("--cube", type=_existing_file, default=None)
    p.add_argument("--ranges", default=None,
                   help='comma-separated nm ranges, e.g. "1573-1699,2004-2478"')
    p.add_argument("--components", type=_existing_file, default=None,
                   help="JSON list of {id, mask} entries")
    p.add_argument("--map", type=_existing_file, default=None)
    p.add_argument("--mineral-class", default=None)
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "convert":
        if args.action == "select-bands" and (args.cube is None or args.ranges is None):
            parser.error("select-bands requires --cube and --ranges")
        if args.action == "aggregate-minerals" and (
                args.components is None or args.map is None
                or args.mineral_class is None):
            parser.error("aggregate-minerals requires --components, --map "
                         "and --mineral-class")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
