"""Command line entry point: ``pyramid-nerf <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 file-system error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


class _Parser(argparse.ArgumentParser):
    # bad flags are validation errors, not argparse's default exit status 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    from .pyramid import LEVEL_SELECTIONS, MODES
    from .scenes import SCENE_KINDS

    p = _Parser(prog="pyramid-nerf", description="Pyramid of grid radiance fields on CPU.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="render a procedural multiscale dataset")
    g.add_argument("--scene", choices=SCENE_KINDS, default="slanted_checkerboard", help="scene preset")
    g.add_argument("--out", required=True, type=Path, help="dataset directory to create")
    g.add_argument("--seed", type=int, default=0, help="camera and jitter seed")
    g.add_argument("--train-cams", type=_positive_int, default=40, help="number of training cameras")
    g.add_argument("--test-cams", type=_positive_int, default=10, help="number of test cameras")
    g.add_argument("--resolution", type=_positive_int, default=128, help="full-scale image side in pixels")
    g.add_argument("--supersample", type=_positive_int, default=64,
                   help="rays per pixel in the reference tracer (a perfect square)")

    def add_model_flags(sp):
        sp.add_argument("--levels", type=_positive_int, default=8, help="pyramid levels L (1 = plain grid model)")
        sp.add_argument("--mode", choices=MODES, default="default_interp", help="level combination mode")
        sp.add_argument("--level-selection", choices=LEVEL_SELECTIONS, default="projected_area",
                        help="footprint measure used to pick levels")
        grid = sp.add_mutually_exclusive_group()
        grid.add_argument("--shared-grid", dest="shared_grid", action="store_true", default=True,
                          help="all levels read one hash grid (default)")
        grid.add_argument("--separate-grids", dest="shared_grid", action="store_false",
                          help="each level owns its hash grid")

    def add_train_flags(sp):
        sp.add_argument("--iterations", type=int, default=3000, help="optimizer steps")
        sp.add_argument("--batch-rays", type=_positive_int, default=8192, help="rays per batch (upper bound)")
        sp.add_argument("--target-samples", type=_positive_int, default=None,
                        help="cap on evaluated samples per step; shrinks the ray batch to fit")
        sp.add_argument("--samples-per-ray", type=_positive_int, default=128, help="stratified samples per ray")
        sp.add_argument("--seed", type=int, default=0, help="initialisation and batching seed")
        sp.add_argument("--eval-every", type=int, default=0, help="test evaluation cadence (0 = end only)")

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True, type=Path, help="dataset directory")
    t.add_argument("--out", required=True, type=Path, help="run directory (checkpoint + metrics.csv)")
    add_model_flags(t)
    add_train_flags(t)
    t.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")

    e = sub.add_parser("eval", help="score a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True, type=Path, help="checkpoint file")
    e.add_argument("--data", required=True, type=Path, help="dataset directory")
    e.add_argument("--out", required=True, type=Path, help="report directory")

    r = sub.add_parser("render", help="render an orbit flythrough as numbered PNGs")
    r.add_argument("--checkpoint", required=True, type=Path, help="checkpoint file")
    r.add_argument("--out", required=True, type=Path, help="frame directory")
    r.add_argument("--frames", type=_positive_int, default=24, help="number of frames")
    r.add_argument("--resolution", type=_positive_int, default=128, help="frame side in pixels")
    r.add_argument("--radius", type=float, default=2.5, help="orbit radius")
    r.add_argument("--height", type=float, default=1.0, help="height above the orbit plane")

    a = sub.add_parser("ablate", help="train and score the mode x grid x selection matrix")
    a.add_argument("--data", required=True, type=Path, help="dataset directory")
    a.add_argument("--out", required=True, type=Path, help="output directory")
    a.add_argument("--levels", type=_positive_int, default=8, help="pyramid levels L")
    a.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES), help="modes to include")
    a.add_argument("--grids", nargs="+", choices=("shared", "separate"), default=["shared", "separate"],
                   help="grid layouts to include")
    a.add_argument("--selections", nargs="+", choices=LEVEL_SELECTIONS, default=list(LEVEL_SELECTIONS),
                   help="footprint measures to include")
    add_train_flags(a)
    return p


def _train_config(args):
    from .training import TrainConfig

    return TrainConfig(iterations=args.iterations, batch_rays=args.batch_rays, target_samples=args.target_samples,
                       samples_per_ray=args.samples_per_ray, seed=args.seed, eval_every=args.eval_every)


def run(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import ablate, evaluate, format_table, render_flythrough
    from .pyramid import PyramidConfig
    from .scenes import MultiscaleDataset, build_dataset, make_scene
    from .training import train

    if args.command == "generate-data":
        ds = build_dataset(make_scene(args.scene), args.train_cams, args.test_cams, args.resolution, args.seed,
                           args.out, args.supersample)
        print(f"wrote {len(ds.records)} images to {args.out}")
    elif args.command == "train":
        ds = MultiscaleDataset.load(args.data)
        cfg = PyramidConfig(L=args.levels, mode=args.mode, level_selection=args.level_selection)
        st = train(ds, cfg, _train_config(args), args.out, shared_grid=args.shared_grid, resume=args.resume)
        print(f"trained {st.iteration} iterations; checkpoint at {args.out / 'checkpoint.pyrf'}")
    elif args.command == "eval":
        ds = MultiscaleDataset.load(args.data)
        rep = evaluate(args.checkpoint, ds, args.out)
        for r in rep.rows + [rep.aggregate]:
            print(f"scale {r['scale']!s:>6}: PSNR {r['psnr']:.2f}  SSIM {r['ssim']:.4f}  "
                  f"avg_error_2 {r['avg_error_2']:.4f}")
    elif args.command == "render":
        st = load_checkpoint(args.checkpoint)
        paths = render_flythrough(st, args.out, args.frames, args.resolution, args.radius, args.height)
        print(f"wrote {len(paths)} frames to {args.out}")
    elif args.command == "ablate":
        ds = MultiscaleDataset.load(args.data)
        rows = ablate(ds, args.out, _train_config(args), args.modes, [g == "shared" for g in args.grids],
                      args.selections, levels=args.levels)
        print(format_table(rows))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        return run(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
