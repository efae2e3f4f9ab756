"""Command-line entry points: train, eval, ablate, viz, cost."""

from __future__ import annotations

import argparse
import json
import sys

from .config import RunConfig, load_config
from .fusenet import attention_cost
from .scenesynth import BEV_SHAPE, CAMERA_SHAPE


def _load_base_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "out", None):
        config.out_dir = args.out
    return config


def cmd_train(args):
    from .trainer import run_train

    config = _load_base_config(args)
    result = run_train(config)
    print(f"checkpoint: {result.checkpoint_path}")
    print(json.dumps(result.final_metrics))
    return 0


def cmd_eval(args):
    from .trainer import run_eval

    out_path = f"{args.out}/metrics.jsonl" if args.out else None
    if args.out:
        import os

        os.makedirs(args.out, exist_ok=True)
    summary, _ = run_eval(args.ckpt, split=args.split, rot_deg=args.rot,
                          trans_m=args.trans, out_path=out_path)
    print(json.dumps(summary))
    return 0


def cmd_ablate(args):
    from .trainer import run_ablation

    config = _load_base_config(args)
    results = run_ablation(config, args.axis, num_seeds=args.seeds,
                           out_dir=args.out or config.out_dir)
    for row in results:
        print(f"{args.axis} {row['row']}: "
              f"bev {row['bev_map_mean']:.2f}±{row['bev_map_std']:.2f}, "
              f"2d {row['map_2d_mean']:.2f}±{row['map_2d_std']:.2f}")
    return 0


def cmd_viz(args):
    from .viz import viz_attention

    cells = []
    for spec in args.query:
        iy, ix = (int(v) for v in spec.split(","))
        cells.append((iy, ix))
    written = viz_attention(args.ckpt, args.scene, cells,
                            args.out or "viz", split=args.split)
    for path in written:
        print(path)
    return 0


def cmd_cost(args):
    config = _load_base_config(args)
    chans = config.model.stage_channels
    print("per-stage single-view attention cost (H^2 W^2 C entries):")
    print(f"{'stage':>5} {'bev HxWxC':>14} {'bev entries':>14} "
          f"{'camera HxWxC':>14} {'camera entries':>16}")
    bh, bw = BEV_SHAPE[0], BEV_SHAPE[1]
    ch, cw = CAMERA_SHAPE[0], CAMERA_SHAPE[1]
    for s, c in enumerate(chans, start=1):
        bh, bw, ch, cw = bh // 2, bw // 2, ch // 2, cw // 2
        print(f"{s:>5} {f'{bh}x{bw}x{c}':>14} {attention_cost(bh, bw, c):>14,} "
              f"{f'{ch}x{cw}x{c}':>14} {attention_cost(ch, cw, c):>16,}")
    h, w, c = 8, 8, chans[-1]
    base = attention_cost(h, w, c)
    doubled = attention_cost(2 * h, 2 * w, c)
    print(f"\nresolution doubling: ({h},{w},{c}) -> {base:,} entries; "
          f"({2 * h},{2 * w},{c}) -> {doubled:,} entries "
          f"({doubled // base}x growth)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fusedet",
        description="Calibration-free two-view fusion detector on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--config", help="config file (key = value lines)")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", help="output directory")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="val")
    p_eval.add_argument("--rot", type=float, default=0.0, help="max rotation, degrees")
    p_eval.add_argument("--trans", type=float, default=0.0, help="max translation, meters")
    p_eval.add_argument("--out")
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="run one ablation axis")
    p_abl.add_argument("--axis", required=True,
                       choices=("fusion_stages", "task_weights",
                                "loss_weights", "robustness"))
    p_abl.add_argument("--config")
    p_abl.add_argument("--seed", type=int, default=None)
    p_abl.add_argument("--seeds", type=int, default=3, help="seeds per row")
    p_abl.add_argument("--out")
    p_abl.set_defaults(func=cmd_ablate)

    p_viz = sub.add_parser("viz", help="export attention maps as PGM images")
    p_viz.add_argument("--ckpt", required=True)
    p_viz.add_argument("--scene", type=int, default=0, help="scene index in the split")
    p_viz.add_argument("--split", choices=("train", "val", "test"), default="val")
    p_viz.add_argument("--query", action="append", default=[],
                       metavar="IY,IX", help="BEV query cell (repeatable)")
    p_viz.add_argument("--out")
    p_viz.set_defaults(func=cmd_viz)

    p_cost = sub.add_parser("cost", help="print the attention cost table")
    p_cost.add_argument("--config")
    p_cost.add_argument("--seed", type=int, default=None)
    p_cost.set_defaults(func=cmd_cost)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
