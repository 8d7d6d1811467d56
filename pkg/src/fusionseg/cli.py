"""Command-line entry point: ``fusionseg <subcommand> [--config F] [--seed K] [--out DIR] [--threads K]``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import bench, checkpoint, experiment, plots
from .config import Config, ConfigError, load_config
from .nets import DEPTHS, Models, build_models, build_single_frame
from .synthdata import DatasetError, load_dataset, save_dataset
from .train import pretrain_singleframe, train

SPLITS = ("train", "val", "eval")


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    return cfg.with_seed(args.seed)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(out: Path, name: str):
    path = out / f"{name}.fsd"
    if not path.exists():
        raise SystemExit(f"{path} not found; run `fusionseg gen-data` first")
    return load_dataset(path)


def _single(cfg: Config, out: Path, depth: str):
    path = out / f"single_{depth}.ckpt"
    if not path.exists():
        raise SystemExit(f"{path} not found; run `fusionseg pretrain --depth {depth}` first")
    net = build_single_frame(cfg.net, depth)
    experiment.load_single_frame(net, checkpoint.load(path)[0])
    return net


def _load_models(path) -> Models:
    try:
        return Models.load(path)
    except (OSError, checkpoint.CheckpointError, KeyError, ValueError) as exc:
        raise SystemExit(f"cannot load checkpoint {path}: {exc}")


def cmd_gen_data(args) -> None:
    cfg, out = _config(args), _out(args)
    for name, clips in zip(SPLITS, experiment.datasets(cfg.desk(), args.seed)):
        save_dataset(clips, out / f"{name}.fsd")
        print(f"wrote {len(clips)} clips to {out / f'{name}.fsd'}")


def cmd_pretrain(args) -> None:
    cfg, out = _config(args), _out(args)
    clips = _split(out, "train")
    depths = args.depth or list(dict.fromkeys((*cfg.experiment.depths, cfg.net.reference_depth)))
    for depth in depths:
        net = build_single_frame(cfg.net, depth, seed=args.seed * 100 + DEPTHS.index(depth))
        losses = pretrain_singleframe(net, clips, replace(cfg.pretrain, seed=args.seed * 100 + DEPTHS.index(depth)))
        checkpoint.save(out / f"single_{depth}.ckpt", experiment.single_frame_state(net),
                        {"depth": depth, "final_loss": losses[-1]})
        print(f"{depth}: final loss {losses[-1]:.4f}")


def cmd_train(args) -> None:
    cfg, out = _config(args), _out(args)
    trn, val = _split(out, "train"), _split(out, "val")
    tcfg = replace(cfg.train, keyframe_interval=cfg.pipeline.keyframe_interval,
                   flow_source=cfg.pipeline.flow_source)
    ref = _single(cfg, out, cfg.net.reference_depth)
    upd = _single(cfg, out, cfg.net.update_depth) if tcfg.mode == "accel" else None
    models = experiment.assemble(cfg.net, ref, upd)
    if tcfg.flow_source == "learned":
        models.flow = build_models(cfg.net, seed=args.seed, learned_flow=True).flow
    res = train(models, trn, tcfg, val_clips=val, log_path=out / "train_log.csv")
    name = "warp_only" if tcfg.mode == "warp_only" else f"accel_{cfg.net.update_depth}"
    if cfg.net.fusion_location == "feature":
        name += "_feature"
    models.save(out / f"{name}.ckpt")
    print(f"best val mIoU {100 * res.best_val_miou:.2f} at epoch {res.best_epoch}; wrote {out / name}.ckpt")


def cmd_eval(args) -> None:
    cfg, out = _config(args), _out(args)
    models = _load_models(args.checkpoint)
    if models.config.num_classes != cfg.gen.num_classes:
        raise SystemExit("checkpoint class count does not match the dataset")
    met = bench.evaluate(models, _split(out, "eval"), cfg.pipeline,
                         protocol="dense" if args.dense else "sparse", threads=args.threads)
    row = bench.metrics_row(met)
    cols = tuple(row)
    bench.write_csv(out / "metrics.csv", [row], cols, timing=not args.no_timing)
    print(bench.rows_to_csv([row], cols, timing=not args.no_timing), end="")


def _sweep_variants(cfg: Config, out: Path):
    variants = []
    for mode in cfg.experiment.modes:
        if mode == "warp_only":
            variants.append((mode, cfg.net.reference_depth, _load_models(out / "warp_only.ckpt")))
            continue
        for depth in cfg.experiment.depths:
            if mode == "accel":
                variants.append((mode, depth, _load_models(out / f"accel_{depth}.ckpt")))
            else:
                net = replace(cfg.net, reference_depth=depth)
                variants.append((mode, depth, experiment.assemble(net, _single(cfg, out, depth), None)))
    return variants


def cmd_sweep(args) -> None:
    cfg, out = _config(args), _out(args)
    rows = bench.sweep(_sweep_variants(cfg, out), _split(out, "eval"), cfg.experiment.intervals,
                       threads=args.threads)
    bench.write_csv(out / "sweep.csv", rows, bench.SWEEP_COLUMNS, timing=not args.no_timing)
    plots.sweep_plots(rows, out)
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}, curves.svg, pareto.svg")


def cmd_ablate(args) -> None:
    cfg, out = _config(args), _out(args)
    clips = _split(out, "eval")
    rows = []
    for path in args.checkpoint:
        models = _load_models(path)
        for r in bench.ablate(models, clips, cfg.pipeline.keyframe_interval, args.offset, args.threads):
            rows.append({**r, "row": f"{models.config.update_depth}/{r['row']}"})
    bench.write_csv(out / "ablation.csv", rows, bench.TABLE_COLUMNS)
    print(bench.rows_to_csv(rows, bench.TABLE_COLUMNS), end="")


def cmd_fusion_compare(args) -> None:
    cfg, out = _config(args), _out(args)
    by_loc = {"score": _load_models(args.score), "feature": _load_models(args.feature)}
    rows = bench.compare_fusion_location(by_loc, _split(out, "eval"), cfg.pipeline.keyframe_interval,
                                         args.offset, args.threads)
    bench.write_csv(out / "fusion.csv", rows, bench.TABLE_COLUMNS)
    print(bench.rows_to_csv(rows, bench.TABLE_COLUMNS), end="")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs/default", help="working / output directory")
    common.add_argument("--threads", type=int, default=1, help="evaluation worker processes")
    ap = argparse.ArgumentParser(prog="fusionseg", description="corrective-fusion video segmentation")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write train/val/eval clip sets").set_defaults(fn=cmd_gen_data)
    p = sub.add_parser("pretrain", parents=[common], help="pretrain single-frame nets")
    p.add_argument("--depth", action="append", choices=DEPTHS)
    p.set_defaults(fn=cmd_pretrain)
    sub.add_parser("train", parents=[common], help="two-phase joint training").set_defaults(fn=cmd_train)
    p = sub.add_parser("eval", parents=[common], help="evaluate one checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dense", action="store_true", help="score every frame, not one per clip")
    p.add_argument("--no-timing", action="store_true", help="write nan for wall-clock columns")
    p.set_defaults(fn=cmd_eval)
    p = sub.add_parser("sweep", parents=[common], help="mIoU/MACs over modes, depths and intervals")
    p.add_argument("--no-timing", action="store_true", help="write nan for wall-clock columns")
    p.set_defaults(fn=cmd_sweep)
    p = sub.add_parser("ablate", parents=[common], help="reference-only / update-only / fused rows")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--offset", type=int, default=4)
    p.set_defaults(fn=cmd_ablate)
    p = sub.add_parser("fusion-compare", parents=[common], help="score vs feature fusion")
    p.add_argument("--score", required=True)
    p.add_argument("--feature", required=True)
    p.add_argument("--offset", type=int, default=4)
    p.set_defaults(fn=cmd_fusion_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
