"""The desk-scale experiment: pretrain every depth, joint-train, then sweep and ablate.

One call to :func:`run_seed` produces everything the trend checks need
for one seed and caches it under ``out_dir/seed<k>/`` so reruns are free.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .bench import ablate, evaluate, mac_count
from .nets import DEPTHS, Models, NetConfig, SingleFrameNet, build_models, build_single_frame
from .pipeline import PipelineConfig
from .synthdata import GenParams, gen_dataset
from .train import PretrainConfig, TrainConfig, pretrain_singleframe, train

RESULTS_VERSION = 1


@dataclass
class DeskConfig:
    gen: GenParams = field(default_factory=GenParams)
    net: NetConfig = field(default_factory=NetConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_clips: int = 200
    eval_clips: int = 50
    val_clips: int = 20
    intervals: tuple[int, ...] = tuple(range(1, 11))
    depths: tuple[str, ...] = DEPTHS

    def to_dict(self) -> dict:
        out = asdict(self)
        out["intervals"] = list(self.intervals)
        out["depths"] = list(self.depths)
        return out


def datasets(cfg: DeskConfig, seed: int):
    """Disjoint train / validation / evaluation clip sets for one seed."""
    base = replace(cfg.gen, seed=0)
    root = 1_000_000 * (seed + 1)
    return (gen_dataset(base, cfg.train_clips, root),
            gen_dataset(base, cfg.val_clips, root + 200_000),
            gen_dataset(base, cfg.eval_clips, root + 400_000))


def single_frame_state(net: SingleFrameNet) -> dict:
    return {**{"feat." + k: v for k, v in net.feat.state_dict().items()},
            **{"task." + k: v for k, v in net.task.state_dict().items()}}


def load_single_frame(net: SingleFrameNet, state: dict) -> None:
    net.feat.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("feat.")})
    net.task.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("task.")})


def assemble(cfg: NetConfig, ref: SingleFrameNet, upd: SingleFrameNet | None, seed: int = 0) -> Models:
    """Two-branch models initialised from pretrained single-frame nets."""
    models = build_models(cfg, seed=seed)
    models.ref_feat.load_state_dict(ref.feat.state_dict())
    models.ref_task.load_state_dict(ref.task.state_dict())
    if upd is not None:
        models.upd_feat.load_state_dict(upd.feat.state_dict())
        if models.upd_task is not None:
            models.upd_task.load_state_dict(upd.task.state_dict())
    return models


def pretrained(cfg: DeskConfig, depth: str, seed: int, clips, cache_dir: Path) -> SingleFrameNet:
    path = cache_dir / f"single_{depth}.ckpt"
    net = build_single_frame(cfg.net, depth, seed=seed * 100 + DEPTHS.index(depth))
    pcfg = replace(cfg.pretrain, seed=seed * 100 + DEPTHS.index(depth))
    if path.exists():
        state, meta = checkpoint.load(path)
        if meta.get("pretrain") == asdict(pcfg):
            load_single_frame(net, state)
            return net
    losses = pretrain_singleframe(net, clips, pcfg)
    checkpoint.save(path, single_frame_state(net),
                    {"depth": depth, "final_loss": losses[-1], "pretrain": asdict(pcfg)})
    return net


def _finite_log(log: list[dict]) -> bool:
    return all(math.isfinite(r["mean_loss"]) and math.isfinite(r["val_miou"]) for r in log)


def run_seed(cfg: DeskConfig, seed: int, out_dir, threads: int = 1, log=print) -> dict:
    """All trend measurements for one seed; cached as ``results.json``."""
    cache = Path(out_dir) / f"seed{seed}"
    cache.mkdir(parents=True, exist_ok=True)
    result_path = cache / "results.json"
    key = {"version": RESULTS_VERSION, "seed": seed, "config": cfg.to_dict()}
    if result_path.exists():
        stored = json.loads(result_path.read_text())
        if stored.get("key") == key:
            return stored
    trn, val, ev = datasets(cfg, seed)
    out: dict = {"key": key, "single_frame": {}, "warp_only": {}, "accel": {},
                 "accel_init": {}, "ablation": {}, "finite": True}
    nets = {}
    for depth in cfg.depths:
        log(f"[seed {seed}] pretrain {depth}")
        nets[depth] = pretrained(cfg, depth, seed, trn, cache)
        sf = assemble(replace(cfg.net, reference_depth=depth), nets[depth], None)
        out["single_frame"][depth] = evaluate(sf, ev, PipelineConfig(1, "single_frame"),
                                              threads=threads).miou
    ref = nets[cfg.net.reference_depth]
    tcfg = replace(cfg.train, seed=seed)

    log(f"[seed {seed}] joint-train warp_only")
    dff = assemble(cfg.net, ref, None)
    res = train(dff, trn, replace(tcfg, mode="warp_only"), val_clips=val)
    out["finite"] &= _finite_log(res.log)
    dff.save(cache / "warp_only.ckpt")
    for n in cfg.intervals:
        out["warp_only"][str(n)] = evaluate(dff, ev, PipelineConfig(n, "warp_only"),
                                            threads=threads).miou

    for depth in cfg.depths:
        log(f"[seed {seed}] joint-train accel-{depth}")
        ncfg = replace(cfg.net, update_depth=depth)
        models = assemble(ncfg, ref, nets[depth])
        out["accel_init"][depth] = evaluate(models, ev, PipelineConfig(5, "accel"), threads=threads).miou
        # every variant keeps the shared reference branch untouched
        res = train(models, trn, replace(tcfg, mode="accel", train_ref_task=False), val_clips=val)
        out["finite"] &= _finite_log(res.log)
        models.save(cache / f"accel_{depth}.ckpt")
        (cache / f"train_log_{depth}.csv").write_text(res.log_csv())
        out["accel"][depth] = {str(n): evaluate(models, ev, PipelineConfig(n, "accel"),
                                                threads=threads).miou for n in cfg.intervals}
        out["ablation"][depth] = {r["row"]: r["miou"] for r in ablate(models, ev, threads=threads)}
    result_path.write_text(json.dumps(out, indent=1, sort_keys=True))
    return out


def median_over_seeds(results: list[dict], *path) -> float:
    vals = []
    for r in results:
        v = r
        for p in path:
            v = v[p]
        vals.append(v)
    return float(np.median(vals))


def cost_summary(net: NetConfig, h: int = 64, w: int = 64, interval: int = 5) -> dict:
    """MACs per intermediate frame and blended MACs per frame for the headline variants."""
    sf101 = mac_count(replace(net, reference_depth="T101"), PipelineConfig(1, "single_frame"), h, w)
    wo = mac_count(net, PipelineConfig(interval, "warp_only"), h, w)
    ac = mac_count(replace(net, update_depth="T18"), PipelineConfig(interval, "accel"), h, w)
    return {"warp_only_inter": wo.intermediate, "accel_T18_inter": ac.intermediate,
            "single_T101": sf101.keyframe, "accel_T18_blended": ac.blended(interval)}


def summarize(results: list[dict]) -> list[str]:
    """Human-readable 3-seed medians of every trend quantity (mIoU in points)."""
    # cached results.json files store their keys sorted as strings
    depths = [d for d in DEPTHS if d in results[0]["single_frame"]]
    ns = [str(n) for n in sorted(int(k) for k in results[0]["warp_only"])]
    med = lambda *p: 100 * median_over_seeds(results, *p)  # noqa: E731
    lines = ["single_frame " + " ".join(f"{d}={med('single_frame', d):.2f}" for d in depths)]
    lines.append("warp_only    " + " ".join(f"n{n}={med('warp_only', n):.2f}" for n in ns))
    for d in depths:
        lines.append(f"accel-{d:<6} " + " ".join(f"n{n}={med('accel', d, n):.2f}" for n in ns))
    for d in depths:
        lines.append(f"ablation-{d:<4} " + " ".join(
            f"{k}={med('ablation', d, k):.2f}" for k in ("reference", "update", "both")))
    return lines
