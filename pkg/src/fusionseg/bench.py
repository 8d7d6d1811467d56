"""Evaluation protocols, cost accounting and the sweep/ablation/fusion experiments."""
from __future__ import annotations

import csv
import io
import multiprocessing as mp
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .costs import FrameCosts, frame_costs
from .metrics import RunMetrics
from .nets import Models, NetConfig
from .pipeline import PipelineConfig, run_clip, schedule_eval_offsets
from .synthdata import VideoClip

SWEEP_COLUMNS = ("mode", "depth", "n", "miou", "macs_per_frame", "s_per_frame")
TABLE_COLUMNS = ("row", "miou", "macs_per_frame")


def mac_count(net: NetConfig, pipe: PipelineConfig, h: int = 64, w: int = 64) -> FrameCosts:
    """Exact MACs for one keyframe and one intermediate frame."""
    net.check_frame(h, w)
    return frame_costs(net, pipe.mode, h, w, pipe.flow_source, pipe.branch)


def _first_keyframe(pipe: PipelineConfig, ordinal: int, j: int, protocol: str,
                    offset: int | None) -> int:
    n = 1 if pipe.mode == "single_frame" else pipe.keyframe_interval
    if protocol == "dense":
        return 0
    if offset is not None:
        if not 0 <= offset < n or offset > j:
            raise ValueError(f"offset {offset} not reachable with n={n}, labeled frame {j}")
        return j - offset
    return schedule_eval_offsets(n, ordinal, j)


def _eval_clip(models: Models, clip: VideoClip, ordinal: int, pipe: PipelineConfig,
               protocol: str, labeled_index: int | None, offset: int | None) -> RunMetrics:
    j = len(clip) - 1 if labeled_index is None else labeled_index
    t0 = _first_keyframe(pipe, ordinal, j, protocol, offset)
    last = len(clip) - 1 if protocol == "dense" else j
    run = run_clip(clip, pipe, models, first_keyframe=t0, last_frame=last)
    met = RunMetrics(models.config.num_classes, interval=pipe.keyframe_interval)
    for t in range(t0, last + 1):
        met.add_cost(run.kinds[t], run.macs[t], run.seconds[t])
    scored = range(t0, last + 1) if protocol == "dense" else (j,)
    for t in scored:
        met.add(run.segs[t], clip.labels[t])
    return met


# state inherited by forked evaluation workers
_JOB = None


def _worker(ordinal: int) -> RunMetrics:
    models, clips, args = _JOB
    return _eval_clip(models, clips[ordinal], ordinal, *args)


def evaluate(models: Models, clips: list[VideoClip], pipe: PipelineConfig,
             protocol: str = "sparse", labeled_index: int | None = None,
             offset: int | None = None, threads: int = 1) -> RunMetrics:
    """Run every clip through the pipeline and aggregate IoU counts and costs.

    ``sparse`` scores one labeled frame per clip (the last by default) with
    the keyframe distance rotating over clips, or pinned to ``offset``.
    ``dense`` runs each clip from keyframe 0 and scores every frame.
    Per-clip results are reduced in clip order, so the counts do not
    depend on ``threads``.
    """
    global _JOB
    if protocol not in ("sparse", "dense"):
        raise ValueError(f"protocol must be 'sparse' or 'dense', got {protocol!r}")
    if pipe.flow_source == "learned" and models.flow is None:
        raise ValueError("pipeline wants learned flow but the checkpoint has no flow network")
    if not clips:
        raise ValueError("evaluate: no clips")
    models.config.check_frame(*clips[0].frames.shape[2:])
    args = (pipe, protocol, labeled_index, offset)
    if threads > 1 and len(clips) > 1:
        _JOB = (models, clips, args)
        try:
            with mp.get_context("fork").Pool(threads) as pool:
                parts = pool.map(_worker, range(len(clips)))
        finally:
            _JOB = None
    else:
        parts = [_eval_clip(models, c, i, *args) for i, c in enumerate(clips)]
    total = RunMetrics(models.config.num_classes, interval=pipe.keyframe_interval)
    for part in parts:
        total.merge(part)
    return total


def evaluate_predictor(predict, clips: list[VideoClip], num_classes: int,
                       labeled_index: int | None = None) -> RunMetrics:
    """Sparse mIoU for an arbitrary ``predict(clip, t) -> label map``."""
    met = RunMetrics(num_classes)
    for clip in clips:
        j = len(clip) - 1 if labeled_index is None else labeled_index
        met.add(predict(clip, j), clip.labels[j])
    return met


def endpoint_error(flow_net, clips: list[VideoClip]) -> float:
    """Mean Euclidean distance between predicted and ground-truth flow over all frame pairs."""
    if not clips:
        raise ValueError("endpoint_error: no clips")
    total, count = 0.0, 0
    for clip in clips:
        for t in range(1, len(clip)):
            pred = flow_net(clip.frame(t - 1), clip.frame(t)).data[0]
            total += float(np.sqrt(((pred - clip.flows[t - 1]) ** 2).sum(axis=0)).sum())
            count += pred.shape[1] * pred.shape[2]
    return total / count


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    """A grid over modes, update depths and keyframe intervals."""

    intervals: tuple[int, ...] = tuple(range(1, 11))
    modes: tuple[str, ...] = ("accel", "warp_only", "single_frame")
    depths: tuple[str, ...] = ("T18", "T34", "T50", "T101")
    dataset: str | None = None
    checkpoints: dict = field(default_factory=dict)
    out_dir: str | None = None
    seed: int = 0

    def __post_init__(self):
        if not (self.intervals and self.modes and self.depths):
            raise ValueError("experiment grid must be nonempty")
        if min(self.intervals) < 1:
            raise ValueError(f"keyframe intervals must be >= 1, got {self.intervals}")


def sweep(variants: list[tuple[str, str, Models]], clips: list[VideoClip],
          intervals, threads: int = 1) -> list[dict]:
    """One row per (mode, depth, n). ``variants`` holds (mode, depth, models).

    single_frame rows do not depend on n and are evaluated once per depth.
    """
    rows = []
    for mode, depth, models in variants:
        cached = None
        for n in intervals:
            pipe = PipelineConfig(keyframe_interval=n, mode=mode)
            if mode == "single_frame":
                cached = cached or evaluate(models, clips, pipe, threads=threads)
                met = cached
            else:
                met = evaluate(models, clips, pipe, threads=threads)
            rows.append({"mode": mode, "depth": depth, "n": n, "miou": met.miou,
                         "macs_per_frame": float(mac_count(models.config, pipe).blended(n)),
                         "s_per_frame": met.seconds_per_frame})
    return rows


def ablation_branch(mask_reference: bool, mask_update: bool) -> str:
    """Pipeline branch setting for masking one input of the fusion layer."""
    if mask_reference and mask_update:
        raise ValueError("masking both branches leaves no prediction path")
    if mask_reference:
        return "update"
    if mask_update:
        return "reference"
    return "both"


def ablate(models: Models, clips: list[VideoClip], interval: int = 5, offset: int = 4,
           threads: int = 1) -> list[dict]:
    """Reference-only, update-only and fused rows at a pinned keyframe offset."""
    rows = []
    for label, masks in (("reference", (False, True)), ("update", (True, False)),
                         ("both", (False, False))):
        pipe = PipelineConfig(interval, "accel", branch=ablation_branch(*masks))
        met = evaluate(models, clips, pipe, offset=offset, threads=threads)
        rows.append({"row": label, "miou": met.miou,
                     "macs_per_frame": float(mac_count(models.config, pipe).blended(interval))})
    return rows


def compare_fusion_location(by_location: dict[str, Models], clips: list[VideoClip],
                            interval: int = 5, offset: int = 4, threads: int = 1) -> list[dict]:
    """Rows (location, mIoU, MACs/frame), sorted by location name."""
    rows = []
    for location in sorted(by_location):
        models = by_location[location]
        if models.config.fusion_location != location:
            raise ValueError(f"checkpoint for {location!r} uses {models.config.fusion_location!r} fusion")
        pipe = PipelineConfig(interval, "accel")
        met = evaluate(models, clips, pipe, offset=offset, threads=threads)
        rows.append({"row": location, "miou": met.miou,
                     "macs_per_frame": float(mac_count(models.config, pipe).blended(interval))})
    return rows


def rows_to_csv(rows: list[dict], columns, timing: bool = True) -> str:
    """CSV text with fixed column order; floats use repr so reruns are byte-identical.

    With ``timing=False`` the wall-clock column is written as ``nan``.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        out = []
        for col in columns:
            v = row[col]
            if col == "s_per_frame" and not timing:
                v = "nan"
            out.append(repr(v) if isinstance(v, float) else v)
        writer.writerow(out)
    return buf.getvalue()


def write_csv(path, rows: list[dict], columns, timing: bool = True) -> None:
    Path(path).write_text(rows_to_csv(rows, columns, timing))


def metrics_row(met: RunMetrics) -> dict:
    return {"miou": met.miou, "frames": met.frames,
            "macs_per_keyframe": met.macs_per_keyframe,
            "macs_per_intermediate": met.macs_per_intermediate,
            "macs_per_frame": met.macs_per_frame, "s_per_frame": met.seconds_per_frame,
            **{f"iou_{k}": float(v) for k, v in enumerate(met.iou)}}

