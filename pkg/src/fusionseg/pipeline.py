"""Keyframe scheduling and the per-frame two-branch operation model."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .costs import frame_costs
from .nets import Models, output_block
from .synthdata import VideoClip
from .tensor import Tensor
from .warp import downscale_flow, warp

MODES = ("accel", "warp_only", "single_frame")
BRANCHES = ("both", "reference", "update")


@dataclass
class PipelineConfig:
    keyframe_interval: int = 5
    mode: str = "accel"
    flow_source: str = "oracle"
    branch: str = "both"  # ablation mask at the fusion input

    def __post_init__(self):
        if self.keyframe_interval < 1:
            raise ValueError(f"keyframe_interval must be >= 1, got {self.keyframe_interval}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.flow_source not in ("oracle", "learned"):
            raise ValueError(f"flow_source must be 'oracle' or 'learned', got {self.flow_source!r}")
        if self.branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}, got {self.branch!r}")


@dataclass
class PipelineState:
    cache: Tensor | None = None
    key_index: int = -1
    prev_frame: Tensor | None = None


class PipelineError(RuntimeError):
    pass


def keyframe_scores(frame: Tensor, models: Models) -> tuple[Tensor, Tensor]:
    """(scores, reference features) of the full reference network."""
    h, w = frame.shape[2:]
    models.config.check_frame(h, w)
    feats = models.ref_feat(frame)
    return models.ref_task(feats, h, w), feats


def update_scores(frame: Tensor, models: Models) -> Tensor:
    h, w = frame.shape[2:]
    return models.upd_task(models.upd_feat(frame), h, w)


def propagate(state: PipelineState, frame: Tensor, models: Models, config: PipelineConfig,
              flow: Tensor | None = None) -> Tensor:
    """Warp the cache from the previous frame onto ``frame``; returns the new cache."""
    if state.cache is None or state.prev_frame is None:
        raise PipelineError("intermediate frame before any keyframe: no cached features")
    if config.flow_source == "learned":
        if models.flow is None:
            raise PipelineError("flow_source='learned' but the models carry no flow network")
        flow = models.flow(state.prev_frame, frame)
    elif flow is None:
        raise PipelineError("flow_source='oracle' needs the ground-truth flow for this step")
    return warp(state.cache, downscale_flow(flow, models.config.feature_stride))


def intermediate_scores(frame: Tensor, state: PipelineState, models: Models,
                        config: PipelineConfig, flow: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """(fused scores, new cache) for a non-keyframe."""
    h, w = frame.shape[2:]
    cache = propagate(state, frame, models, config, flow)
    if config.mode == "warp_only" or config.branch == "reference":
        return models.ref_task(cache, h, w), cache
    if config.branch == "update":
        return update_scores(frame, models), cache
    if models.config.fusion_location == "feature":
        fused = models.fusion(cache, models.upd_feat(frame))
        return models.ref_task(fused, h, w), cache
    s_ref = models.ref_task(cache, h, w)
    return models.fusion(s_ref, update_scores(frame, models)), cache


def run_keyframe(frame: Tensor, state: PipelineState, models: Models,
                 index: int = 0) -> tuple[np.ndarray, PipelineState]:
    scores, feats = keyframe_scores(frame, models)
    _, seg = output_block(scores)
    return seg, PipelineState(cache=feats, key_index=index, prev_frame=frame)


def run_intermediate(frame: Tensor, state: PipelineState, models: Models, config: PipelineConfig,
                     flow: Tensor | None = None) -> tuple[np.ndarray, PipelineState]:
    scores, cache = intermediate_scores(frame, state, models, config, flow)
    _, seg = output_block(scores)
    return seg, replace(state, cache=cache, prev_frame=frame)


def is_keyframe(t: int, first_keyframe: int, interval: int) -> bool:
    return t >= first_keyframe and (t - first_keyframe) % interval == 0


def schedule_eval_offsets(interval: int, clip_ordinal: int, labeled_index: int) -> int:
    """First keyframe t_0 so the labeled frame sits ``clip_ordinal mod n`` frames past a keyframe.

    Offsets the clip cannot reach (labeled frame too early) are clamped to
    the labeled index itself, i.e. keyframe 0.
    """
    if interval < 1:
        raise ValueError(f"interval must be >= 1, got {interval}")
    offset = min(clip_ordinal % interval, labeled_index)
    return (labeled_index - offset) % interval


@dataclass
class ClipRun:
    segs: dict[int, np.ndarray]
    kinds: dict[int, str]
    seconds: dict[int, float]
    macs: dict[int, int]
    first_keyframe: int
    ref_feat_calls: int = 0
    extra: dict = field(default_factory=dict)


def run_clip(clip: VideoClip, config: PipelineConfig, models: Models, first_keyframe: int = 0,
             last_frame: int | None = None) -> ClipRun:
    """Segment frames ``first_keyframe .. last_frame`` of ``clip``.

    Frame t is a keyframe iff (t - first_keyframe) mod n == 0. In
    single_frame mode every frame runs the reference network.
    """
    if len(clip) == 0:
        raise PipelineError("empty clip")
    last = len(clip) - 1 if last_frame is None else last_frame
    n = 1 if config.mode == "single_frame" else config.keyframe_interval
    h, w = clip.frames.shape[2:]
    costs = frame_costs(models.config, config.mode, h, w, config.flow_source, config.branch)
    calls_before = models.ref_feat.calls
    run = ClipRun({}, {}, {}, {}, first_keyframe)
    state = PipelineState()
    for t in range(first_keyframe, last + 1):
        frame = clip.frame(t)
        start = time.perf_counter()
        if config.branch == "update":
            _, seg = output_block(update_scores(frame, models))
            kind = "keyframe" if is_keyframe(t, first_keyframe, n) else "intermediate"
        elif is_keyframe(t, first_keyframe, n):
            seg, state = run_keyframe(frame, state, models, t)
            kind = "keyframe"
        else:
            flow = clip.flow(t - 1) if config.flow_source == "oracle" else None
            seg, state = run_intermediate(frame, state, models, config, flow)
            kind = "intermediate"
        run.seconds[t] = time.perf_counter() - start
        run.segs[t] = seg
        run.kinds[t] = kind
        run.macs[t] = costs.keyframe if kind == "keyframe" else costs.intermediate
    run.ref_feat_calls = models.ref_feat.calls - calls_before
    return run
