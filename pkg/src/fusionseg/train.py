"""Single-frame pretraining and two-phase joint training through unrolled warps."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bench import evaluate
from .nets import Models, SingleFrameNet
from .optim import SGD, clip_grad_norm
from .pipeline import (
    PipelineConfig, PipelineState, intermediate_scores, keyframe_scores, propagate,
)
from .synthdata import VideoClip
from .tensor import Graph, Tensor, backward, cross_entropy_loss

LOG_COLUMNS = ("epoch", "phase", "mean_loss", "val_miou", "wall_seconds")


@dataclass
class PretrainConfig:
    steps: int = 1200
    batch: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 5.0
    cosine_decay: bool = True
    seed: int = 0


@dataclass
class TrainConfig:
    keyframe_interval: int = 5
    epochs: int = 30
    phase_one_fraction: float = 0.8
    lr: float = 5e-4
    momentum: float = 0.0
    clip_norm: float = 5.0
    seed: int = 0
    flow_source: str = "oracle"
    mode: str = "accel"
    train_ref_feat: bool = False
    train_ref_task: bool = True
    train_flow: bool = True
    log_wall_time: bool = True

    def __post_init__(self):
        if not 0.0 < self.phase_one_fraction < 1.0:
            raise ValueError(f"phase_one_fraction must be in (0, 1), got {self.phase_one_fraction}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.keyframe_interval < 1:
            raise ValueError(f"keyframe_interval must be >= 1, got {self.keyframe_interval}")
        if self.mode not in ("accel", "warp_only"):
            raise ValueError(f"joint training mode must be 'accel' or 'warp_only', got {self.mode!r}")

    @property
    def phase_boundary(self) -> int:
        """First epoch (0-based) of phase two."""
        return math.ceil(self.phase_one_fraction * self.epochs)

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(self.keyframe_interval, self.mode, self.flow_source)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def pretrain_singleframe(net: SingleFrameNet, clips: list[VideoClip],
                         cfg: PretrainConfig) -> list[float]:
    """Train a feature+task net on random labeled frames; returns per-step losses."""
    if not clips:
        raise ValueError("pretrain_singleframe: empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = net.parameters()
    for p in params:
        p.set_trainable(True)
    opt = SGD(params, cfg.lr, cfg.momentum)
    losses = []
    for step in range(cfg.steps):
        if cfg.cosine_decay:
            opt.lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))
        picks = [(int(rng.integers(len(clips))), None) for _ in range(cfg.batch)]
        picks = [(c, int(rng.integers(len(clips[c])))) for c, _ in picks]
        frames = Tensor(np.stack([clips[c].frames[t] for c, t in picks]))
        labels = np.stack([clips[c].labels[t] for c, t in picks]).astype(np.int64)
        with Graph() as g:
            loss = cross_entropy_loss(net(frames), labels)
        _check_finite(loss)
        backward(loss, g)
        clip_grad_norm(params, cfg.clip_norm)
        opt.step()
        losses.append(float(loss.data))
    return losses


def _check_finite(loss: Tensor) -> None:
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite training loss {float(loss.data)}")


# ---------------------------------------------------------------------------
# joint training
# ---------------------------------------------------------------------------

def build_training_sample(interval: int, labeled_index: int) -> tuple[int, list[int]]:
    """Keyframe index and frame window ending at the labeled frame.

    The keyframe is ``j - (n - 1)``, clamped to 0 near the clip start.
    """
    k = max(labeled_index - (interval - 1), 0)
    return k, list(range(k, labeled_index + 1))


def set_phase(models: Models, phase: int, cfg: TrainConfig) -> None:
    """Phase 1 trains only the fusion layer; phase 2 unfreezes the joint-training weights."""
    for p in models.parameters():
        p.set_trainable(False)
    if cfg.mode == "accel":
        models.fusion.set_trainable(True)
    if phase == 2 or cfg.mode == "warp_only":
        if cfg.train_ref_task or cfg.mode == "warp_only":
            models.ref_task.set_trainable(True)
        if cfg.mode == "accel":
            models.upd_feat.set_trainable(True)
            if models.upd_task is not None:
                models.upd_task.set_trainable(True)
        if models.flow is not None and cfg.train_flow:
            models.flow.set_trainable(True)
        if cfg.train_ref_feat:
            models.ref_feat.set_trainable(True)


def window_loss(models: Models, clip: VideoClip, interval: int, labeled_index: int,
                pipe: PipelineConfig, cache_hook=None) -> Tensor:
    """Cross-entropy on the labeled frame after running the window from its keyframe.

    Must be called inside an active :class:`Graph` to record gradients.
    Non-final window frames only advance the cache, since their outputs do
    not reach the loss. ``cache_hook`` may replace the keyframe cache (used
    to differentiate with respect to it).
    """
    k, window = build_training_sample(interval, labeled_index)
    if not window:
        raise ValueError("window shorter than 1 frame")
    frame_k = clip.frame(k)
    if len(window) == 1:
        scores, _ = keyframe_scores(frame_k, models)
        return cross_entropy_loss(scores, clip.labels[labeled_index].astype(np.int64))
    feats = models.ref_feat(frame_k)
    if cache_hook is not None:
        feats = cache_hook(feats)
    state = PipelineState(cache=feats, key_index=k, prev_frame=frame_k)
    oracle = pipe.flow_source == "oracle"
    for t in window[1:-1]:
        frame = clip.frame(t)
        cache = propagate(state, frame, models, pipe, clip.flow(t - 1) if oracle else None)
        state = PipelineState(cache=cache, key_index=k, prev_frame=frame)
    j = window[-1]
    scores, _ = intermediate_scores(clip.frame(j), state, models, pipe,
                                    clip.flow(j - 1) if oracle else None)
    return cross_entropy_loss(scores, clip.labels[j].astype(np.int64))


def joint_train_step(models: Models, clip: VideoClip, labeled_index: int, cfg: TrainConfig,
                     opt: SGD) -> float:
    with Graph() as g:
        loss = window_loss(models, clip, cfg.keyframe_interval, labeled_index, cfg.pipeline())
    _check_finite(loss)
    backward(loss, g)
    clip_grad_norm(opt.params, cfg.clip_norm)
    opt.step()
    return float(loss.data)


@dataclass
class TrainResult:
    log: list[dict]
    best_state: dict
    best_val_miou: float
    best_epoch: int
    phase_boundary: int
    extra: dict = field(default_factory=dict)

    def log_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in self.log:
            writer.writerow([row["epoch"], row["phase"], repr(row["mean_loss"]),
                             repr(row["val_miou"]), row["wall_seconds"]])
        return buf.getvalue()


def train(models: Models, clips: list[VideoClip], cfg: TrainConfig,
          val_clips: list[VideoClip] | None = None, log_path=None,
          on_epoch=None) -> TrainResult:
    """Seeded epochs over one window per clip; the phase switches at ``cfg.phase_boundary``.

    The models end in their best-by-validation state (last state when no
    validation clips are given).
    """
    rng = np.random.default_rng(cfg.seed)
    params = models.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum)
    pipe = cfg.pipeline()
    n = cfg.keyframe_interval
    log, best_state, best_miou, best_epoch = [], models.state_dict(), -1.0, -1
    if log_path is not None:
        Path(log_path).write_text(",".join(LOG_COLUMNS) + "\n")
    for epoch in range(cfg.epochs):
        phase = 1 if epoch < cfg.phase_boundary else 2
        set_phase(models, phase, cfg)
        start = time.perf_counter()
        order = rng.permutation(len(clips))
        losses = []
        for ci in order:
            clip = clips[ci]
            lo = min(n - 1, len(clip) - 1)
            j = int(rng.integers(lo, len(clip)))
            losses.append(joint_train_step(models, clip, j, cfg, opt))
        val = evaluate(models, val_clips, pipe).miou if val_clips else float("nan")
        wall = time.perf_counter() - start
        row = {"epoch": epoch, "phase": phase, "mean_loss": float(np.mean(losses)),
               "val_miou": val, "wall_seconds": f"{wall:.3f}" if cfg.log_wall_time else "nan"}
        log.append(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(f"{epoch},{phase},{row['mean_loss']!r},{val!r},{row['wall_seconds']}\n")
        if not val_clips or val > best_miou:
            best_miou, best_epoch, best_state = val, epoch, models.state_dict()
        if on_epoch is not None:
            on_epoch(epoch, models)
    for p in params:
        p.set_trainable(False)
    models.load_state_dict(best_state)
    return TrainResult(log, best_state, best_miou, best_epoch, cfg.phase_boundary)
