"""Analytic multiply-accumulate counts for every frame path.

Counted operators: convolutions (c_out * c_in * k^2 per output pixel),
per-channel transposed convolutions (k^2 per input cell of the padded
input), bilinear warping (4 per output element) and average pooling (1 per
input element). ReLU, additions, softmax and argmax are free.
"""
from __future__ import annotations

from dataclasses import dataclass

from .nets import DEPTH_BLOCKS, MiniFlowNet, NetConfig


def conv_macs(c_in: int, c_out: int, k: int, oh: int, ow: int) -> int:
    return c_out * c_in * k * k * oh * ow


def _down(size: int, stride: int) -> int:
    # 3x3 conv, pad 1
    return (size + 2 - 3) // stride + 1


def feature_net_macs(cfg: NetConfig, depth: str, h: int, w: int) -> int:
    Cf, s = cfg.feature_channels, cfg.feature_stride
    n_down = max(int(s).bit_length() - 1, 1) if s > 1 else 1
    total, c_in = 0, 3
    for i in range(n_down):
        c_out = Cf if i == n_down - 1 else Cf // 2
        stride = 2 if s > 1 else 1
        h, w = _down(h, stride), _down(w, stride)
        total += conv_macs(c_in, c_out, 3, h, w)
        c_in = c_out
    return total + DEPTH_BLOCKS[depth] * 2 * conv_macs(Cf, Cf, 3, h, w)


def upsample_macs(channels: int, factor: int, fh: int, fw: int) -> int:
    if factor == 1:
        return channels * fh * fw
    return channels * (fh + 2) * (fw + 2) * (2 * factor) ** 2


def task_net_macs(cfg: NetConfig, h: int, w: int) -> int:
    Cf, C, s = cfg.feature_channels, cfg.num_classes, cfg.feature_stride
    fh, fw = h // s, w // s
    return (conv_macs(Cf, Cf // 2, 1, fh, fw) + conv_macs(Cf // 2, C, 1, fh, fw)
            + upsample_macs(C, s, fh, fw))


def fusion_macs(cfg: NetConfig, h: int, w: int) -> int:
    if cfg.fusion_location == "score":
        return conv_macs(2 * cfg.num_classes, cfg.num_classes, 1, h, w)
    s = cfg.feature_stride
    return conv_macs(2 * cfg.feature_channels, cfg.feature_channels, 1, h // s, w // s)


def warp_macs(cfg: NetConfig, h: int, w: int) -> int:
    s = cfg.feature_stride
    return 4 * cfg.feature_channels * (h // s) * (w // s)


def flow_net_macs(h: int, w: int, width: int = 16) -> int:
    h2, w2 = _down(h, 2), _down(w, 2)
    h4, w4 = _down(h2, 2), _down(w2, 2)
    return (conv_macs(6, width, 3, h2, w2) + conv_macs(width, 2 * width, 3, h4, w4)
            + conv_macs(2 * width, 2 * width, 3, h4, w4) + conv_macs(2 * width, 2, 3, h4, w4)
            + upsample_macs(2, MiniFlowNet.stride, h4, w4))


def downscale_flow_macs(cfg: NetConfig, h: int, w: int) -> int:
    return 2 * h * w if cfg.feature_stride > 1 else 0


@dataclass(frozen=True)
class FrameCosts:
    keyframe: int
    intermediate: int

    def blended(self, interval: int) -> float:
        """Mean MACs per frame when one frame in ``interval`` is a keyframe."""
        return (self.keyframe + (interval - 1) * self.intermediate) / interval


def frame_costs(cfg: NetConfig, mode: str, h: int, w: int, flow_source: str = "oracle",
                branch: str = "both") -> FrameCosts:
    """MACs for one keyframe and one intermediate frame of a pipeline run."""
    ref_full = feature_net_macs(cfg, cfg.reference_depth, h, w) + task_net_macs(cfg, h, w)
    upd_feat = feature_net_macs(cfg, cfg.update_depth, h, w)
    if mode == "single_frame":
        return FrameCosts(ref_full, ref_full)
    if branch == "update":
        upd_full = upd_feat + task_net_macs(cfg, h, w)
        return FrameCosts(upd_full, upd_full)
    propagate = warp_macs(cfg, h, w) + downscale_flow_macs(cfg, h, w)
    if flow_source == "learned":
        propagate += flow_net_macs(h, w)
    if mode == "warp_only" or branch == "reference":
        return FrameCosts(ref_full, propagate + task_net_macs(cfg, h, w))
    if mode != "accel":
        raise ValueError(f"unknown mode {mode!r}")
    if cfg.fusion_location == "score":
        inter = propagate + 2 * task_net_macs(cfg, h, w) + upd_feat + fusion_macs(cfg, h, w)
    else:
        inter = propagate + task_net_macs(cfg, h, w) + upd_feat + fusion_macs(cfg, h, w)
    return FrameCosts(ref_full, inter)
