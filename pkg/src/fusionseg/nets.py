"""Network builders: feature net, task net, fusion layer and a small flow net."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .tensor import (
    Parameter, ShapeError, Tensor, add, argmax_channel, bilinear_kernel,
    concat_channel, conv2d, relu, softmax_channel, upsample_scores,
)

DEPTH_BLOCKS = {"T18": 1, "T34": 2, "T50": 3, "T101": 6}
DEPTHS = tuple(DEPTH_BLOCKS)


@dataclass
class NetConfig:
    num_classes: int = 4
    feature_channels: int = 32
    feature_stride: int = 4
    update_depth: str = "T18"
    reference_depth: str = "T101"
    fusion_location: str = "score"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feature_channels < 2 or self.feature_channels % 2:
            raise ValueError(f"feature_channels must be even, got {self.feature_channels}")
        s = self.feature_stride
        if s < 1 or s & (s - 1):
            raise ValueError(f"feature_stride must be a power of 2, got {s}")
        for name in ("update_depth", "reference_depth"):
            if getattr(self, name) not in DEPTH_BLOCKS:
                raise ValueError(f"{name} must be one of {DEPTHS}, got {getattr(self, name)!r}")
        if self.fusion_location not in ("score", "feature"):
            raise ValueError(f"fusion_location must be 'score' or 'feature', got {self.fusion_location!r}")

    def check_frame(self, h: int, w: int) -> None:
        s = self.feature_stride
        if h % s or w % s:
            raise ShapeError(f"frame dims {(h, w)} not divisible by feature stride {s}")


def kaiming_uniform(rng: np.random.Generator, shape: tuple, gain: float = np.sqrt(2.0)) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Walks attributes in definition order to name parameters."""

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.set_trainable(flag)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data[...] = state[k]


class Conv(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1,
                 gain: float = np.sqrt(2.0), zero: bool = False):
        shape = (c_out, c_in, k, k)
        self.weight = Parameter(np.zeros(shape) if zero else kaiming_uniform(rng, shape, gain))
        self.bias = Parameter(np.zeros((1, c_out, 1, 1)))
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ResidualBlock(Module):
    def __init__(self, rng, channels: int):
        self.conv1 = Conv(rng, channels, channels, 3)
        # the residual branch starts small so stacked blocks keep activations bounded
        self.conv2 = Conv(rng, channels, channels, 3, gain=0.5)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(add(self.conv2(relu(self.conv1(x))), x))


class FeatureNet(Module):
    """Stride-``s`` stem of stride-2 convs, then ``DEPTH_BLOCKS[depth]`` residual blocks."""

    def __init__(self, rng, channels: int = 32, stride: int = 4, depth: str = "T18"):
        self.channels = channels
        self.stride = stride
        self.depth = depth
        n_down = int(np.log2(stride))
        stem, c_in = [], 3
        for i in range(max(n_down, 1)):
            c_out = channels if i == max(n_down, 1) - 1 else channels // 2
            stem.append(Conv(rng, c_in, c_out, 3, stride=2 if n_down else 1))
            c_in = c_out
        self.stem = stem
        self.blocks = [ResidualBlock(rng, channels) for _ in range(DEPTH_BLOCKS[depth])]
        self.calls = 0

    def __call__(self, frame: Tensor) -> Tensor:
        h, w = frame.shape[2:]
        if h % self.stride or w % self.stride:
            raise ShapeError(f"feature_forward: frame dims {(h, w)} not divisible by stride {self.stride}")
        self.calls += 1
        x = frame
        for conv in self.stem:
            x = relu(conv(x))
        for block in self.blocks:
            x = block(x)
        return x


class TaskNet(Module):
    """1x1 projection to C_f/2 with ReLU, 1x1 scoring to C classes, learned upsampling."""

    def __init__(self, rng, channels: int, num_classes: int, stride: int):
        self.channels = channels
        self.stride = stride
        self.proj = Conv(rng, channels, channels // 2, 1)
        self.score = Conv(rng, channels // 2, num_classes, 1, gain=1.0)
        if stride == 1:
            kernel = np.ones((num_classes, 1, 1, 1))
        else:
            kernel = np.repeat(bilinear_kernel(stride)[None, None], num_classes, axis=0)
        self.upsample = Parameter(kernel)

    def __call__(self, features: Tensor, target_h: int, target_w: int) -> Tensor:
        if features.shape[1] != self.channels:
            raise ShapeError(f"task_forward: features have {features.shape[1]} channels, expected C_f={self.channels}")
        x = relu(self.proj(features))
        x = self.score(x)
        return upsample_scores(x, self.upsample, self.stride, target_h, target_w)


class FusionLayer(Module):
    """1x1 conv over channel-stacked [reference, update] maps, initialised to their mean."""

    def __init__(self, channels: int):
        self.channels = channels
        weight = np.zeros((channels, 2 * channels, 1, 1))
        idx = np.arange(channels)
        weight[idx, idx, 0, 0] = 0.5
        weight[idx, channels + idx, 0, 0] = 0.5
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros((1, channels, 1, 1)))

    def __call__(self, ref: Tensor, upd: Tensor) -> Tensor:
        if ref.shape != upd.shape:
            raise ShapeError(f"fuse: branch shapes differ: {ref.shape} vs {upd.shape}")
        if ref.shape[1] != self.channels:
            raise ShapeError(f"fuse: inputs have {ref.shape[1]} channels, layer expects {self.channels}")
        return conv2d(concat_channel(ref, upd), self.weight, self.bias)


class MiniFlowNet(Module):
    """Two stride-2 encoder convs, a refinement conv, a zero-initialised flow head and x4 upsampling."""

    stride = 4

    def __init__(self, rng, width: int = 16):
        self.enc1 = Conv(rng, 6, width, 3, stride=2)
        self.enc2 = Conv(rng, width, 2 * width, 3, stride=2)
        self.enc3 = Conv(rng, 2 * width, 2 * width, 3)
        self.head = Conv(rng, 2 * width, 2, 3, zero=True)
        self.upsample = Parameter(np.repeat(bilinear_kernel(self.stride)[None, None], 2, axis=0))
        self.width = width

    def __call__(self, prev: Tensor, cur: Tensor) -> Tensor:
        if prev.shape != cur.shape:
            raise ShapeError(f"flow_forward: frame shapes differ: {prev.shape} vs {cur.shape}")
        h, w = cur.shape[2:]
        if h % self.stride or w % self.stride:
            raise ShapeError(f"flow_forward: frame dims {(h, w)} not divisible by {self.stride}")
        x = relu(self.enc1(concat_channel(prev, cur)))
        x = relu(self.enc2(x))
        x = relu(self.enc3(x))
        return upsample_scores(self.head(x), self.upsample, self.stride, h, w)


def output_block(scores: Tensor) -> tuple[Tensor, np.ndarray]:
    """Softmax probabilities and the per-pixel argmax segmentation, shape (h, w) for n == 1."""
    probs = softmax_channel(scores)
    seg = argmax_channel(scores)
    return probs, seg[0] if seg.shape[0] == 1 else seg


@dataclass
class Models:
    """All trainable pieces of the two-branch system."""

    config: NetConfig
    ref_feat: FeatureNet
    ref_task: TaskNet
    upd_feat: FeatureNet
    upd_task: TaskNet | None
    fusion: FusionLayer
    flow: MiniFlowNet | None = None
    extra: dict = field(default_factory=dict)

    def groups(self) -> dict[str, Module]:
        out = {"ref_feat": self.ref_feat, "ref_task": self.ref_task, "upd_feat": self.upd_feat}
        if self.upd_task is not None:
            out["upd_task"] = self.upd_task
        out["fusion"] = self.fusion
        if self.flow is not None:
            out["flow"] = self.flow
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for gname, mod in self.groups().items():
            out.update(mod.named_parameters(gname + "."))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for gname, mod in self.groups().items():
            sub = {k[len(gname) + 1:]: v for k, v in state.items() if k.startswith(gname + ".")}
            mod.load_state_dict(sub)

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict(), {"net_config": asdict(self.config),
                                                  "learned_flow": self.flow is not None})

    @classmethod
    def load(cls, path) -> "Models":
        arrays, manifest = checkpoint.load(path)
        models = build_models(NetConfig(**manifest["net_config"]), learned_flow=manifest["learned_flow"])
        models.load_state_dict(arrays)
        return models


def build_models(config: NetConfig, seed: int = 0, learned_flow: bool = False) -> Models:
    """Fresh weights for every component, each from its own seeded stream."""
    ss = np.random.SeedSequence(seed)
    r = [np.random.default_rng(s) for s in ss.spawn(5)]
    C, Cf, s = config.num_classes, config.feature_channels, config.feature_stride
    fusion_channels = C if config.fusion_location == "score" else Cf
    return Models(
        config=config,
        ref_feat=FeatureNet(r[0], Cf, s, config.reference_depth),
        ref_task=TaskNet(r[1], Cf, C, s),
        upd_feat=FeatureNet(r[2], Cf, s, config.update_depth),
        upd_task=TaskNet(r[3], Cf, C, s) if config.fusion_location == "score" else None,
        fusion=FusionLayer(fusion_channels),
        flow=MiniFlowNet(r[4]) if learned_flow else None,
    )


@dataclass
class SingleFrameNet:
    """A feature net plus task net evaluated frame by frame."""

    feat: FeatureNet
    task: TaskNet

    def parameters(self) -> list[Parameter]:
        return self.feat.parameters() + self.task.parameters()

    def __call__(self, frame: Tensor) -> Tensor:
        h, w = frame.shape[2:]
        return self.task(self.feat(frame), h, w)


def build_single_frame(config: NetConfig, depth: str, seed: int = 0) -> SingleFrameNet:
    r1, r2 = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    return SingleFrameNet(
        FeatureNet(r1, config.feature_channels, config.feature_stride, depth),
        TaskNet(r2, config.feature_channels, config.num_classes, config.feature_stride),
    )
