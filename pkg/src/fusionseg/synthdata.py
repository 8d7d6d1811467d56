"""Seeded synthetic videos of moving rigid shapes with exact labels and flow.

Pixel (row i, col j) sits at coordinate (x=j, y=i). Screen position of a
world point is ``world - camera``; the camera moves by ``pan`` per frame.
``flows[t]`` is the backward flow anchored at frame t+1: the displacement
from a pixel of frame t+1 to where the visible surface was in frame t.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .tensor import Tensor

SHAPES = ("rect", "disk", "triangle", "ring", "cross")


@dataclass
class GenParams:
    h: int = 64
    w: int = 64
    T: int = 16
    num_objects: int = 4
    num_classes: int = 4
    velocity_max: float = 2.0
    velocity_step: float = 0.5
    pan_max: float = 1.0
    turn_prob: float = 0.3
    spawn_prob: float = 0.35
    despawn_prob: float = 0.2
    size_min: float = 7.0
    size_max: float = 13.0
    texture_noise: float = 0.08
    sensor_noise: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.h <= 0 or self.w <= 0 or self.T < 1:
            raise ValueError(f"bad clip dims h={self.h} w={self.w} T={self.T}")
        if not 2 <= self.num_classes <= len(SHAPES) + 1:
            raise ValueError(f"num_classes must be in [2, {len(SHAPES) + 1}], got {self.num_classes}")
        if self.num_objects < 0:
            raise ValueError(f"num_objects must be >= 0, got {self.num_objects}")
        if self.size_min <= 0 or self.size_max < self.size_min:
            raise ValueError(f"degenerate shape sizes: size_min={self.size_min}, size_max={self.size_max}")
        bound = min(self.h, self.w) / 8
        if self.velocity_max + self.pan_max > bound:
            raise ValueError(f"velocity_max + pan_max = {self.velocity_max + self.pan_max} exceeds h/8 = {bound}")
        if self.velocity_step <= 0:
            raise ValueError(f"velocity_step must be positive, got {self.velocity_step}")
        for name in ("turn_prob", "spawn_prob", "despawn_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability, got {getattr(self, name)}")


@dataclass
class VideoClip:
    frames: np.ndarray   # (T, 3, h, w) float64 in [0, 1]
    labels: np.ndarray   # (T, h, w) uint8
    flows: np.ndarray    # (T-1, 2, h, w) float64
    params: GenParams

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, t: int) -> Tensor:
        return Tensor(self.frames[t][None])

    def flow(self, t: int) -> Tensor:
        """O(frame t, frame t+1) as a (1, 2, h, w) tensor."""
        return Tensor(self.flows[t][None])

    def __eq__(self, other) -> bool:
        return (isinstance(other, VideoClip) and self.params == other.params
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.flows, other.flows))


@dataclass
class _Object:
    cls: int
    shape: str
    size: float
    aspect: float
    color: np.ndarray
    freq: np.ndarray
    phase: float
    pos: np.ndarray      # (T, 2) world centre per frame
    vel: np.ndarray      # (T-1, 2) world velocity between frames
    t_on: int
    t_off: int

    def alive(self, t: int) -> bool:
        return self.t_on <= t < self.t_off


def shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, r: float, aspect: float) -> np.ndarray:
    if shape == "rect":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r * aspect)
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "triangle":
        # apex up at dy = -r, base at dy = +r
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    if shape == "cross":
        arm = r / 3
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def _quantised(rng, limit: float, step: float, size=None):
    k = int(np.floor(limit / step + 1e-9))
    return rng.integers(-k, k + 1, size=size) * step


def _make_objects(p: GenParams, rng: np.random.Generator) -> list[_Object]:
    K = p.num_classes - 1
    classes = list(rng.permutation(K) + 1)
    while len(classes) < p.num_objects:
        classes.append(int(rng.integers(1, K + 1)))
    objects = []
    for i in range(p.num_objects):
        cls = int(classes[i])
        t_on = int(rng.integers(1, p.T)) if p.T > 1 and rng.random() < p.spawn_prob else 0
        t_off = p.T
        if t_on + 1 < p.T and rng.random() < p.despawn_prob:
            t_off = int(rng.integers(t_on + 2, p.T + 1))
        vel = np.empty((max(p.T - 1, 0), 2))
        v = _quantised(rng, p.velocity_max, p.velocity_step, 2)
        turn = int(rng.integers(1, p.T)) if p.T > 2 and rng.random() < p.turn_prob else -1
        for t in range(p.T - 1):
            if t == turn:
                v = _quantised(rng, p.velocity_max, p.velocity_step, 2)
            vel[t] = v
        size = float(rng.uniform(p.size_min, p.size_max))
        # centre at the spawn frame lies inside the view
        margin = min(size, p.w / 4, p.h / 4)
        start = np.array([rng.uniform(margin, p.w - 1 - margin), rng.uniform(margin, p.h - 1 - margin)])
        pos = np.empty((p.T, 2))
        pos[t_on] = start
        for t in range(t_on + 1, p.T):
            pos[t] = pos[t - 1] + vel[t - 1]
        for t in range(t_on - 1, -1, -1):
            pos[t] = pos[t + 1] - vel[t]
        objects.append(_Object(
            cls=cls, shape=SHAPES[cls - 1], size=size, aspect=float(rng.uniform(0.6, 1.0)),
            color=rng.uniform(0.25, 1.0, size=3), freq=rng.uniform(0.2, 0.8, size=2),
            phase=float(rng.uniform(0, 2 * np.pi)), pos=pos, vel=vel, t_on=t_on, t_off=t_off,
        ))
    return objects


def gen_clip(params: GenParams) -> VideoClip:
    """Render one clip; a pure function of ``params``."""
    params.validate()
    p = params
    rng = np.random.default_rng(p.seed)
    pan = _quantised(rng, p.pan_max, p.velocity_step, 2)
    cam = np.arange(p.T)[:, None] * pan[None]
    objects = _make_objects(p, rng)
    bg_color = rng.uniform(0.1, 0.3, size=3)
    bg_freq = rng.uniform(0.15, 0.5, size=(3, 2))
    bg_phase = rng.uniform(0, 2 * np.pi, size=3)
    noise_rng = np.random.default_rng(rng.integers(2 ** 63))

    ys, xs = np.meshgrid(np.arange(p.h, dtype=float), np.arange(p.w, dtype=float), indexing="ij")
    frames = np.empty((p.T, 3, p.h, p.w))
    labels = np.zeros((p.T, p.h, p.w), dtype=np.uint8)
    masks = np.zeros((p.T, len(objects), p.h, p.w), dtype=bool)
    for t in range(p.T):
        wx, wy = xs + cam[t, 0], ys + cam[t, 1]
        tex = sum(np.sin(bg_freq[k, 0] * wx + bg_freq[k, 1] * wy + bg_phase[k]) for k in range(3)) / 3
        img = bg_color[:, None, None] + p.texture_noise * tex[None]
        for o_i, obj in enumerate(objects):
            if not obj.alive(t):
                continue
            cx, cy = obj.pos[t] - cam[t]
            dx, dy = xs - cx, ys - cy
            m = shape_mask(obj.shape, dx, dy, obj.size, obj.aspect)
            masks[t, o_i] = m
            otex = np.sin(obj.freq[0] * dx + obj.freq[1] * dy + obj.phase)
            img = np.where(m[None], obj.color[:, None, None] + p.texture_noise * otex[None], img)
            labels[t][m] = obj.cls
        if p.sensor_noise:
            img = img + p.sensor_noise * noise_rng.standard_normal(img.shape)
        frames[t] = np.clip(img, 0.0, 1.0)

    flows = np.empty((max(p.T - 1, 0), 2, p.h, p.w))
    for t in range(p.T - 1):
        fl = np.broadcast_to(pan[:, None, None], (2, p.h, p.w)).copy()
        for o_i, obj in enumerate(objects):
            if obj.alive(t + 1) and obj.alive(t):
                m = masks[t + 1, o_i]
                disp = pan - obj.vel[t]
                fl[0][m] = disp[0]
                fl[1][m] = disp[1]
            elif obj.alive(t + 1):
                # newborn surface has no source; it keeps the camera flow written below it
                m = masks[t + 1, o_i]
                fl[0][m] = pan[0]
                fl[1][m] = pan[1]
        flows[t] = fl
    # stored on disk as float32; keep memory and disk identical
    frames = frames.astype(np.float32).astype(np.float64)
    flows = flows.astype(np.float32).astype(np.float64)
    return VideoClip(frames, labels, flows, params)


def gen_dataset(base: GenParams, count: int, first_seed: int = 0) -> list[VideoClip]:
    out = []
    for i in range(count):
        d = asdict(base)
        d["seed"] = first_seed + i
        out.append(gen_clip(GenParams(**d)))
    return out


def warp_labels_nearest(labels: np.ndarray, flow: np.ndarray, fill: int = 255) -> np.ndarray:
    """Pull labels through a backward flow with nearest-neighbour sampling."""
    h, w = labels.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sx = np.rint(xs + flow[0]).astype(np.int64)
    sy = np.rint(ys + flow[1]).astype(np.int64)
    ok = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    out = np.full((h, w), fill, dtype=np.int64)
    out[ok] = labels[sy[ok], sx[ok]]
    return out


# ---------------------------------------------------------------------------
# dataset file
#
#   magic "FSEGDATA" | uint32 version | uint32 clip count
#   per clip:
#     uint32 n + n bytes JSON GenParams
#     uint32 T | uint32 h | uint32 w
#     uint64 n + frames  float32 (T, 3, h, w)
#     uint64 n + labels  uint8   (T, h, w)
#     uint64 n + flows   float32 (T-1, 2, h, w)
# all little-endian
# ---------------------------------------------------------------------------

DATA_MAGIC = b"FSEGDATA"
DATA_VERSION = 1
HEADER_SIZE = len(DATA_MAGIC) + 8


class DatasetError(ValueError):
    pass


def record_size(clip: VideoClip) -> int:
    T, _, h, w = clip.frames.shape
    meta = len(json.dumps(asdict(clip.params), sort_keys=True).encode("utf-8"))
    return 4 + meta + 12 + (8 + T * 3 * h * w * 4) + (8 + T * h * w) + (8 + (T - 1) * 2 * h * w * 4)


def save_dataset(clips: list[VideoClip], path) -> None:
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC + struct.pack("<II", DATA_VERSION, len(clips)))
        for clip in clips:
            meta = json.dumps(asdict(clip.params), sort_keys=True).encode("utf-8")
            T, _, h, w = clip.frames.shape
            fh.write(struct.pack("<I", len(meta)) + meta + struct.pack("<III", T, h, w))
            for arr, dtype in ((clip.frames, "<f4"), (clip.labels, "u1"), (clip.flows, "<f4")):
                raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
                fh.write(struct.pack("<Q", len(raw)) + raw)


def load_dataset(path) -> list[VideoClip]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise DatasetError(f"truncated dataset: need {n} bytes at offset {pos}, file has {len(buf)}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(len(DATA_MAGIC)) != DATA_MAGIC:
        raise DatasetError("not a dataset file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != DATA_VERSION:
        raise DatasetError(f"unsupported dataset version {version} (expected {DATA_VERSION})")
    known = {f.name for f in fields(GenParams)}
    clips = []
    for ci in range(count):
        (mlen,) = struct.unpack("<I", take(4))
        try:
            meta = json.loads(take(mlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetError(f"clip {ci}: unreadable params record: {exc}") from None
        if set(meta) != known:
            raise DatasetError(f"clip {ci}: params record keys {sorted(meta)} do not match GenParams")
        T, h, w = struct.unpack("<III", take(12))
        arrays = []
        for shape, dtype, itemsize in (((T, 3, h, w), "<f4", 4), ((T, h, w), "u1", 1),
                                       ((max(T - 1, 0), 2, h, w), "<f4", 4)):
            (n,) = struct.unpack("<Q", take(8))
            expected = int(np.prod(shape)) * itemsize
            if n != expected:
                raise DatasetError(f"clip {ci}: array length {n} != expected {expected} for shape {shape}")
            arrays.append(np.frombuffer(take(n), dtype=dtype).reshape(shape))
        frames, labels, flows = arrays
        clips.append(VideoClip(frames.astype(np.float64), labels.copy(), flows.astype(np.float64),
                               GenParams(**meta)))
    if pos != len(buf):
        raise DatasetError(f"{len(buf) - pos} trailing bytes after {count} clips")
    return clips
