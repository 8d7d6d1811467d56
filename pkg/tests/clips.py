"""Hand-built clips with known motion, independent of the generator."""
import numpy as np

from fusionseg.synthdata import GenParams, VideoClip


def translating_clip(T=10, step=4, h=32, w=32, num_classes=4, seed=0):
    """Scene sliding right by ``step`` px per frame; exact backward flow is (-step, 0)."""
    rng = np.random.default_rng(seed)
    W = w + step * T
    base = rng.uniform(0, 1, size=(3, h, W))
    lab = rng.integers(0, num_classes, size=(h // 4, W // 4 + 1)).repeat(4, 0).repeat(4, 1)[:h, :W]
    frames = np.stack([base[:, :, W - w - step * t: W - step * t] for t in range(T)])
    labels = np.stack([lab[:, W - w - step * t: W - step * t] for t in range(T)]).astype(np.uint8)
    flows = np.zeros((T - 1, 2, h, w))
    flows[:, 0] = -step
    return VideoClip(frames, labels, flows, GenParams(h=h, w=w, T=T, seed=seed))
