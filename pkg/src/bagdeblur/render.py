"""Attention-map rendering with a fixed cool-to-warm colormap.

The 256-entry lookup table is built at import time from hard-coded anchor
colors by linear interpolation, so renders are bit-reproducible across
installs: low values map to the cool end, high values to the warm end.
"""

from dataclasses import dataclass

import numpy as np

# Cool-to-warm anchors (dark blue -> pale gray -> dark red).
COOLWARM_ANCHORS = (
    (59, 76, 192),
    (98, 130, 234),
    (141, 176, 254),
    (184, 208, 249),
    (221, 221, 221),
    (245, 196, 173),
    (244, 154, 123),
    (222, 96, 77),
    (180, 4, 38),
)


def _build_lut(anchors, size=256):
    anchors = np.asarray(anchors, dtype=np.float64)
    pos = np.linspace(0.0, size - 1, len(anchors))
    xs = np.arange(size)
    lut = np.stack([np.interp(xs, pos, anchors[:, c]) for c in range(3)], axis=1)
    return np.clip(np.rint(lut), 0, 255).astype(np.uint8)


COOLWARM_LUT = _build_lut(COOLWARM_ANCHORS)


@dataclass
class RenderSpec:
    normalize: bool = True
    scale: int = 1
    lut: np.ndarray = None

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if self.lut is None:
            self.lut = COOLWARM_LUT
        if self.lut.shape != (256, 3):
            raise ValueError("lut must have shape (256, 3)")


def map_to_indices(a, spec=None):
    """Quantize an attention map to colormap indices 0..255.

    With normalization on, values are min/max rescaled so the extremes land
    exactly on the colormap endpoints; a constant map degenerates to the
    midpoint index. With normalization off, values are clamped to [0, 1].
    """
    spec = spec or RenderSpec()
    a = np.asarray(getattr(a, "detach", lambda: a)(), dtype=np.float64)
    while a.ndim > 2 and a.shape[0] == 1:  # drop batch/channel singletons
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"expected a single-channel 2-D map, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("attention map contains non-finite values")
    if spec.normalize:
        lo, hi = a.min(), a.max()
        v = np.full_like(a, 0.5) if hi == lo else (a - lo) / (hi - lo)
    else:
        v = np.clip(a, 0.0, 1.0)
    return np.clip(np.floor(v * 255.0 + 0.5), 0, 255).astype(np.intp)


def render_attention(a, spec=None):
    """Render an attention map as a (3, H*scale, W*scale) uint8 image."""
    spec = spec or RenderSpec()
    idx = map_to_indices(a, spec)
    img = spec.lut[idx]  # (H, W, 3)
    if spec.scale > 1:
        img = img.repeat(spec.scale, axis=0).repeat(spec.scale, axis=1)
    return np.ascontiguousarray(img.transpose(2, 0, 1))
