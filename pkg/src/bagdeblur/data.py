"""Paired-dataset ingestion, aligned cropping, normalization, and the
synthetic blur generator used to build self-contained datasets.

In-memory images are float32 arrays of shape (3, H, W) with values in
[-1, 1]; on disk they are 8-bit PNG/JPEG, 3 channels.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError

TAP_SUM_TOL = 1e-8


# -- normalization ----------------------------------------------------------

def normalize(img_u8):
    """Map 8-bit values [0, 255] to float32 [-1, 1]."""
    return np.asarray(img_u8, dtype=np.float32) / 127.5 - 1.0


def denormalize(img):
    """Map [-1, 1] floats back to 8-bit, rounding to nearest and clamping."""
    scaled = (np.asarray(img, dtype=np.float32) + 1.0) * 127.5
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


# -- image files ------------------------------------------------------------

def load_image_u8(path):
    """Read a PNG/JPEG as (3, H, W) uint8."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image_u8(path, img_u8):
    """Write (3, H, W) uint8 as an image file."""
    arr = np.asarray(img_u8, dtype=np.uint8).transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


# -- samples ----------------------------------------------------------------

@dataclass
class ImageSample:
    """A spatially aligned blurred/sharp pair in [-1, 1]."""
    blurred: np.ndarray
    sharp: np.ndarray
    identifier: str = ""

    def __post_init__(self):
        if self.blurred.shape != self.sharp.shape:
            raise DataError(
                f"pair {self.identifier!r}: blurred {self.blurred.shape} and "
                f"sharp {self.sharp.shape} shapes differ")


def random_crop_pair(sample, size, seed):
    """Crop the same seeded window from both images of the pair.

    `seed` may be an int or a numpy Generator (shared across calls when the
    caller manages the stream). Undersized images are rejected; there is no
    padding.
    """
    _, h, w = sample.blurred.shape
    if h < size or w < size:
        raise DataError(
            f"pair {sample.identifier!r}: image {h}x{w} smaller than crop {size}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return ImageSample(
        blurred=sample.blurred[:, top:top + size, left:left + size],
        sharp=sample.sharp[:, top:top + size, left:left + size],
        identifier=sample.identifier,
    )


# -- synthetic degradation ---------------------------------------------------

@dataclass
class KernelSpec:
    """A normalized 2-D blur kernel: taps must sum to 1."""
    kind: str
    length: int = 1
    angle: float = 0.0
    taps: np.ndarray = None

    def __post_init__(self):
        if self.taps is None:
            self.taps = _build_taps(self.kind, self.length, self.angle)
        self.taps = np.asarray(self.taps, dtype=np.float64)
        total = float(self.taps.sum())
        if abs(total - 1.0) > TAP_SUM_TOL:
            raise DataError(f"kernel taps sum to {total}, expected 1")
        if (self.taps < 0).any():
            raise DataError("kernel taps must be nonnegative")

    @classmethod
    def delta(cls):
        return cls("delta", 1, 0.0)

    @classmethod
    def box(cls, length):
        return cls("box", length, 0.0)

    @classmethod
    def linear_motion(cls, length, angle=0.0):
        return cls("linear_motion", length, angle)

    def to_dict(self):
        return {"kind": self.kind, "length": self.length, "angle": self.angle,
                "taps": self.taps.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("length", 1), d.get("angle", 0.0),
                   np.asarray(d["taps"]) if "taps" in d else None)


def _build_taps(kind, length, angle):
    if length < 1:
        raise DataError("kernel length must be >= 1")
    if kind == "delta":
        return np.ones((1, 1))
    if kind == "box":
        return np.full((length, length), 1.0 / (length * length))
    if kind == "linear_motion":
        # Rasterize `length` unit-weight points along the angle, centered.
        half = (length - 1) / 2.0
        rad = math.radians(angle)
        dx, dy = math.cos(rad), -math.sin(rad)
        extent = int(math.ceil(half * max(abs(dx), abs(dy)))) if length > 1 else 0
        size = 2 * extent + 1
        taps = np.zeros((size, size))
        for i in range(length):
            t = i - half
            r = extent + int(round(-t * dy))
            c = extent + int(round(t * dx))
            taps[r, c] += 1.0
        return taps / taps.sum()
    raise DataError(f"unknown kernel kind {kind!r}")


@dataclass
class NoiseSpec:
    """Additive Gaussian noise level in normalized-intensity units."""
    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise DataError("noise sigma must be >= 0")

    def to_dict(self):
        return {"sigma": self.sigma}


def synthesize_blur(sharp, kernel, noise=None, seed=0):
    """Degrade a sharp image: per-channel 2-D convolution with the kernel
    (reflect-padded borders) plus seeded Gaussian noise, clamped to [-1, 1].

    A delta kernel with zero noise is a bitwise identity.
    """
    noise = noise or NoiseSpec()
    sharp = np.asarray(sharp)
    out = np.stack([
        ndimage.convolve(ch, kernel.taps, mode="reflect") for ch in sharp
    ]).astype(sharp.dtype)
    if noise.sigma > 0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(0.0, noise.sigma, out.shape).astype(sharp.dtype)
    return np.clip(out, -1.0, 1.0)


# -- dataset index ------------------------------------------------------------

@dataclass
class DatasetIndex:
    """Sorted list of blurred/sharp pair paths under one split."""
    root: Path
    split: str
    pairs: list = field(default_factory=list)  # (identifier, blur_path, sharp_path)

    def __len__(self):
        return len(self.pairs)

    def load_pair(self, i):
        identifier, blur_path, sharp_path = self.pairs[i]
        return ImageSample(
            blurred=normalize(load_image_u8(blur_path)),
            sharp=normalize(load_image_u8(sharp_path)),
            identifier=identifier,
        )


def load_index(root, split):
    """Index a `<root>/<split>/<sequence>/{blur,sharp}/<name>` tree.

    Pair order is lexicographic by (sequence, name), so the index is
    deterministic across runs and platforms. Any blurred file without a
    same-named sharp counterpart (or vice versa) is an error naming the
    orphan.
    """
    base = Path(root) / split
    if not base.is_dir():
        raise DataError(f"dataset split directory not found: {base}")
    pairs = []
    for seq in sorted(p for p in base.iterdir() if p.is_dir()):
        blur_dir, sharp_dir = seq / "blur", seq / "sharp"
        blur_names = set(p.name for p in blur_dir.iterdir()) if blur_dir.is_dir() else set()
        sharp_names = set(p.name for p in sharp_dir.iterdir()) if sharp_dir.is_dir() else set()
        orphans = blur_names ^ sharp_names
        if orphans:
            side = "sharp" if next(iter(sorted(orphans))) in blur_names else "blur"
            raise DataError(
                f"{seq.name}: {sorted(orphans)} missing a {side} counterpart")
        for name in sorted(blur_names):
            pairs.append((f"{seq.name}/{name}", blur_dir / name, sharp_dir / name))
    return DatasetIndex(root=Path(root), split=split, pairs=pairs)


# -- synthetic dataset manifest -----------------------------------------------

def write_manifest(path, records):
    """One JSON record per synthetic pair so the set is exactly regenerable."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(records, f, indent=2)


def read_manifest(path):
    with open(path) as f:
        return json.load(f)


def synthesize_dataset(sharp_images, out_root, split, kernel, noise, seed):
    """Build a GoPro-layout synthetic split from named sharp images.

    `sharp_images` maps identifier ("sequence/name.png") to a (3, H, W)
    uint8 array. Each pair gets its own derived noise seed. Returns the
    manifest records.
    """
    out_root = Path(out_root)
    records = []
    for i, (identifier, sharp_u8) in enumerate(sorted(sharp_images.items())):
        seq, _, name = identifier.partition("/")
        if not name:
            seq, name = "seq0", identifier
        pair_seed = seed + i
        blurred = synthesize_blur(normalize(sharp_u8), kernel, noise, pair_seed)
        save_image_u8(out_root / split / seq / "sharp" / name, sharp_u8)
        save_image_u8(out_root / split / seq / "blur" / name, denormalize(blurred))
        records.append({
            "identifier": f"{seq}/{name}",
            "kernel": kernel.to_dict(),
            "sigma": noise.sigma,
            "seed": pair_seed,
        })
    write_manifest(out_root / split / "manifest.json", records)
    return records
