"""Image ingestion, resizing, dataset iteration, and pre-training augmentation.

Supported on-disk format is binary PPM (P6, maxval 255), decoded bit-exactly.
A deterministic synthetic dataset (oriented sinusoids + blobs) makes every
test and acceptance run self-contained.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

CROP_SCALE = (0.2, 1.0)
CROP_ASPECT = (3.0 / 4.0, 4.0 / 3.0)
STD_FLOOR = 1e-6


class IngestionError(RuntimeError):
    """A dataset or image file could not be read or decoded."""


@dataclass
class NormStats:
    """Dataset-level per-channel mean and standard deviation."""
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32).reshape(3)
        self.std = np.asarray(self.std, dtype=np.float32).reshape(3)
        if np.any(self.std <= 0):
            raise ValueError(f"NormStats: std must be positive, got {self.std}")

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(mean=np.zeros(3), std=np.ones(3))


@dataclass
class ImageBatch:
    """Batch of decoded RGB images, planar (B, 3, H, W) layout, values [0, 1]."""
    data: np.ndarray
    source_ids: list
    resolution: tuple

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != 3:
            raise ValueError(f"ImageBatch: expected (B,3,H,W), got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ValueError("ImageBatch: batch must be non-empty")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("ImageBatch: non-finite pixel values")


# ---------------------------------------------------------------------------
# PPM P6

def read_ppm(path) -> np.ndarray:
    """Decode a binary PPM (P6, maxval 255) into float32 (3, H, W) in [0, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IngestionError(f"cannot read {path}: {e}")

    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            ch = raw[pos:pos + 1]
            if ch == b"#":
                while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestionError(f"{path}: truncated PPM header")
        return raw[start:pos]

    if token() != b"P6":
        raise IngestionError(f"{path}: not a binary PPM (P6) file")
    try:
        width = int(token())
        height = int(token())
        maxval = int(token())
    except ValueError:
        raise IngestionError(f"{path}: malformed PPM header")
    if maxval != 255:
        raise IngestionError(f"{path}: unsupported maxval {maxval} (only 255)")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    pixels = raw[pos:pos + need]
    if len(pixels) != need:
        raise IngestionError(f"{path}: expected {need} pixel bytes, got {len(pixels)}")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def write_ppm(path, img: np.ndarray) -> None:
    """Write float (3, H, W) values in [0, 1] as binary PPM."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm: expected (3,H,W), got {img.shape}")
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(u8.transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# datasets

def stream_rng(seed: int, *stream) -> np.random.Generator:
    """Generator keyed by (seed, stream...): order-independent, reproducible."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(s) for s in stream)))


class SyntheticDataset:
    """Deterministic textured images: a quilt of oriented sinusoid patches
    plus soft blobs.

    Each index is generated from rng(seed, index), so any access order
    yields identical pixels.  Every patch carries a coherent orientation at
    a frequency both working resolutions can represent, and patch borders
    contribute sharp edges, so HOG targets are non-degenerate in every cell.
    """

    def __init__(self, seed: int, count: int, resolution: int = 224):
        if count < 1:
            raise IngestionError("synthetic dataset: count must be >= 1")
        self.seed = int(seed)
        self.count = int(count)
        self.resolution = int(resolution)
        self._cache: dict = {}

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, index: int) -> np.ndarray:
        if not 0 <= index < self.count:
            raise IndexError(index)
        hit = self._cache.get(index)
        if hit is not None:
            return hit
        rng = stream_rng(self.seed, 0x5D, index)
        r = self.resolution
        yy, xx = np.meshgrid(np.linspace(0, 1, r), np.linspace(0, 1, r), indexing="ij")
        seeds = int(rng.integers(48, 80))
        pts = rng.uniform(0, 1, (seeds, 2))
        region = np.argmin((yy[..., None] - pts[:, 0]) ** 2
                           + (xx[..., None] - pts[:, 1]) ** 2, axis=-1)
        base = np.zeros((r, r))
        for k in range(seeds):
            inside = region == k
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(12.0, 30.0)
            amp = rng.uniform(0.25, 0.45)
            phase = rng.uniform(0, 2 * np.pi)
            # fine same-orientation detail: resolvable at ~96px renders and
            # above, lost below; this band separates resolutions
            fine_freq = rng.uniform(34.0, 44.0)
            fine_amp = rng.uniform(0.12, 0.2)
            fine_phase = rng.uniform(0, 2 * np.pi)
            u = np.cos(theta) * xx[inside] + np.sin(theta) * yy[inside]
            base[inside] = (amp * np.sin(2 * np.pi * freq * u + phase)
                            + fine_amp * np.sin(2 * np.pi * fine_freq * u + fine_phase)
                            + rng.uniform(-0.65, 0.65))
        for _ in range(rng.integers(2, 4)):
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(1.0, 4.0)
            base += rng.uniform(0.08, 0.18) * np.sin(
                2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy)
                + rng.uniform(0, 2 * np.pi))
        for _ in range(rng.integers(2, 5)):
            cy, cx = rng.uniform(0.1, 0.9, size=2)
            sigma = rng.uniform(0.05, 0.2)
            base += rng.uniform(-0.6, 0.6) * np.exp(
                -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
        img = np.empty((3, r, r))
        for c in range(3):
            img[c] = rng.uniform(0.6, 1.0) * base + rng.uniform(-0.15, 0.15)
        lo, hi = img.min(), img.max()
        img = (img - lo) / max(hi - lo, 1e-9)
        out = (0.05 + 0.9 * img).astype(np.float32)
        self._cache[index] = out
        return out


class PpmFolderDataset:
    """All *.ppm files under a directory (sorted), or the paths listed in a
    newline-delimited manifest file."""

    def __init__(self, root):
        root = Path(root)
        if root.is_file():
            lines = [ln.strip() for ln in root.read_text().splitlines()]
            self.paths = [Path(ln) for ln in lines if ln]
        elif root.is_dir():
            self.paths = sorted(root.glob("*.ppm"))
        else:
            raise IngestionError(f"dataset root {root} does not exist")
        if not self.paths:
            raise IngestionError(f"no PPM images found under {root}")

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, index: int) -> np.ndarray:
        return read_ppm(self.paths[index])


def load_dataset(root=None, format: str = "synthetic", *, seed: int = 0,
                 count: int = 64, resolution: int = 224):
    if format == "synthetic":
        return SyntheticDataset(seed=seed, count=count, resolution=resolution)
    if format == "ppm_dir":
        if root is None:
            raise IngestionError("ppm_dir dataset needs a root path")
        return PpmFolderDataset(root)
    raise IngestionError(f"unknown dataset format {format!r}")


# ---------------------------------------------------------------------------
# resizing and augmentation

def resize(img: np.ndarray, target: tuple, method: str = "bilinear") -> np.ndarray:
    """Resize (3, H, W) to target (h, w).  Bilinear uses half-pixel centers;
    nearest is for masks."""
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError(f"resize: bad target {target}")
    img = np.asarray(img)
    if method == "bilinear":
        return kernels.bilinear_resample(img, th, tw).astype(img.dtype)
    if method == "nearest":
        h, w = img.shape[-2:]
        yi = np.minimum((np.arange(th) + 0.5) * (h / th), h - 1).astype(np.int64)
        xi = np.minimum((np.arange(tw) + 0.5) * (w / tw), w - 1).astype(np.int64)
        return np.ascontiguousarray(img[..., yi[:, None], xi[None, :]])
    raise ValueError(f"resize: unknown method {method!r}")


def _sample_crop(rng: np.random.Generator, h: int, w: int):
    """RandomResizedCrop box: scale in CROP_SCALE, aspect in CROP_ASPECT,
    10 attempts, then full-image fallback."""
    area = h * w
    log_aspect = (math.log(CROP_ASPECT[0]), math.log(CROP_ASPECT[1]))
    for _ in range(10):
        target = area * rng.uniform(*CROP_SCALE)
        aspect = math.exp(rng.uniform(*log_aspect))
        cw = int(math.ceil(math.sqrt(target * aspect)))
        ch = int(math.ceil(math.sqrt(target / aspect)))
        if cw <= w and ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def augment(img: np.ndarray, out_res: int, seed, *, force_full: bool = False,
            force_no_flip: bool = False) -> np.ndarray:
    """Random-resized-crop + horizontal flip (p=0.5), bilinear to out_res.

    Deterministic given the seed (an int or a Generator).  force_* pins the
    crop to the full image / disables the flip for tests.
    """
    if not 32 <= out_res <= 1024:
        raise ValueError(f"augment: out_res {out_res} outside [32, 1024]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = img.shape[-2:]
    if force_full:
        top, left, ch, cw = 0, 0, h, w
    else:
        top, left, ch, cw = _sample_crop(rng, h, w)
    out = kernels.bilinear_resample(img, out_res, out_res,
                                    box=(float(top), float(left), float(ch), float(cw)))
    flip = (not force_no_flip) and rng.random() < 0.5
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out, dtype=np.float32)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic permutation of dataset indices for one epoch."""
    return stream_rng(seed, 0xE9, epoch).permutation(n)


def augment_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample augmentation stream: hash(epoch seed, sample index)."""
    return stream_rng(seed, 0xA6, epoch, index)


def collate_batch(dataset, indices, out_res: int, seed: int, epoch: int) -> ImageBatch:
    imgs = [augment(dataset[int(i)], out_res, augment_rng(seed, epoch, int(i)))
            for i in indices]
    return ImageBatch(data=np.stack(imgs), source_ids=[int(i) for i in indices],
                      resolution=(out_res, out_res))


# ---------------------------------------------------------------------------
# normalization

def normalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    """(x - mean_c) / std_c per channel over (..., 3, H, W)."""
    mean = stats.mean.reshape(3, 1, 1).astype(x.dtype)
    std = stats.std.reshape(3, 1, 1).astype(x.dtype)
    return (x - mean) / std


def denormalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    mean = stats.mean.reshape(3, 1, 1).astype(x.dtype)
    std = stats.std.reshape(3, 1, 1).astype(x.dtype)
    return x * std + mean


def compute_norm_stats(dataset) -> NormStats:
    """Exact two-pass per-channel mean/std over every pixel of the dataset."""
    count = 0
    total = np.zeros(3, dtype=np.float64)
    for i in range(len(dataset)):
        img = np.asarray(dataset[i], dtype=np.float64)
        total += img.reshape(3, -1).sum(axis=1)
        count += img.shape[1] * img.shape[2]
    mean = total / count
    sq = np.zeros(3, dtype=np.float64)
    for i in range(len(dataset)):
        img = np.asarray(dataset[i], dtype=np.float64)
        d = img.reshape(3, -1) - mean[:, None]
        sq += (d * d).sum(axis=1)
    std = np.sqrt(sq / count)
    if np.any(std < STD_FLOOR):
        log.warning("degenerate channel std %s clipped to %g", std, STD_FLOOR)
        std = np.maximum(std, STD_FLOOR)
    return NormStats(mean=mean, std=std)
