"""Histograms-of-Oriented-Gradients target extraction and similarity metrics.

The production path (`hog_extract`) runs on the kernels backend; the
reference path (`hog_oracle`) is naive per-pixel float64 Python, kept
deliberately independent so tests can check one against the other.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels


class HogConfigError(ValueError):
    pass


@dataclass
class HogConfig:
    bins: int = 9
    cell: int = 8
    unsigned_orientation: bool = True
    norm_eps: float = 1e-6
    per_channel: bool = True

    @property
    def period(self) -> float:
        return 180.0 if self.unsigned_orientation else 360.0

    @property
    def channels(self) -> int:
        return 3 if self.per_channel else 1

    def validate(self, height: int, width: int, mask_size: int | None = None) -> None:
        if self.bins < 2:
            raise HogConfigError(f"bins must be >= 2, got {self.bins}")
        if height % self.cell or width % self.cell:
            raise HogConfigError(
                f"cell {self.cell} must divide image sides ({height}x{width})")
        if mask_size is not None and mask_size % self.cell:
            raise HogConfigError(
                f"cell {self.cell} must divide mask size {mask_size}")


@dataclass
class HogField:
    """Per-cell normalized histograms, (B, H/cell, W/cell, bins*channels)."""
    data: np.ndarray
    config: HogConfig

    @property
    def cell_grid(self) -> tuple:
        return self.data.shape[1], self.data.shape[2]


def _normalize_cells(hist: np.ndarray, eps: float) -> np.ndarray:
    """L2-normalize each (cell, channel) histogram: v / sqrt(|v|^2 + eps^2)."""
    norm = np.sqrt((hist * hist).sum(axis=-1, keepdims=True) + eps * eps)
    return hist / norm


def _as_batch(images: np.ndarray) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise HogConfigError(f"expected (B,3,H,W) or (3,H,W), got {arr.shape}")
    return arr


def hog_extract(images, cfg: HogConfig = HogConfig()) -> HogField:
    """HOG features for a batch: centered differences with replicate padding,
    unsigned orientation, linear bin interpolation, per-cell L2 norm,
    channel histograms concatenated."""
    if not isinstance(images, np.ndarray) and hasattr(images, "data"):
        images = images.data  # ImageBatch or Tensor
    batch = _as_batch(images)
    b, _, h, w = batch.shape
    cfg.validate(h, w)
    fields = []
    for i in range(b):
        img = batch[i] if cfg.per_channel else batch[i].mean(axis=0, keepdims=True)
        hist = kernels.hog_cells(img, cfg.bins, cfg.cell, cfg.period)
        hist = _normalize_cells(hist, cfg.norm_eps)
        hc, wc, c, k = hist.shape
        fields.append(hist.reshape(hc, wc, c * k))
    return HogField(data=np.stack(fields).astype(np.float32), config=cfg)


def hog_oracle(images, cfg: HogConfig = HogConfig()) -> HogField:
    """Reference implementation: per-pixel Python loops in float64.

    Same definition as hog_extract, written independently; test use only.
    """
    batch = _as_batch(images).astype(np.float64)
    b, _, h, w = batch.shape
    cfg.validate(h, w)
    bins, cell, period = cfg.bins, cfg.cell, cfg.period
    hc, wc = h // cell, w // cell
    out = np.zeros((b, hc, wc, cfg.channels * bins), dtype=np.float64)
    for i in range(b):
        img = batch[i] if cfg.per_channel else batch[i].mean(axis=0, keepdims=True)
        for c in range(img.shape[0]):
            hist = np.zeros((hc, wc, bins), dtype=np.float64)
            for y in range(h):
                for x in range(w):
                    gx = img[c, y, min(x + 1, w - 1)] - img[c, y, max(x - 1, 0)]
                    gy = img[c, min(y + 1, h - 1), x] - img[c, max(y - 1, 0), x]
                    mag = math.hypot(gx, gy)
                    ang = math.degrees(math.atan2(gy, gx)) % period
                    t = ang * bins / period
                    i0 = min(int(t), bins - 1)
                    frac = t - i0
                    hist[y // cell, x // cell, i0] += mag * (1.0 - frac)
                    hist[y // cell, x // cell, (i0 + 1) % bins] += mag * frac
            for cy in range(hc):
                for cx in range(wc):
                    v = hist[cy, cx]
                    out[i, cy, cx, c * bins:(c + 1) * bins] = v / math.sqrt(
                        float(v @ v) + cfg.norm_eps ** 2)
    return HogField(data=out, config=cfg)


# ---------------------------------------------------------------------------
# PSNR / SSIM

SSIM_WINDOW = 8


def _window_mean(x: np.ndarray, k: int) -> np.ndarray:
    """Mean over all k x k windows (valid mode) of a 2-D array, via integral
    image."""
    s = np.zeros((x.shape[0] + 1, x.shape[1] + 1), dtype=np.float64)
    s[1:, 1:] = np.cumsum(np.cumsum(x, axis=0), axis=1)
    tot = s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]
    return tot / (k * k)


def _ssim_channel(a: np.ndarray, b: np.ndarray, data_range: float, k: int) -> float:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    ma = _window_mean(a, k)
    mb = _window_mean(b, k)
    va = np.maximum(_window_mean(a * a, k) - ma * ma, 0.0)
    vb = np.maximum(_window_mean(b * b, k) - mb * mb, 0.0)
    cov = _window_mean(a * b, k) - ma * mb
    num = (2 * ma * mb + c1) * (2 * cov + c2)
    den = (ma * ma + mb * mb + c1) * (va + vb + c2)
    return float((num / den).mean())


def similarity_report(a: np.ndarray, b: np.ndarray, kind: str,
                      data_range: float = 1.0, channel_axis: int = 0) -> float:
    """PSNR (dB) or SSIM between two same-shape arrays.

    SSIM uses a uniform 8x8 window (shrunk if the spatial grid is smaller)
    over the two non-channel axes, averaged across channels.  Identical
    inputs give SSIM 1.0 and PSNR +inf.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"similarity_report: shapes {a.shape} != {b.shape}")
    if kind == "psnr":
        err = float(((a - b) ** 2).mean())
        if err == 0.0:
            return float("inf")
        return 10.0 * math.log10(data_range * data_range / err)
    if kind == "ssim":
        am = np.moveaxis(a, channel_axis, 0)
        bm = np.moveaxis(b, channel_axis, 0)
        k = min(SSIM_WINDOW, am.shape[1], am.shape[2])
        vals = [_ssim_channel(am[c], bm[c], data_range, k) for c in range(am.shape[0])]
        return float(np.mean(vals))
    raise ValueError(f"similarity_report: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# resolution robustness (feature stability across pre-training resolutions)

DEFAULT_VIEW_JITTER = (2.0, 1.5)


def resolution_similarity(img_hi: np.ndarray, lo_res: int,
                          cfg: HogConfig = HogConfig(),
                          view_jitter: tuple = DEFAULT_VIEW_JITTER) -> dict:
    """Compare target stability between a high-res image and its low-res view.

    The low-res view is resampled from a crop offset by ``view_jitter``
    pixels (sub-cell at both scales), matching the geometric jitter the
    crop pipeline introduces between resolution views.  HOG side: field of
    the low-res view (native cell) vs the hi-res field with the cell scaled
    by hi/lo: same cell grid, each cell pooling the same image area, so
    cell pooling absorbs the sub-cell offset.  Pixel side: SSIM of the
    low-res view upsampled back against the original, i.e. what the pixel
    signal preserves across the same resolution change.
    """
    from . import imageio, kernels

    img_hi = np.asarray(img_hi)
    hi = img_hi.shape[-1]
    if (cfg.cell * hi) % lo_res:
        raise HogConfigError(
            f"cell {cfg.cell} at {lo_res} has no integer counterpart at {hi}")
    cell_hi = cfg.cell * hi // lo_res
    jy, jx = view_jitter
    if not (abs(jy) < cell_hi and abs(jx) < cell_hi):
        raise HogConfigError(f"view jitter {view_jitter} must stay below one cell")
    img_lo = kernels.bilinear_resample(
        img_hi, lo_res, lo_res, box=(float(jy), float(jx), float(hi), float(hi)))
    img_lo = img_lo.astype(img_hi.dtype)

    hog_lo = hog_extract(img_lo, cfg)
    hog_hi = hog_extract(img_hi, HogConfig(bins=cfg.bins, cell=cell_hi,
                                           unsigned_orientation=cfg.unsigned_orientation,
                                           norm_eps=cfg.norm_eps,
                                           per_channel=cfg.per_channel))
    hog_ssim = similarity_report(hog_lo.data[0], hog_hi.data[0], "ssim",
                                 channel_axis=-1)
    roundtrip = imageio.resize(img_lo, (hi, hi))
    pixel_ssim = similarity_report(roundtrip, img_hi, "ssim", channel_axis=0)
    return {"hog_ssim": hog_ssim, "pixel_ssim": pixel_ssim,
            "hog_psnr": similarity_report(hog_lo.data[0], hog_hi.data[0], "psnr"),
            "pixel_psnr": similarity_report(roundtrip, img_hi, "psnr")}
