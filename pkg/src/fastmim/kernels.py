"""Hot per-pixel kernels: numba-jitted loops with pure-numpy fallbacks.

The backend is chosen once at import time.  Set ``FASTMIM_NUMBA=0`` (or
uninstall numba) to force the numpy path; ``backend()`` reports which one
is active.  Both implementations upcast to float64 internally so the two
paths agree to near machine precision; ``bench --kernels`` times them
against each other.
"""
from __future__ import annotations

import math
import os

import numpy as np


def _env_wants_numba() -> bool:
    flag = os.environ.get("FASTMIM_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


_HAVE_NUMBA = False
if _env_wants_numba():
    try:
        from numba import njit
        _HAVE_NUMBA = True
    except ImportError:
        _HAVE_NUMBA = False


def backend() -> str:
    return "numba" if _HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# HOG cell accumulation
#
# Centered differences [-1, 0, 1] with replicate padding, unsigned (or
# signed) orientation, magnitude-weighted linear interpolation between the
# two nearest bin centers with circular wrap.  Returns raw per-cell
# histograms (normalization happens in the caller).

def _hog_cells_numpy(img: np.ndarray, bins: int, cell: int, period: float) -> np.ndarray:
    c, h, w = img.shape
    img = img.astype(np.float64, copy=False)
    xp = np.minimum(np.arange(w) + 1, w - 1)
    xm = np.maximum(np.arange(w) - 1, 0)
    yp = np.minimum(np.arange(h) + 1, h - 1)
    ym = np.maximum(np.arange(h) - 1, 0)
    gx = img[:, :, xp] - img[:, :, xm]
    gy = img[:, yp, :] - img[:, ym, :]
    mag = np.sqrt(gx * gx + gy * gy)
    ang = np.degrees(np.arctan2(gy, gx))
    ang = np.where(ang < 0.0, ang + period, ang)
    ang = np.where(ang >= period, ang - period, ang)
    t = ang * (bins / period)
    i0 = np.minimum(t.astype(np.int64), bins - 1)
    frac = t - i0
    i1 = (i0 + 1) % bins

    hc, wc = h // cell, w // cell
    cy = (np.arange(h) // cell)[None, :, None]
    cx = (np.arange(w) // cell)[None, None, :]
    ci = np.arange(c)[:, None, None]
    base = ((np.broadcast_to(ci, img.shape) * hc + cy) * wc + cx) * bins
    size = c * hc * wc * bins
    hist = (np.bincount((base + i0).ravel(), weights=(mag * (1.0 - frac)).ravel(),
                        minlength=size)
            + np.bincount((base + i1).ravel(), weights=(mag * frac).ravel(),
                          minlength=size))
    return hist.reshape(c, hc, wc, bins).transpose(1, 2, 0, 3).copy()


def _hog_cells_loops(img, bins, cell, period):
    c, h, w = img.shape
    hc = h // cell
    wc = w // cell
    hist = np.zeros((hc, wc, c, bins), dtype=np.float64)
    for ch in range(c):
        for y in range(h):
            yp = y + 1 if y + 1 < h else h - 1
            ym = y - 1 if y - 1 >= 0 else 0
            for x in range(w):
                xp = x + 1 if x + 1 < w else w - 1
                xm = x - 1 if x - 1 >= 0 else 0
                gx = img[ch, y, xp] - img[ch, y, xm]
                gy = img[ch, yp, x] - img[ch, ym, x]
                mag = math.sqrt(gx * gx + gy * gy)
                ang = math.degrees(math.atan2(gy, gx))
                if ang < 0.0:
                    ang += period
                if ang >= period:
                    ang -= period
                t = ang * (bins / period)
                i0 = int(t)
                if i0 > bins - 1:
                    i0 = bins - 1
                frac = t - i0
                i1 = i0 + 1
                if i1 == bins:
                    i1 = 0
                hist[y // cell, x // cell, ch, i0] += mag * (1.0 - frac)
                hist[y // cell, x // cell, ch, i1] += mag * frac
    return hist


# ---------------------------------------------------------------------------
# bilinear resampling of an axis-aligned crop box (full image = plain resize)
#
# Half-pixel centers; samples clamp to the box edges (replicate).  The box
# is (y0, x0, bh, bw) in source pixel coordinates.

def _bilinear_numpy(img: np.ndarray, out_h: int, out_w: int,
                    y0: float, x0: float, bh: float, bw: float) -> np.ndarray:
    c, h, w = img.shape
    src = img.astype(np.float64, copy=False)
    sy = y0 + (np.arange(out_h) + 0.5) * (bh / out_h) - 0.5
    sx = x0 + (np.arange(out_w) + 0.5) * (bw / out_w) - 0.5
    sy = np.clip(sy, y0, y0 + bh - 1.0)
    sx = np.clip(sx, x0, x0 + bw - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    yi = np.floor(sy).astype(np.int64)
    xi = np.floor(sx).astype(np.int64)
    wy = sy - yi
    wx = sx - xi
    yj = np.minimum(yi + 1, h - 1)
    xj = np.minimum(xi + 1, w - 1)
    top = src[:, yi[:, None], xi[None, :]] * (1.0 - wx)[None, None, :] \
        + src[:, yi[:, None], xj[None, :]] * wx[None, None, :]
    bot = src[:, yj[:, None], xi[None, :]] * (1.0 - wx)[None, None, :] \
        + src[:, yj[:, None], xj[None, :]] * wx[None, None, :]
    return top * (1.0 - wy)[None, :, None] + bot * wy[None, :, None]


def _bilinear_loops(img, out_h, out_w, y0, x0, bh, bw):
    c, h, w = img.shape
    out = np.empty((c, out_h, out_w), dtype=np.float64)
    for oy in range(out_h):
        sy = y0 + (oy + 0.5) * (bh / out_h) - 0.5
        if sy < y0:
            sy = y0
        if sy > y0 + bh - 1.0:
            sy = y0 + bh - 1.0
        if sy < 0.0:
            sy = 0.0
        if sy > h - 1.0:
            sy = h - 1.0
        yi = int(math.floor(sy))
        wy = sy - yi
        yj = yi + 1 if yi + 1 < h else h - 1
        for ox in range(out_w):
            sx = x0 + (ox + 0.5) * (bw / out_w) - 0.5
            if sx < x0:
                sx = x0
            if sx > x0 + bw - 1.0:
                sx = x0 + bw - 1.0
            if sx < 0.0:
                sx = 0.0
            if sx > w - 1.0:
                sx = w - 1.0
            xi = int(math.floor(sx))
            wx = sx - xi
            xj = xi + 1 if xi + 1 < w else w - 1
            for ch in range(c):
                top = img[ch, yi, xi] * (1.0 - wx) + img[ch, yi, xj] * wx
                bot = img[ch, yj, xi] * (1.0 - wx) + img[ch, yj, xj] * wx
                out[ch, oy, ox] = top * (1.0 - wy) + bot * wy
    return out


if _HAVE_NUMBA:
    _hog_cells_numba = njit(cache=True)(_hog_cells_loops)
    _bilinear_numba = njit(cache=True)(_bilinear_loops)
else:
    _hog_cells_numba = None
    _bilinear_numba = None


def hog_cells(img: np.ndarray, bins: int, cell: int, period: float = 180.0) -> np.ndarray:
    """Raw magnitude-weighted orientation histograms per cell.

    img: (C, H, W) with H, W divisible by cell.  Returns float64
    (H/cell, W/cell, C, bins).
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    if _HAVE_NUMBA:
        return _hog_cells_numba(img, bins, cell, period)
    return _hog_cells_numpy(img, bins, cell, period)


def bilinear_resample(img: np.ndarray, out_h: int, out_w: int,
                      box: tuple | None = None) -> np.ndarray:
    """Bilinear resample of a crop box (default: the whole image) to
    (out_h, out_w).  img: (C, H, W); returns float64 (C, out_h, out_w)."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    if box is None:
        box = (0.0, 0.0, float(img.shape[1]), float(img.shape[2]))
    y0, x0, bh, bw = (float(v) for v in box)
    if _HAVE_NUMBA:
        return _bilinear_numba(img, out_h, out_w, y0, x0, bh, bw)
    return _bilinear_numpy(img, out_h, out_w, y0, x0, bh, bw)


def implementations() -> dict:
    """Both backends of each kernel, for equivalence tests and benchmarks."""
    return {
        "hog_cells": {"numpy": _hog_cells_numpy, "numba": _hog_cells_numba},
        "bilinear_resample": {"numpy": _bilinear_numpy, "numba": _bilinear_numba},
    }
