"""Ground-truth targets per masked patch and the masked l2 loss.

Targets come from the clean image: dataset-normalized RGB blocks, or cell
vectors of a whole-image HOG field sliced under each masked block.  The
loss is mean squared error over masked-patch elements only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .hog import HogConfig, hog_extract
from .imageio import NormStats, normalize
from .masking import BlockMask
from .tensor import Tensor


class TargetError(ValueError):
    pass


@dataclass
class TargetField:
    """(B, N_mask, target_dim) ground truth for the masked blocks.

    layout = (mask_size, cell, bins, channels); cell/bins are 0 for pixel
    targets.
    """
    kind: str
    data: np.ndarray
    layout: tuple

    @property
    def target_dim(self) -> int:
        return self.data.shape[-1]


def _blockify(field: np.ndarray, block: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N_blocks, block*block*C) in raster block order."""
    b, c, h, w = field.shape
    gh, gw = h // block, w // block
    out = field.reshape(b, c, gh, block, gw, block)
    out = out.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(out).reshape(b, gh * gw, c * block * block)


def extract_targets(clean_batch, mask: BlockMask, kind: str,
                    hog_cfg: HogConfig | None = None,
                    norm_stats: NormStats | None = None) -> TargetField:
    """Targets from the clean (unmasked) image, gathered at masked blocks."""
    if isinstance(clean_batch, np.ndarray):
        clean = clean_batch
    elif hasattr(clean_batch, "data"):
        clean = clean_batch.data
    else:
        clean = np.asarray(clean_batch)
    if clean.ndim != 4 or clean.shape[1] != 3:
        raise TargetError(f"expected clean (B,3,H,W) images, got {clean.shape}")
    b, _, h, w = clean.shape
    ms = mask.mask_size
    if h % ms or w % ms:
        raise TargetError(f"mask size {ms} must divide image {h}x{w}")
    if mask.grid.shape != (b, h // ms, w // ms):
        raise TargetError(
            f"mask grid {mask.grid.shape} does not cover {b} images of {h}x{w}")
    ids = mask.masked_ids()

    if kind == "pixel":
        stats = norm_stats if norm_stats is not None else NormStats.identity()
        blocks = _blockify(normalize(clean, stats), ms)
        data = np.take_along_axis(blocks, ids[:, :, None], axis=1)
        return TargetField(kind="pixel", data=np.ascontiguousarray(data),
                           layout=(ms, 0, 0, 3))

    if kind == "hog":
        cfg = hog_cfg if hog_cfg is not None else HogConfig()
        cfg.validate(h, w, mask_size=ms)
        field = hog_extract(clean, cfg)
        # cell grid -> per-block cell vectors, raster order within the block
        fb = field.data.transpose(0, 3, 1, 2)  # (B, F, Hc, Wc)
        blocks = _blockify(fb, ms // cfg.cell)
        data = np.take_along_axis(blocks, ids[:, :, None], axis=1)
        return TargetField(kind="hog", data=np.ascontiguousarray(data),
                           layout=(ms, cfg.cell, cfg.bins, cfg.channels))

    raise TargetError(f"unknown target kind {kind!r}")


def masked_l2_loss(pred: Tensor, target: TargetField) -> Tensor:
    """Mean squared error over all masked-patch elements."""
    t = Tensor(target.data.astype(pred.dtype.type))
    if pred.shape != t.shape:
        raise T.ShapeError(f"prediction {pred.shape} vs target {t.shape}")
    return T.mse(pred, t)


def scatter_pixel_prediction(clean: np.ndarray, mask: BlockMask,
                             pred: np.ndarray, stats: NormStats) -> np.ndarray:
    """Paste denormalized pixel-block predictions into the clean image at the
    masked positions (for visual inspection)."""
    from .imageio import denormalize

    b, c, h, w = clean.shape
    ms = mask.mask_size
    gw = w // ms
    ids = mask.masked_ids()
    out = clean.copy()
    for i in range(b):
        for j, blk in enumerate(ids[i]):
            by, bx = divmod(int(blk), gw)
            patch = pred[i, j].reshape(c, ms, ms)
            out[i, :, by * ms:(by + 1) * ms, bx * ms:(bx + 1) * ms] = \
                denormalize(patch, stats)
    return out


def scatter_hog_prediction(field: np.ndarray, mask: BlockMask, pred: np.ndarray,
                           cfg: HogConfig) -> np.ndarray:
    """Paste HOG-cell predictions into a ground-truth field at the masked
    blocks; returns (B, Hc, Wc, F)."""
    b, hc, wc, f = field.shape
    cpb = mask.mask_size // cfg.cell
    gw = wc // cpb
    ids = mask.masked_ids()
    out = field.copy()
    for i in range(b):
        for j, blk in enumerate(ids[i]):
            by, bx = divmod(int(blk), gw)
            patch = pred[i, j].reshape(f, cpb, cpb).transpose(1, 2, 0)
            out[i, by * cpb:(by + 1) * cpb, bx * cpb:(bx + 1) * cpb, :] = patch
    return out
