"""Block-wise random masks on raw images and masked-input construction.

The mask grid marks visible blocks; its nearest-neighbor pixel expansion is
the spatial mask S, and the masked input is X*S + token*(1-S).  Exactly
round(ratio * blocks) blocks are masked per sample so loss denominators are
constant and tests exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class MaskConfigError(ValueError):
    pass


@dataclass
class MaskConfig:
    mask_size: int = 16
    ratio: float = 0.75
    level: str = "image"  # or "patch"

    def validate(self, resolution: int) -> None:
        if resolution % self.mask_size:
            raise MaskConfigError(
                f"mask_size {self.mask_size} must divide resolution {resolution}")
        if not 0.0 < self.ratio < 1.0:
            raise MaskConfigError(f"ratio must be in (0,1), got {self.ratio}")
        if self.level not in ("image", "patch"):
            raise MaskConfigError(f"level must be image|patch, got {self.level!r}")
        n = (resolution // self.mask_size) ** 2
        k = masked_count(self.ratio, n)
        if k == 0 or k == n:
            raise MaskConfigError(
                f"ratio {self.ratio} over {n} blocks masks {k}: nothing to reconstruct")


def masked_count(ratio: float, blocks: int) -> int:
    """round(ratio * blocks), half away from zero."""
    return int(np.floor(ratio * blocks + 0.5))


@dataclass
class BlockMask:
    """Per-sample visibility grid plus its pixel expansion.

    grid: bool (B, H/ms, W/ms), True = visible.
    pixel_mask: float {0,1} (B, H, W), nearest-neighbor expansion of grid.
    """
    grid: np.ndarray
    mask_size: int

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.grid.ndim != 3:
            raise MaskConfigError(f"grid must be (B,Hb,Wb), got {self.grid.shape}")

    @property
    def batch(self) -> int:
        return self.grid.shape[0]

    @property
    def blocks(self) -> int:
        return self.grid.shape[1] * self.grid.shape[2]

    @property
    def masked_count(self) -> np.ndarray:
        return (~self.grid).reshape(self.batch, -1).sum(axis=1)

    @property
    def pixel_mask(self) -> np.ndarray:
        ms = self.mask_size
        return np.repeat(np.repeat(self.grid, ms, axis=1), ms, axis=2).astype(np.float32)

    def flat(self) -> np.ndarray:
        """Visibility per block in raster order, (B, N)."""
        return self.grid.reshape(self.batch, -1)

    def masked_ids(self) -> np.ndarray:
        """Masked block indices in raster order, (B, k); k equal across samples."""
        flat = self.flat()
        counts = (~flat).sum(axis=1)
        k = int(counts[0])
        if not np.all(counts == k):
            raise MaskConfigError("non-uniform masked counts across batch")
        return np.nonzero(~flat)[1].reshape(self.batch, k)

    def visible_ids(self) -> np.ndarray:
        flat = self.flat()
        k = int(flat[0].sum())
        return np.nonzero(flat)[1].reshape(self.batch, k)


@dataclass
class MaskToken:
    """Fill value for masked regions: RGB (1,1,3) at image level, or an
    embedding vector at patch level.  Learnable tokens join the registry."""
    value: Tensor
    level: str
    learnable: bool = True

    @classmethod
    def image_level(cls, learnable: bool = True, init=None) -> "MaskToken":
        dtype = T.current_dtype()
        data = np.zeros((1, 1, 3), dtype=dtype) if init is None else \
            np.asarray(init, dtype=dtype).reshape(1, 1, 3)
        return cls(value=Tensor(data, requires_grad=learnable), level="image",
                   learnable=learnable)

    @classmethod
    def patch_level(cls, dim: int, learnable: bool = True, init=None) -> "MaskToken":
        dtype = T.current_dtype()
        data = np.zeros(dim, dtype=dtype) if init is None else \
            np.asarray(init, dtype=dtype).reshape(dim)
        return cls(value=Tensor(data, requires_grad=learnable), level="patch",
                   learnable=learnable)


def sample_mask(batch_size: int, resolution: int, cfg: MaskConfig, seed) -> BlockMask:
    """Per-sample uniform choice of exactly round(ratio*N) masked blocks."""
    cfg.validate(resolution)
    side = resolution // cfg.mask_size
    n = side * side
    k = masked_count(cfg.ratio, n)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    grid = np.ones((batch_size, n), dtype=bool)
    for b in range(batch_size):
        grid[b, rng.permutation(n)[:k]] = False
    return BlockMask(grid=grid.reshape(batch_size, side, side), mask_size=cfg.mask_size)


def apply_mask(batch, mask: BlockMask, token: MaskToken) -> Tensor:
    """Masked input X*S + token*(1-S); differentiable w.r.t. the token."""
    if token.level != "image":
        raise MaskConfigError("apply_mask needs an image-level token")
    if isinstance(batch, Tensor):
        x = batch
    elif isinstance(batch, np.ndarray):
        x = Tensor(batch)
    else:
        x = Tensor(batch.data)  # ImageBatch
    if x.ndim != 4 or x.shape[1] != 3:
        raise T.ShapeError(f"apply_mask: expected (B,3,H,W), got {x.shape}")
    s_np = mask.pixel_mask[:, None, :, :].astype(x.dtype.type)
    if s_np.shape[0] != x.shape[0] or s_np.shape[2:] != x.shape[2:]:
        raise T.ShapeError(
            f"apply_mask: mask {s_np.shape} does not match images {x.shape}")
    s = Tensor(s_np)
    inv = Tensor(1.0 - s_np)
    tok = token.value.reshape(3, 1, 1)
    return T.add(T.mul(x, s), T.mul(tok, inv))


def apply_mask_tokens(embeddings: Tensor, mask: BlockMask, token: MaskToken) -> Tensor:
    """Replace masked rows of (B, N, D) patch embeddings with the token."""
    if token.level != "patch":
        raise MaskConfigError("apply_mask_tokens needs a patch-level token")
    if embeddings.ndim != 3:
        raise T.ShapeError(f"expected (B,N,D), got {embeddings.shape}")
    vis = mask.flat().astype(embeddings.dtype.type)[:, :, None]
    if vis.shape[1] != embeddings.shape[1]:
        raise T.ShapeError(
            f"mask has {vis.shape[1]} blocks but embeddings {embeddings.shape[1]} rows")
    v = Tensor(vis)
    inv = Tensor(1.0 - vis)
    return T.add(T.mul(embeddings, v), T.mul(token.value, inv))


def select_visible(embeddings: Tensor, mask: BlockMask):
    """Gather visible rows in raster order; the index map rebuilds full order."""
    vis = mask.visible_ids()
    index_map = {"visible": vis, "masked": mask.masked_ids(), "total": mask.blocks}
    return T.take_along(embeddings, vis), index_map
