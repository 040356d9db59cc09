import numpy as np
import pytest

from conftest import max_rel_err, numeric_grad
from fastmim import tensor as T
from fastmim.hog import HogConfig, hog_oracle
from fastmim.imageio import NormStats, normalize
from fastmim.masking import BlockMask, MaskConfig, sample_mask
from fastmim.objective import (TargetError, extract_targets, masked_l2_loss,
                               scatter_hog_prediction, scatter_pixel_prediction)
from fastmim.tensor import Tensor


def test_pixel_target_dims(rng):
    clean = rng.random((2, 3, 64, 64)).astype(np.float32)
    mask = sample_mask(2, 64, MaskConfig(mask_size=16, ratio=0.75), seed=0)
    field = extract_targets(clean, mask, "pixel", norm_stats=NormStats.identity())
    assert field.data.shape == (2, 12, 768)
    assert field.layout == (16, 0, 0, 3)


def test_hog_target_dims_and_oracle_slicing(rng):
    clean = rng.random((1, 3, 64, 64)).astype(np.float32)
    mask = sample_mask(1, 64, MaskConfig(mask_size=32, ratio=0.75), seed=1)
    field = extract_targets(clean, mask, "hog", hog_cfg=HogConfig())
    assert field.data.shape == (1, 3, 432)
    # cross-check one masked block against the oracle's cell grid
    oracle = hog_oracle(clean[0]).data[0]  # (8, 8, 27)
    blk = int(mask.masked_ids()[0][0])
    by, bx = divmod(blk, 2)
    cells = oracle[by * 4:(by + 1) * 4, bx * 4:(bx + 1) * 4, :]  # (4,4,27)
    expect = cells.transpose(2, 0, 1).reshape(-1)
    assert np.abs(field.data[0, 0] - expect).max() < 1e-5


def test_pixel_targets_are_dataset_normalized(rng):
    clean = rng.random((1, 3, 32, 32)).astype(np.float32)
    stats = NormStats(mean=[0.2, 0.4, 0.6], std=[0.5, 0.5, 0.5])
    mask = sample_mask(1, 32, MaskConfig(mask_size=16, ratio=0.75), seed=2)
    field = extract_targets(clean, mask, "pixel", norm_stats=stats)
    blk = int(mask.masked_ids()[0][0])
    by, bx = divmod(blk, 2)
    norm = normalize(clean, stats)[0, :, by * 16:(by + 1) * 16, bx * 16:(bx + 1) * 16]
    assert np.allclose(field.data[0, 0], norm.reshape(-1), atol=1e-7)


def test_targets_come_from_the_clean_image(rng):
    clean = rng.random((1, 3, 32, 32)).astype(np.float32)
    mask = sample_mask(1, 32, MaskConfig(mask_size=16, ratio=0.75), seed=3)
    a = extract_targets(clean, mask, "hog")
    b = extract_targets(clean, mask, "hog")  # no mask-token influence anywhere
    assert np.array_equal(a.data, b.data)


def test_masked_l2_contracts(rng):
    target = extract_targets(rng.random((1, 3, 32, 32)).astype(np.float32),
                             sample_mask(1, 32, MaskConfig(16, 0.75), seed=0),
                             "pixel", norm_stats=NormStats.identity())
    pred = Tensor(target.data.copy())
    assert masked_l2_loss(pred, target).item() == 0.0
    off = Tensor(target.data + 1.0)
    assert masked_l2_loss(off, target).item() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(T.ShapeError):
        masked_l2_loss(Tensor(target.data[:, :1]), target)


def test_masked_l2_gradient_matches_finite_differences(rng):
    with T.default_dtype(np.float64):
        target = extract_targets(rng.random((1, 3, 32, 32)),
                                 sample_mask(1, 32, MaskConfig(16, 0.75), seed=1),
                                 "hog")
        pred = Tensor(rng.standard_normal(target.data.shape), requires_grad=True)
        loss = masked_l2_loss(pred, target)
        loss.backward()
        closed = 2.0 * (pred.data - target.data) / target.data.size
        assert np.allclose(pred.grad, closed, atol=1e-12)
        num = numeric_grad(lambda: float(masked_l2_loss(pred, target).data),
                           pred.data, coords=range(0, pred.size, 37))
        assert max_rel_err(pred.grad, num) < 1e-6


def test_loss_locality_pixel_targets(rng):
    clean = rng.random((1, 3, 64, 64)).astype(np.float32)
    grid = np.ones((1, 4, 4), dtype=bool)
    grid[0, 1, 1] = False
    mask = BlockMask(grid=grid, mask_size=16)
    base = extract_targets(clean, mask, "pixel", norm_stats=NormStats.identity())
    poked = clean.copy()
    poked[0, :, 0:16, 0:16] += 0.3  # a fully visible block
    after = extract_targets(poked, mask, "pixel", norm_stats=NormStats.identity())
    assert np.array_equal(base.data, after.data)


def test_loss_locality_hog_targets(rng):
    clean = rng.random((1, 3, 64, 64)).astype(np.float32)
    grid = np.ones((1, 4, 4), dtype=bool)
    grid[0, 1, 1] = False  # masked block spans pixels [16:32, 16:32]
    mask = BlockMask(grid=grid, mask_size=16)
    base = extract_targets(clean, mask, "hog")
    poked = clean.copy()
    poked[0, :, 40:48, 40:48] += 0.2  # > 1 px from the masked block's border
    after = extract_targets(poked, mask, "hog")
    assert np.array_equal(base.data, after.data)
    # perturbing right at the border does leak into border cells
    poked2 = clean.copy()
    poked2[0, :, 32, 16:32] += 0.5
    leaked = extract_targets(poked2, mask, "hog")
    assert not np.array_equal(base.data, leaked.data)


def test_scatter_roundtrips(rng):
    clean = rng.random((1, 3, 32, 32)).astype(np.float32)
    stats = NormStats.identity()
    mask = sample_mask(1, 32, MaskConfig(16, 0.75), seed=5)
    target = extract_targets(clean, mask, "pixel", norm_stats=stats)
    recon = scatter_pixel_prediction(clean, mask, target.data, stats)
    assert np.allclose(recon, clean, atol=1e-7)

    hog_target = extract_targets(clean, mask, "hog")
    from fastmim.hog import hog_extract
    field = hog_extract(clean).data
    recon_f = scatter_hog_prediction(field, mask, hog_target.data, HogConfig())
    assert np.allclose(recon_f, field, atol=1e-6)


def test_extract_validation(rng):
    clean = rng.random((1, 3, 32, 32)).astype(np.float32)
    mask = sample_mask(1, 32, MaskConfig(16, 0.75), seed=0)
    with pytest.raises(TargetError):
        extract_targets(clean, mask, "tokens")
    with pytest.raises(TargetError):
        extract_targets(clean[:, :, :16], mask, "pixel")
