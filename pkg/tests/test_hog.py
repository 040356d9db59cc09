import numpy as np
import pytest

from fastmim.hog import (HogConfig, HogConfigError, hog_extract, hog_oracle,
                         resolution_similarity, similarity_report)
from fastmim.imageio import SyntheticDataset


def quantized_image(rng, side=32):
    """u8-quantized pixels, like decoded PPM data (exact float arithmetic)."""
    return (rng.integers(0, 256, size=(3, side, side)) / 256.0).astype(np.float32)


def test_extract_matches_oracle(rng):
    for _ in range(25):
        img = rng.random((3, 32, 32)).astype(np.float32)
        fast = hog_extract(img).data[0]
        ref = hog_oracle(img).data[0]
        assert fast.shape == (4, 4, 27)
        assert np.abs(fast - ref.astype(np.float32)).max() < 1e-5


def test_constant_image_gives_zero_field():
    img = np.full((3, 16, 16), 0.6, dtype=np.float32)
    assert np.array_equal(hog_extract(img).data, np.zeros((1, 2, 2, 27), dtype=np.float32))
    assert np.array_equal(hog_oracle(img).data, np.zeros((1, 2, 2, 27)))


def test_vertical_step_energy_in_zero_degree_bin():
    img = np.zeros((3, 16, 16), dtype=np.float32)
    img[:, :, 8:] = 1.0  # gradient along +x, orientation 0 degrees
    field = hog_extract(img).data[0].reshape(2, 2, 3, 9)
    oracle = hog_oracle(img).data[0].reshape(2, 2, 3, 9)
    assert (field.sum(axis=3) > 0).any()
    for out in (field, oracle):
        energized = out[out.sum(axis=3) > 0]
        assert np.allclose(energized[:, 1:], 0.0, atol=1e-12)
        assert np.all(energized[:, 0] > 0)


def test_brightness_invariance_exact(rng):
    img = quantized_image(rng)
    shifted = img + np.float32(0.125)  # exactly representable shift
    a = hog_extract(img).data
    b = hog_extract(shifted).data
    assert np.array_equal(a, b)


def test_contrast_near_invariance(rng):
    img = quantized_image(rng)
    a = hog_extract(img).data
    b = hog_extract(img * np.float32(2.5)).data
    assert np.abs(a - b).max() < 1e-4


def test_horizontal_flip_property(rng):
    cfg = HogConfig()
    img = rng.random((3, 32, 32))
    ref = hog_oracle(img, cfg).data[0].reshape(4, 4, 3, 9)
    flipped = hog_oracle(img[:, :, ::-1].copy(), cfg).data[0].reshape(4, 4, 3, 9)
    # interior cells: grid mirrors, orientation reflects theta -> 180 - theta
    reflect = [(cfg.bins - b) % cfg.bins for b in range(cfg.bins)]
    for cy in range(1, 3):
        for cx in range(1, 3):
            got = flipped[cy, 3 - cx][:, reflect]
            assert np.abs(got - ref[cy, cx]).max() < 1e-10


def test_rotation_property_even_bins(rng):
    cfg = HogConfig(bins=8)
    img = rng.random((3, 32, 32))
    ref = hog_oracle(img, cfg).data[0].reshape(4, 4, 3, 8)
    rot = np.ascontiguousarray(np.rot90(img, k=1, axes=(1, 2)))
    out = hog_oracle(rot, cfg).data[0].reshape(4, 4, 3, 8)
    # ccw rotation: cell (cy,cx) -> (3-cx, cy); orientation shifts by 90 deg = bins/2
    for cy in range(1, 3):
        for cx in range(1, 3):
            got = out[3 - cx, cy]
            assert np.abs(np.roll(ref[cy, cx], 4, axis=-1) - got).max() < 1e-10


def test_field_invariants(rng):
    img = rng.random((3, 40, 40)).astype(np.float32)
    field = hog_extract(img).data[0].reshape(5, 5, 3, 9)
    norms = np.linalg.norm(field, axis=-1)
    assert field.min() >= 0.0
    assert norms.max() <= 1.0 + 1e-5


def test_config_validation():
    with pytest.raises(HogConfigError):
        hog_extract(np.zeros((3, 30, 30), dtype=np.float32))  # 8 does not divide 30
    with pytest.raises(HogConfigError):
        HogConfig(bins=1).validate(16, 16)
    with pytest.raises(HogConfigError):
        HogConfig().validate(32, 32, mask_size=12)


def test_signed_orientation_mode(rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    cfg = HogConfig(unsigned_orientation=False)
    fast = hog_extract(img, cfg).data[0]
    ref = hog_oracle(img, cfg).data[0]
    assert np.abs(fast - ref.astype(np.float32)).max() < 1e-5
    # a rising step and a falling step land in different bins when signed
    up = np.zeros((3, 16, 16), dtype=np.float32)
    up[:, :, 8:] = 1.0
    down = 1.0 - up
    assert not np.array_equal(hog_extract(up, cfg).data, hog_extract(down, cfg).data)


def test_grayscale_mode(rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    cfg = HogConfig(per_channel=False)
    field = hog_extract(img, cfg)
    assert field.data.shape == (1, 2, 2, 9)
    assert np.abs(field.data[0] - hog_oracle(img, cfg).data[0]).max() < 1e-5


def test_similarity_identity_and_formula(rng):
    a = rng.random((3, 32, 32))
    assert similarity_report(a, a, "ssim") == pytest.approx(1.0)
    assert similarity_report(a, a, "psnr") == float("inf")
    b = a + 0.01
    mse = float(((a - b) ** 2).mean())
    assert similarity_report(a, b, "psnr") == pytest.approx(10 * np.log10(1.0 / mse))
    with pytest.raises(ValueError):
        similarity_report(a, a[:, :16], "psnr")
    with pytest.raises(ValueError):
        similarity_report(a, a, "mae")


def test_ssim_detects_structural_damage(rng):
    a = rng.random((3, 32, 32))
    shuffled = a.reshape(3, -1)
    shuffled = rng.permutation(shuffled, axis=1).reshape(3, 32, 32)
    assert similarity_report(a, shuffled, "ssim") < 0.5


def test_resolution_similarity_directional(rng):
    ds = SyntheticDataset(seed=21, count=6, resolution=224)
    wins = 0
    for i in range(6):
        report = resolution_similarity(ds[i], 128)
        wins += report["hog_ssim"] > report["pixel_ssim"]
    assert wins >= 5


def test_resolution_similarity_validation():
    img = np.zeros((3, 224, 224), dtype=np.float32)
    with pytest.raises(HogConfigError):
        resolution_similarity(img, 100)  # 8*224/100 is not an integer
    with pytest.raises(HogConfigError):
        resolution_similarity(img, 128, view_jitter=(20.0, 0.0))
