import numpy as np
import pytest

from fastmim import models
from fastmim.masking import MaskConfig, sample_mask
from fastmim.models import (DecoderConfig, EncoderConfig, ModelConfigError,
                            build_bundle, decode, encode, load_checkpoint,
                            reinit_truncated, save_checkpoint, sincos_pe,
                            target_dim_for)
from fastmim.tensor import Tensor


def tiny_iso(depth=2, embed=32, heads=2, **kw):
    return EncoderConfig(family="isotropic", patch_size=16, embed_dim=embed,
                         depth=depth, heads=heads, **kw)


def tiny_hier(**kw):
    return EncoderConfig(family="hierarchical", patch_size=4, embed_dim=16,
                         stage_depths=(1, 1, 1, 1), heads=2,
                         use_class_token=False, **kw)


def test_decoder_notation_roundtrip():
    cfg = DecoderConfig.from_notation("1b256d")
    assert cfg.blocks == 1 and cfg.width == 256
    assert cfg.notation == "1b256d"
    assert DecoderConfig.from_notation("8b512d").notation == "8b512d"
    for bad in ("b256d", "1x256d", "256d", "0b64d"):
        with pytest.raises(ModelConfigError):
            DecoderConfig.from_notation(bad)


def test_decoder_defaults_table():
    assert models.DECODER_DEFAULTS == {
        "isotropic-base": "1b256d", "isotropic-large": "8b512d",
        "hierarchical-base": "4b256d", "hierarchical-large": "4b512d"}


def test_patch_counts():
    for res, n in ((224, 196), (128, 64)):
        bundle = build_bundle(tiny_iso(), DecoderConfig(1, 32), mask_size=16, seed=0)
        x = Tensor(np.zeros((1, 3, res, res), dtype=np.float32))
        tokens = models.patch_embed(x, bundle)
        assert tokens.shape == (1, n, 32)


def test_zero_image_zero_bias_gives_zero_embeddings():
    bundle = build_bundle(tiny_iso(), DecoderConfig(1, 32), mask_size=16, seed=0)
    x = Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32))
    tokens = models.patch_embed(x, bundle)  # bias initializes to zero
    assert np.array_equal(tokens.data, np.zeros_like(tokens.data))


def test_sincos_pe_properties():
    pe = sincos_pe(8, 8, 16)
    assert pe.shape == (64, 16)
    assert pe.min() >= -1.0 and pe.max() <= 1.0
    assert np.array_equal(pe, sincos_pe(8, 8, 16))
    # distinct grid positions embed distinctly
    assert len({tuple(np.round(row, 9)) for row in pe}) == 64
    pe4 = sincos_pe(8, 8, 4)
    assert len({tuple(np.round(row, 9)) for row in pe4}) == 64
    with pytest.raises(ModelConfigError):
        sincos_pe(4, 4, 6)


def test_target_dims():
    assert target_dim_for("pixel", 16) == 768
    assert target_dim_for("hog", 16, bins=9, cell=8) == 108
    assert target_dim_for("hog", 32, bins=9, cell=8) == 432
    with pytest.raises(ModelConfigError):
        target_dim_for("hog", 12, cell=8)


def test_token_count_law():
    n224 = (224 // 16) ** 2
    n128 = (128 // 16) ** 2
    assert (n224, n128) == (196, 64)
    assert 0.66 < 1 - n128 / n224 < 0.70


def test_hierarchical_stage_grids():
    enc = tiny_hier()
    bundle = build_bundle(enc, DecoderConfig(1, 32), mask_size=32, seed=0)
    x = Tensor(np.random.default_rng(0).random((1, 3, 128, 128)).astype(np.float32))
    out = encode(bundle, x)
    assert out.shape == (1, 16, 16 * 8)  # 4x4 final grid, 8x width
    assert enc.window_for(128) == 4
    x64 = Tensor(np.random.default_rng(0).random((1, 3, 64, 64)).astype(np.float32))
    assert encode(bundle, x64).shape == (1, 4, 128)


def test_truncation_noop_matches_full():
    rng = np.random.default_rng(1)
    x = Tensor(rng.random((1, 3, 32, 32)).astype(np.float32))
    full = build_bundle(tiny_iso(depth=3), DecoderConfig(1, 32), mask_size=16, seed=3)
    trunc = build_bundle(tiny_iso(depth=3, truncate_to=3), DecoderConfig(1, 32),
                         mask_size=16, seed=3)
    assert np.array_equal(encode(full, x).data, encode(trunc, x).data)


def test_truncation_drops_blocks():
    enc = tiny_iso(depth=4, truncate_to=2)
    assert enc.depths_used() == (2,)
    hier = tiny_hier(truncate_to=3)
    assert hier.depths_used() == (1, 1, 1, 0)


def test_discard_masked_token_counts():
    enc = tiny_iso(discard_masked=True)
    bundle = build_bundle(enc, DecoderConfig(1, 32), mask_size=16, seed=0)
    mask = sample_mask(2, 128, MaskConfig(mask_size=16, ratio=0.75), seed=1)
    x = Tensor(np.random.default_rng(0).random((2, 3, 128, 128)).astype(np.float32))
    out = encode(bundle, x, mask=mask)
    assert out.shape == (2, 16 + 1, 32)  # 25% of 64 tokens plus class token
    pred = decode(bundle, out, mask)
    assert pred.shape == (2, 48, bundle.target_dim)


def test_decode_shapes_and_mask_pairing(rng):
    bundle = build_bundle(tiny_iso(), DecoderConfig(1, 64), target_kind="hog",
                          mask_size=16, seed=0)
    mask = sample_mask(2, 32, MaskConfig(mask_size=16, ratio=0.75), seed=0)
    x = Tensor(rng.random((2, 3, 32, 32)).astype(np.float32))
    pred = decode(bundle, encode(bundle, x), mask)
    assert pred.shape == (2, 3, 108)
    bad_mask = sample_mask(2, 32, MaskConfig(mask_size=8, ratio=0.75), seed=0)
    with pytest.raises(ModelConfigError):
        decode(bundle, encode(bundle, x), bad_mask)


def test_permutation_equivariance(rng):
    enc = tiny_iso(use_class_token=False, use_pos_embed=False)
    bundle = build_bundle(enc, DecoderConfig(1, 32), mask_size=16, seed=2)
    x = rng.random((1, 3, 64, 64)).astype(np.float32)
    perm = rng.permutation(16)
    blocks = x.reshape(3, 4, 16, 4, 16).transpose(1, 3, 0, 2, 4).reshape(16, 3, 16, 16)
    permuted = blocks[perm].reshape(4, 4, 3, 16, 16).transpose(2, 0, 3, 1, 4)
    xp = np.ascontiguousarray(permuted.reshape(1, 3, 64, 64))
    out = encode(bundle, Tensor(x)).data[0]
    outp = encode(bundle, Tensor(xp)).data[0]
    assert np.abs(outp - out[perm]).max() < 1e-5


def test_gradient_flow_all_parameters(rng):
    from fastmim.masking import apply_mask
    from fastmim.objective import extract_targets, masked_l2_loss

    enc = tiny_iso()
    nonzero = None
    for seed in range(5):
        bundle = build_bundle(enc, DecoderConfig(1, 32), target_kind="hog",
                              mask_size=16, seed=seed)
        if nonzero is None:
            nonzero = {name: False for name in bundle.params}
        r = np.random.default_rng(seed)
        x = r.random((2, 3, 32, 32)).astype(np.float32)
        mask = sample_mask(2, 32, MaskConfig(mask_size=16, ratio=0.75), seed=seed)
        masked = apply_mask(Tensor(x), mask, bundle.mask_token)
        pred = decode(bundle, encode(bundle, masked, mask=mask), mask)
        loss = masked_l2_loss(pred, extract_targets(x, mask, "hog"))
        loss.backward()
        for name, p in bundle.params.items():
            if p.grad is not None and np.linalg.norm(p.grad) > 0:
                nonzero[name] = True
    missing = [n for n, ok in nonzero.items() if not ok]
    assert not missing, f"parameters without gradient over 5 seeds: {missing}"


def test_resolution_transplant(rng):
    for enc in (tiny_iso(), tiny_hier()):
        bundle = build_bundle(enc, DecoderConfig(1, 32),
                              mask_size=16 if enc.family == "isotropic" else 32,
                              seed=0)
        for res in (128, 224):
            x = Tensor(rng.random((1, 3, res, res)).astype(np.float32))
            out = encode(bundle, x)
            assert np.all(np.isfinite(out.data))


def test_reinit_truncated():
    enc = tiny_iso(depth=12, truncate_to=10, embed=48, heads=4)
    bundle = build_bundle(enc, DecoderConfig(1, 64), mask_size=16, seed=0)
    before = bundle.snapshot()
    names_before = list(bundle.params)
    reinit_truncated(bundle, 12, seed=9)
    gained = [n for n in bundle.params if n not in names_before]
    assert {n.split(".")[1] for n in gained} == {"block10", "block11"}
    for name, arr in before.items():
        assert np.array_equal(bundle.params[name].data, arr)
    for res in (128, 224):
        x = Tensor(np.random.default_rng(0).random((1, 3, res, res)).astype(np.float32))
        assert np.all(np.isfinite(encode(bundle, x).data))

    noop = build_bundle(tiny_iso(depth=2, truncate_to=2), DecoderConfig(1, 32),
                        mask_size=16, seed=0)
    snap = noop.snapshot()
    reinit_truncated(noop, 2)
    assert list(noop.params) == list(snap)
    assert all(np.array_equal(noop.params[n].data, snap[n]) for n in snap)


def test_registry_deterministic_and_unique():
    a = build_bundle(tiny_iso(), DecoderConfig(2, 32), mask_size=16, seed=0)
    b = build_bundle(tiny_iso(), DecoderConfig(2, 32), mask_size=16, seed=0)
    assert list(a.params) == list(b.params)
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)
    assert len(set(a.params)) == len(a.params)
    assert "mask_token" in a.params


def test_checkpoint_roundtrip(tmp_path):
    bundle = build_bundle(tiny_iso(), DecoderConfig(1, 32), mask_size=16, seed=5)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, bundle, step=17, digest="abc123")
    ckpt = load_checkpoint(path)
    assert ckpt["step"] == 17 and ckpt["digest"] == "abc123"
    other = build_bundle(tiny_iso(), DecoderConfig(1, 32), mask_size=16, seed=6)
    models.apply_checkpoint(other, ckpt)
    for name, p in bundle.params.items():
        assert np.array_equal(other.params[name].data, p.data)


def test_config_validation_errors():
    with pytest.raises(ModelConfigError):
        EncoderConfig(family="conv").validate()
    with pytest.raises(ModelConfigError):
        EncoderConfig(family="hierarchical", discard_masked=True, patch_size=4).validate()
    with pytest.raises(ModelConfigError):
        EncoderConfig(embed_dim=30, heads=4).validate()
    with pytest.raises(ModelConfigError):
        EncoderConfig(depth=4, truncate_to=9).validate()
    with pytest.raises(ModelConfigError):
        tiny_hier(window=5).validate_resolution(128)
    with pytest.raises(ModelConfigError):
        tiny_hier().validate_resolution(48)
    with pytest.raises(ModelConfigError):
        tiny_iso().validate_resolution(40)
