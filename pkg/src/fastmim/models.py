"""Patch embedding, positional encoding, isotropic and windowed-hierarchical
encoders, the encoder-decoder bridge, and the reconstruction decoder.

All parameters live in a flat, insertion-ordered registry keyed by stable
names; checkpoints write the registry verbatim in the raw tensor dump
format.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .masking import BlockMask, MaskToken
from .tensor import Tensor

LN_EPS = 1e-6
INIT_STD = 0.02
CKPT_MAGIC = b"FMCK"
CKPT_VERSION = 1


class ModelConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    family: str = "isotropic"          # or "hierarchical"
    patch_size: int = 16               # hierarchical stem: 4
    embed_dim: int = 192
    depth: int = 12                    # isotropic
    stage_depths: tuple = (2, 2, 6, 2)  # hierarchical
    heads: int = 6                     # stage-1 heads for hierarchical
    window: int | None = None          # None: max(2, resolution // 32)
    truncate_to: int | None = None     # pre-training depth (blocks kept)
    discard_masked: bool = False
    use_class_token: bool = True
    use_pos_embed: bool = True

    def validate(self) -> None:
        if self.family not in ("isotropic", "hierarchical"):
            raise ModelConfigError(f"unknown encoder family {self.family!r}")
        if self.discard_masked and self.family != "isotropic":
            raise ModelConfigError("discard_masked requires the isotropic family")
        if self.embed_dim % self.heads:
            raise ModelConfigError(
                f"heads {self.heads} must divide embed_dim {self.embed_dim}")
        if self.embed_dim % 4:
            raise ModelConfigError("embed_dim must be divisible by 4 (sincos PE)")
        if self.truncate_to is not None and not 1 <= self.truncate_to <= self.total_depth:
            raise ModelConfigError(
                f"truncate_to {self.truncate_to} outside [1, {self.total_depth}]")
        if self.family == "hierarchical":
            if len(self.stage_depths) != 4:
                raise ModelConfigError("hierarchical encoder needs 4 stage depths")
            if self.patch_size != 4:
                raise ModelConfigError("hierarchical stem patch size must be 4")

    @property
    def total_depth(self) -> int:
        if self.family == "isotropic":
            return self.depth
        return int(sum(self.stage_depths))

    def depths_used(self) -> tuple:
        """Per-stage block counts during pre-training (truncation drops blocks
        from the end, last stage first)."""
        if self.family == "isotropic":
            kept = self.truncate_to or self.depth
            return (kept,)
        kept = self.truncate_to or self.total_depth
        drop = self.total_depth - kept
        depths = list(self.stage_depths)
        for s in range(3, -1, -1):
            take = min(drop, depths[s])
            depths[s] -= take
            drop -= take
        return tuple(depths)

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * (2 ** stage)

    def stage_heads(self, stage: int) -> int:
        return self.heads * (2 ** stage)

    @property
    def out_dim(self) -> int:
        return self.embed_dim if self.family == "isotropic" else self.embed_dim * 8

    def window_for(self, resolution: int) -> int:
        if self.window is not None:
            return self.window
        return max(2, resolution // 32)

    def validate_resolution(self, resolution: int) -> None:
        if resolution % self.patch_size:
            raise ModelConfigError(
                f"patch size {self.patch_size} must divide resolution {resolution}")
        if self.family == "hierarchical":
            if resolution % 32:
                raise ModelConfigError(
                    f"hierarchical encoder needs resolution divisible by 32, got {resolution}")
            side = resolution // self.patch_size
            if side % self.window_for(resolution):
                raise ModelConfigError(
                    f"window {self.window_for(resolution)} must divide stage-1 grid {side}")


_NOTATION = re.compile(r"^(\d+)b(\d+)d$")


@dataclass
class DecoderConfig:
    blocks: int = 1
    width: int = 256

    @property
    def notation(self) -> str:
        return f"{self.blocks}b{self.width}d"

    @classmethod
    def from_notation(cls, text: str) -> "DecoderConfig":
        m = _NOTATION.match(text.strip())
        if not m:
            raise ModelConfigError(f"decoder notation {text!r} is not 'NbMd'")
        cfg = cls(blocks=int(m.group(1)), width=int(m.group(2)))
        if cfg.blocks < 1 or cfg.width < 1:
            raise ModelConfigError(f"decoder {text!r}: blocks and width must be >= 1")
        return cfg


# per-encoder decoder defaults
DECODER_DEFAULTS = {
    "isotropic-base": "1b256d",
    "isotropic-large": "8b512d",
    "hierarchical-base": "4b256d",
    "hierarchical-large": "4b512d",
}


def target_dim_for(kind: str, mask_size: int, bins: int = 9, cell: int = 8,
                   channels: int = 3) -> int:
    if kind == "pixel":
        return mask_size * mask_size * 3
    if kind == "hog":
        if mask_size % cell:
            raise ModelConfigError(f"hog cell {cell} must divide mask size {mask_size}")
        return (mask_size // cell) ** 2 * bins * channels
    raise ModelConfigError(f"unknown target kind {kind!r}")


# ---------------------------------------------------------------------------
# parameter registry

def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled into [-2 std, 2 std]."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(100):
        bad = np.abs(out) > 2 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2 * std, 2 * std)


@dataclass
class ModelBundle:
    enc: EncoderConfig
    dec: DecoderConfig
    params: dict = field(default_factory=dict)
    no_decay: set = field(default_factory=set)
    mask_token: MaskToken | None = None
    target_dim: int = 0
    mask_size: int = 16
    seed: int = 0

    def param(self, name: str) -> Tensor:
        return self.params[name]

    def add(self, name: str, data: np.ndarray, decay: bool = True,
            learnable: bool = True) -> Tensor:
        if name in self.params:
            raise ModelConfigError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(data, dtype=T.current_dtype()), requires_grad=learnable)
        self.params[name] = t
        if not decay:
            self.no_decay.add(name)
        return t

    def trainable(self) -> dict:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def snapshot(self) -> dict:
        return {n: p.data.copy() for n, p in self.params.items()}


def _add_linear(bundle: ModelBundle, rng, name: str, din: int, dout: int) -> None:
    bundle.add(f"{name}.weight", trunc_normal(rng, (din, dout)))
    bundle.add(f"{name}.bias", np.zeros(dout), decay=False)


def _add_ln(bundle: ModelBundle, name: str, dim: int) -> None:
    bundle.add(f"{name}.g", np.ones(dim), decay=False)
    bundle.add(f"{name}.b", np.zeros(dim), decay=False)


def _add_block(bundle: ModelBundle, rng, name: str, dim: int) -> None:
    _add_ln(bundle, f"{name}.ln1", dim)
    _add_linear(bundle, rng, f"{name}.attn.qkv", dim, 3 * dim)
    _add_linear(bundle, rng, f"{name}.attn.proj", dim, dim)
    _add_ln(bundle, f"{name}.ln2", dim)
    _add_linear(bundle, rng, f"{name}.mlp.fc1", dim, 4 * dim)
    _add_linear(bundle, rng, f"{name}.mlp.fc2", 4 * dim, dim)


def build_bundle(enc: EncoderConfig, dec: DecoderConfig, *, target_kind: str = "hog",
                 mask_size: int = 16, bins: int = 9, cell: int = 8, channels: int = 3,
                 token_learnable: bool = True, seed: int = 0) -> ModelBundle:
    enc.validate()
    target_dim = target_dim_for(target_kind, mask_size, bins, cell, channels)
    bundle = ModelBundle(enc=enc, dec=dec, target_dim=target_dim,
                         mask_size=mask_size, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x90DE1)))

    depths = enc.depths_used()  # truncated-away blocks exist only after reinit
    if enc.family == "isotropic":
        _add_linear(bundle, rng, "patch_embed", enc.patch_size ** 2 * 3, enc.embed_dim)
        if enc.use_class_token:
            bundle.add("cls_token", trunc_normal(rng, (1, 1, enc.embed_dim)), decay=False)
        for i in range(depths[0]):
            _add_block(bundle, rng, f"enc.block{i}", enc.embed_dim)
        _add_ln(bundle, "enc.norm", enc.embed_dim)
    else:
        _add_linear(bundle, rng, "patch_embed", enc.patch_size ** 2 * 3, enc.embed_dim)
        for s in range(4):
            dim = enc.stage_dim(s)
            for i in range(depths[s]):
                _add_block(bundle, rng, f"enc.s{s}.block{i}", dim)
            if s < 3:
                _add_ln(bundle, f"enc.merge{s}.norm", 4 * dim)
                _add_linear(bundle, rng, f"enc.merge{s}", 4 * dim, 2 * dim)
        _add_ln(bundle, "enc.norm", enc.out_dim)

    _add_linear(bundle, rng, "bridge", enc.out_dim, dec.width)
    for i in range(dec.blocks):
        _add_block(bundle, rng, f"dec.block{i}", dec.width)
    _add_ln(bundle, "dec.norm", dec.width)
    _add_linear(bundle, rng, "head", dec.width, target_dim)

    if enc.discard_masked:
        token = MaskToken.patch_level(dec.width, learnable=token_learnable)
    else:
        token = MaskToken.image_level(learnable=token_learnable)
    bundle.mask_token = token
    bundle.params["mask_token"] = token.value
    bundle.no_decay.add("mask_token")
    return bundle


def reinit_truncated(bundle: ModelBundle, full_depth: int, seed: int = 1) -> ModelBundle:
    """Append freshly initialized blocks so the encoder reaches full_depth;
    every pre-trained parameter is preserved bit-exactly."""
    enc = bundle.enc
    kept = sum(enc.depths_used())
    if full_depth < kept:
        raise ModelConfigError(f"full depth {full_depth} below kept depth {kept}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x4E1)))
    if enc.family == "isotropic":
        for i in range(kept, full_depth):
            _add_block(bundle, rng, f"enc.block{i}", enc.embed_dim)
        enc.depth = max(enc.depth, full_depth)
    else:
        used = list(enc.depths_used())
        grow = full_depth - sum(used)
        full = list(enc.stage_depths)
        for s in range(4):
            while used[s] < full[s] and grow > 0:
                _add_block(bundle, rng, f"enc.s{s}.block{used[s]}", enc.stage_dim(s))
                used[s] += 1
                grow -= 1
    enc.truncate_to = None
    return bundle


# ---------------------------------------------------------------------------
# forward pieces

_PE_CACHE: dict = {}


def sincos_pe(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """2-d sine-cosine absolute positional embedding, (grid_h*grid_w, dim).

    Pure function of the grid, regenerated per resolution; values in [-1, 1].
    """
    if dim % 4:
        raise ModelConfigError(f"sincos PE needs dim divisible by 4, got {dim}")
    dtype = T.current_dtype()
    key = (grid_h, grid_w, dim, str(dtype))
    hit = _PE_CACHE.get(key)
    if hit is not None:
        return hit

    def axis_embed(positions: np.ndarray, half: int) -> np.ndarray:
        omega = 1.0 / (10000.0 ** (np.arange(half // 2, dtype=np.float64) / (half // 2)))
        ang = positions[:, None] * omega[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    ys, xs = np.meshgrid(np.arange(grid_h, dtype=np.float64),
                         np.arange(grid_w, dtype=np.float64), indexing="ij")
    pe = np.concatenate([axis_embed(ys.reshape(-1), dim // 2),
                         axis_embed(xs.reshape(-1), dim // 2)], axis=1)
    pe = np.ascontiguousarray(pe, dtype=dtype)
    _PE_CACHE[key] = pe
    return pe


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def affine_ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return T.add(T.mul(T.layernorm(x, LN_EPS), g), b)


def patchify(x: Tensor, patch: int) -> Tensor:
    """(B, 3, H, W) -> (B, N, patch*patch*3), raster patch order."""
    b, c, h, w = x.shape
    gh, gw = h // patch, w // patch
    x = x.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def patch_embed(x: Tensor, bundle: ModelBundle) -> Tensor:
    p = bundle.enc.patch_size
    return linear(patchify(x, p), bundle.param("patch_embed.weight"),
                  bundle.param("patch_embed.bias"))


def _attention(x: Tensor, bundle: ModelBundle, name: str, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    qkv = linear(x, bundle.param(f"{name}.qkv.weight"), bundle.param(f"{name}.qkv.bias"))
    qkv = qkv.reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = T.softmax(T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)))
    out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return linear(out, bundle.param(f"{name}.proj.weight"),
                  bundle.param(f"{name}.proj.bias"))


def _mlp(x: Tensor, bundle: ModelBundle, name: str) -> Tensor:
    h = T.gelu(linear(x, bundle.param(f"{name}.fc1.weight"), bundle.param(f"{name}.fc1.bias")))
    return linear(h, bundle.param(f"{name}.fc2.weight"), bundle.param(f"{name}.fc2.bias"))


def _block(x: Tensor, bundle: ModelBundle, name: str, heads: int) -> Tensor:
    h = affine_ln(x, bundle.param(f"{name}.ln1.g"), bundle.param(f"{name}.ln1.b"))
    x = T.add(x, _attention(h, bundle, f"{name}.attn", heads))
    h = affine_ln(x, bundle.param(f"{name}.ln2.g"), bundle.param(f"{name}.ln2.b"))
    return T.add(x, _mlp(h, bundle, f"{name}.mlp"))


def _window_block(x: Tensor, bundle: ModelBundle, name: str, heads: int,
                  window: int) -> Tensor:
    """Pre-norm block with attention restricted to non-shifted windows.
    x: (B, G, G, C)."""
    b, gh, gw, c = x.shape
    ws = min(window, gh, gw)
    if gh % ws or gw % ws:
        raise ModelConfigError(f"window {ws} must divide token grid {gh}x{gw}")

    def windows(t: Tensor) -> Tensor:
        t = t.reshape(b, gh // ws, ws, gw // ws, ws, c)
        t = t.transpose(0, 1, 3, 2, 4, 5)
        return t.reshape(b * (gh // ws) * (gw // ws), ws * ws, c)

    def unwindows(t: Tensor) -> Tensor:
        t = t.reshape(b, gh // ws, gw // ws, ws, ws, c)
        t = t.transpose(0, 1, 3, 2, 4, 5)
        return t.reshape(b, gh, gw, c)

    h = affine_ln(x, bundle.param(f"{name}.ln1.g"), bundle.param(f"{name}.ln1.b"))
    h = unwindows(_attention(windows(h), bundle, f"{name}.attn", heads))
    x = T.add(x, h)
    h = affine_ln(x, bundle.param(f"{name}.ln2.g"), bundle.param(f"{name}.ln2.b"))
    return T.add(x, _mlp(h, bundle, f"{name}.mlp"))


def _patch_merge(x: Tensor, bundle: ModelBundle, stage: int) -> Tensor:
    """2x2 token merging: (B, G, G, C) -> (B, G/2, G/2, 2C)."""
    b, gh, gw, c = x.shape
    x = x.reshape(b, gh // 2, 2, gw // 2, 2, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, gh // 2, gw // 2, 4 * c)
    x = affine_ln(x, bundle.param(f"enc.merge{stage}.norm.g"),
                  bundle.param(f"enc.merge{stage}.norm.b"))
    return linear(x, bundle.param(f"enc.merge{stage}.weight"),
                  bundle.param(f"enc.merge{stage}.bias"))


def encode(bundle: ModelBundle, x: Tensor, *, mask: BlockMask | None = None) -> Tensor:
    """Run the encoder on a (B, 3, H, W) input (already masked unless in
    discard mode).  Returns (B, N_out [+1 class], D_enc)."""
    enc = bundle.enc
    b, _, h, w = x.shape
    enc.validate_resolution(h)
    tokens = patch_embed(x, bundle)

    if enc.family == "isotropic":
        gh = h // enc.patch_size
        if enc.use_pos_embed:
            tokens = T.add(tokens, Tensor(sincos_pe(gh, w // enc.patch_size, enc.embed_dim)))
        if enc.discard_masked:
            if mask is None:
                raise ModelConfigError("discard_masked encoding needs the mask")
            if mask.blocks != tokens.shape[1]:
                raise ModelConfigError(
                    f"mask grid {mask.blocks} != token count {tokens.shape[1]}"
                    " (mask size must equal patch size)")
            from .masking import select_visible
            tokens, _ = select_visible(tokens, mask)
        if enc.use_class_token:
            cls = T.broadcast_to(bundle.param("cls_token"), (b, 1, enc.embed_dim))
            tokens = T.concat([cls, tokens], axis=1)
        for i in range(enc.depths_used()[0]):
            tokens = _block(tokens, bundle, f"enc.block{i}", enc.heads)
        return affine_ln(tokens, bundle.param("enc.norm.g"), bundle.param("enc.norm.b"))

    # hierarchical
    gh = h // enc.patch_size
    if enc.use_pos_embed:
        tokens = T.add(tokens, Tensor(sincos_pe(gh, gh, enc.embed_dim)))
    grid = tokens.reshape(b, gh, gh, enc.embed_dim)
    window = enc.window_for(h)
    depths = enc.depths_used()
    for s in range(4):
        for i in range(depths[s]):
            grid = _window_block(grid, bundle, f"enc.s{s}.block{i}",
                                 enc.stage_heads(s), window)
        if s < 3:
            grid = _patch_merge(grid, bundle, s)
    b2, g4, _, c4 = grid.shape
    tokens = grid.reshape(b2, g4 * g4, c4)
    return affine_ln(tokens, bundle.param("enc.norm.g"), bundle.param("enc.norm.b"))


def decode(bundle: ModelBundle, encoder_out: Tensor, mask: BlockMask) -> Tensor:
    """Bridge + decoder blocks + linear head; predictions gathered at the
    masked block positions only: (B, N_mask, target_dim)."""
    enc = bundle.enc
    tokens = encoder_out
    if enc.family == "isotropic" and enc.use_class_token:
        tokens = tokens[:, 1:, :]
    tokens = linear(tokens, bundle.param("bridge.weight"), bundle.param("bridge.bias"))

    masked_ids = mask.masked_ids()
    if enc.discard_masked:
        b = tokens.shape[0]
        base = T.broadcast_to(bundle.mask_token.value.reshape(1, 1, bundle.dec.width),
                              (b, mask.blocks, bundle.dec.width))
        tokens = T.scatter_along(base, mask.visible_ids(), tokens)
    elif tokens.shape[1] != mask.blocks:
        raise ModelConfigError(
            f"decoder grid {tokens.shape[1]} != mask blocks {mask.blocks}")

    heads = max(1, bundle.dec.width // 64)
    while bundle.dec.width % heads:
        heads -= 1
    for i in range(bundle.dec.blocks):
        tokens = _block(tokens, bundle, f"dec.block{i}", heads=heads)
    tokens = affine_ln(tokens, bundle.param("dec.norm.g"), bundle.param("dec.norm.b"))
    pred = linear(tokens, bundle.param("head.weight"), bundle.param("head.bias"))
    return T.take_along(pred, masked_ids)


def forward_loss(bundle: ModelBundle, masked_input: Tensor, mask: BlockMask,
                 target) -> Tensor:
    """Encode -> decode -> masked l2 against a TargetField."""
    from .objective import masked_l2_loss
    enc_out = encode(bundle, masked_input, mask=mask)
    pred = decode(bundle, enc_out, mask)
    return masked_l2_loss(pred, target)


# ---------------------------------------------------------------------------
# checkpoints: header + named records in the raw tensor dump format

def _write_str(f, text: str) -> None:
    raw = text.encode()
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_str(f) -> str:
    n, = struct.unpack("<I", f.read(4))
    return f.read(n).decode()


def save_checkpoint(path, bundle: ModelBundle, step: int = 0, digest: str = "",
                    opt_state=None) -> None:
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        _write_str(f, digest)
        f.write(struct.pack("<Q", step))
        f.write(struct.pack("<Q", len(bundle.params)))
        for name, p in bundle.params.items():
            _write_str(f, name)
            T.dump_tensor(f, p.data)
        if opt_state is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<Q", opt_state.step))
            f.write(struct.pack("<Q", len(opt_state.moments)))
            for name, (m, v) in opt_state.moments.items():
                _write_str(f, name)
                T.dump_tensor(f, m)
                T.dump_tensor(f, v)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise IOError(f"{path}: not a checkpoint file")
        version, = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise IOError(f"{path}: unsupported checkpoint version {version}")
        digest = _read_str(f)
        step, = struct.unpack("<Q", f.read(8))
        count, = struct.unpack("<Q", f.read(8))
        params = {}
        for _ in range(count):
            name = _read_str(f)
            params[name] = T.read_tensor(f)
        opt = None
        flag, = struct.unpack("<B", f.read(1))
        if flag:
            opt_step, = struct.unpack("<Q", f.read(8))
            n, = struct.unpack("<Q", f.read(8))
            moments = {}
            for _ in range(n):
                name = _read_str(f)
                moments[name] = (T.read_tensor(f), T.read_tensor(f))
            opt = {"step": opt_step, "moments": moments}
        return {"digest": digest, "step": step, "params": params, "opt": opt}


def apply_checkpoint(bundle: ModelBundle, ckpt: dict) -> None:
    for name, arr in ckpt["params"].items():
        p = bundle.params.get(name)
        if p is None:
            raise IOError(f"checkpoint parameter {name!r} missing from model")
        if p.data.shape != arr.shape:
            raise IOError(f"checkpoint parameter {name!r} shape {arr.shape} != {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    missing = set(bundle.params) - set(ckpt["params"])
    if missing:
        raise IOError(f"checkpoint is missing parameters: {sorted(missing)[:4]}...")
