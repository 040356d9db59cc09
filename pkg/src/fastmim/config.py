"""Run configuration: flat-section key-value files, validation, digest.

A RunConfig fully describes an experiment (data, model, mask, target,
optimizer, schedule).  Configs load from TOML, dump back to TOML
losslessly, and hash to a digest that is embedded in checkpoints and
metrics so runs are attributable.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field

import tomli

from .hog import HogConfig
from .masking import MaskConfig, MaskConfigError, masked_count
from .models import DecoderConfig, EncoderConfig, ModelConfigError

SEED_ENV = "FASTMIM_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    format: str = "synthetic"          # synthetic | ppm_dir
    root: str = ""
    seed: int = 0
    count: int = 64
    resolution: int = 224              # synthetic source resolution
    norm: str = "dataset"              # dataset | none


@dataclass
class ModelSection:
    family: str = "isotropic"
    patch_size: int = 16
    embed_dim: int = 128
    depth: int = 4
    stage_depths: list = field(default_factory=lambda: [2, 2, 6, 2])
    heads: int = 4
    window: int = 0                    # 0: auto (resolution // 32)
    truncate_to: int = 0               # 0: full depth
    discard_masked: bool = False
    use_class_token: bool = True
    use_pos_embed: bool = True
    decoder: str = "1b256d"

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            family=self.family, patch_size=self.patch_size,
            embed_dim=self.embed_dim, depth=self.depth,
            stage_depths=tuple(self.stage_depths), heads=self.heads,
            window=self.window or None, truncate_to=self.truncate_to or None,
            discard_masked=self.discard_masked,
            use_class_token=self.use_class_token,
            use_pos_embed=self.use_pos_embed)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig.from_notation(self.decoder)


@dataclass
class MaskSection:
    size: int = 16
    ratio: float = 0.75
    level: str = "image"
    learnable_token: bool = True
    pre_norm: bool = False             # mask raw pixels instead of normalized

    def mask_config(self) -> MaskConfig:
        return MaskConfig(mask_size=self.size, ratio=self.ratio, level=self.level)


@dataclass
class TargetSection:
    kind: str = "hog"                  # hog | pixel
    bins: int = 9
    cell: int = 8
    unsigned_orientation: bool = True
    norm_eps: float = 1e-6
    per_channel: bool = True

    def hog_config(self) -> HogConfig:
        return HogConfig(bins=self.bins, cell=self.cell,
                         unsigned_orientation=self.unsigned_orientation,
                         norm_eps=self.norm_eps, per_channel=self.per_channel)


@dataclass
class OptimSection:
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8


@dataclass
class ScheduleSection:
    base_lr: float = 1.5e-4
    batch_size: int = 16
    warmup_epochs: float = 0.8
    shape: str = "cosine"              # cosine | step
    stages: list = field(default_factory=lambda: [[128, 16]])

    @property
    def effective_lr(self) -> float:
        return self.base_lr * self.batch_size / 256.0

    @property
    def total_epochs(self) -> int:
        return int(sum(e for _, e in self.stages))


_SECTIONS = {
    "data": DataSection, "model": ModelSection, "mask": MaskSection,
    "target": TargetSection, "optim": OptimSection, "schedule": ScheduleSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    mask: MaskSection = field(default_factory=MaskSection)
    target: TargetSection = field(default_factory=TargetSection)
    optim: OptimSection = field(default_factory=OptimSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)

    # -- validation ---------------------------------------------------------
    def validate(self, *, for_training: bool = True) -> None:
        if self.data.format not in ("synthetic", "ppm_dir"):
            raise ConfigError(f"data.format: unknown format {self.data.format!r}")
        if self.data.norm not in ("dataset", "none"):
            raise ConfigError(f"data.norm: must be dataset|none, got {self.data.norm!r}")
        if self.data.count < 1:
            raise ConfigError("data.count: must be >= 1")
        if self.schedule.batch_size < 1:
            raise ConfigError("schedule.batch_size: must be >= 1")
        if self.data.count < self.schedule.batch_size:
            raise ConfigError(
                f"data.count {self.data.count} below batch size {self.schedule.batch_size}")
        if self.schedule.shape not in ("cosine", "step"):
            raise ConfigError(f"schedule.shape: cosine|step, got {self.schedule.shape!r}")
        if not self.schedule.stages:
            raise ConfigError("schedule.stages: at least one (resolution, epochs) stage")
        if self.schedule.warmup_epochs >= self.schedule.total_epochs:
            raise ConfigError(
                f"schedule.warmup_epochs {self.schedule.warmup_epochs} must be below "
                f"total epochs {self.schedule.total_epochs}")

        try:
            enc = self.model.encoder_config()
            enc.validate()
            dec = self.model.decoder_config()
        except ModelConfigError as e:
            raise ConfigError(f"model: {e}")
        if dec.width < 1:
            raise ConfigError("model.decoder: width must be positive")

        prev_res = 0
        for res, epochs in self.schedule.stages:
            if epochs < 1:
                raise ConfigError(f"schedule.stages: epochs must be >= 1, got {epochs}")
            if res < prev_res:
                raise ConfigError(
                    f"schedule.stages: resolutions must be non-decreasing, got {res} after {prev_res}")
            prev_res = res
            if res % self.mask.size:
                raise ConfigError(
                    f"mask.size {self.mask.size} must divide stage resolution {res}")
            try:
                enc.validate_resolution(res)
                self.mask.mask_config().validate(res)
            except (ModelConfigError, MaskConfigError) as e:
                raise ConfigError(f"stage {res}: {e}")

        if self.target.kind == "hog":
            if self.mask.size % self.target.cell:
                raise ConfigError(
                    f"target.cell {self.target.cell} must divide mask.size {self.mask.size}")
            if self.target.bins < 2:
                raise ConfigError("target.bins: must be >= 2")
        elif self.target.kind != "pixel":
            raise ConfigError(f"target.kind: hog|pixel, got {self.target.kind!r}")

        if for_training:
            # decoder tokens must map 1:1 onto mask blocks
            if self.model.family == "isotropic" and self.mask.size != self.model.patch_size:
                raise ConfigError(
                    f"mask.size {self.mask.size} must equal patch_size "
                    f"{self.model.patch_size} for isotropic training")
            if self.model.family == "hierarchical" and self.mask.size != self.model.patch_size * 8:
                raise ConfigError(
                    f"mask.size {self.mask.size} must equal the last-stage patch size "
                    f"{self.model.patch_size * 8} for hierarchical training")
            n = (self.schedule.stages[0][0] // self.mask.size) ** 2
            k = masked_count(self.mask.ratio, n)
            if k == 0 or k == n:
                raise ConfigError(f"mask.ratio {self.mask.ratio}: masks {k} of {n} blocks")

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            entries = dict(raw.get(name, {}))
            known = {f.name for f in dataclasses.fields(section_cls)}
            unknown = set(entries) - known
            if unknown:
                raise ConfigError(f"[{name}]: unknown keys {sorted(unknown)}")
            kwargs[name] = section_cls(**entries)
        unknown_sections = set(raw) - set(_SECTIONS)
        if unknown_sections:
            raise ConfigError(f"unknown config sections {sorted(unknown_sections)}")
        return cls(**kwargs)

    def to_toml(self) -> str:
        lines = []
        for name in _SECTIONS:
            lines.append(f"[{name}]")
            for key, value in dataclasses.asdict(getattr(self, name)).items():
                lines.append(f"{key} = {_toml_value(value)}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            raw = tomli.loads(text)
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"config parse error: {e}")
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r") as f:
            cfg = cls.from_toml(f.read())
        env_seed = os.environ.get(SEED_ENV)
        if env_seed is not None:
            try:
                cfg.data.seed = int(env_seed)
            except ValueError:
                raise ConfigError(f"{SEED_ENV}={env_seed!r} is not an integer")
        return cfg

    def digest(self) -> str:
        lines = []
        for name in sorted(_SECTIONS):
            for key, value in sorted(dataclasses.asdict(getattr(self, name)).items()):
                lines.append(f"{name}.{key}={value!r}")
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]

    # -- derived quantities --------------------------------------------------
    @property
    def steps_per_epoch(self) -> int:
        spe = self.data.count // self.schedule.batch_size
        if spe < 1:
            raise ConfigError("dataset smaller than one batch")
        return spe

    @property
    def total_steps(self) -> int:
        return self.schedule.total_epochs * self.steps_per_epoch

    def stage_step_spans(self) -> list:
        """[(resolution, first_step, end_step)] over the global step count."""
        spans = []
        start = 0
        for res, epochs in self.schedule.stages:
            end = start + epochs * self.steps_per_epoch
            spans.append((int(res), start, end))
            start = end
        return spans

    def resolution_at(self, step: int) -> int:
        for res, start, end in self.stage_step_spans():
            if start <= step < end:
                return res
        return int(self.schedule.stages[-1][0])


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


# ---------------------------------------------------------------------------
# presets: toy shapes mirroring the reference encoder/decoder pairings

def preset(name: str) -> RunConfig:
    cfg = RunConfig()
    if name == "isotropic-base":
        cfg.model = ModelSection(family="isotropic", patch_size=16, embed_dim=192,
                                 depth=12, heads=6, decoder="1b256d")
        cfg.mask = MaskSection(size=16, ratio=0.75)
    elif name == "isotropic-large":
        cfg.model = ModelSection(family="isotropic", patch_size=16, embed_dim=256,
                                 depth=16, heads=8, decoder="8b512d")
        cfg.mask = MaskSection(size=16, ratio=0.75)
    elif name == "hierarchical-base":
        cfg.model = ModelSection(family="hierarchical", patch_size=4, embed_dim=96,
                                 depth=12, stage_depths=[2, 2, 6, 2], heads=3,
                                 decoder="4b256d", use_class_token=False)
        cfg.mask = MaskSection(size=32, ratio=0.75)
    elif name == "hierarchical-large":
        cfg.model = ModelSection(family="hierarchical", patch_size=4, embed_dim=128,
                                 depth=16, stage_depths=[2, 2, 10, 2], heads=4,
                                 decoder="4b512d", use_class_token=False)
        cfg.mask = MaskSection(size=32, ratio=0.75)
        cfg.schedule.shape = "step"
    elif name == "paper-table8":
        # reference-scale hyperparameters; constructible, not meant to run here
        cfg.model = ModelSection(family="isotropic", patch_size=16, embed_dim=768,
                                 depth=12, heads=12, decoder="1b256d")
        cfg.mask = MaskSection(size=16, ratio=0.75)
        cfg.schedule = ScheduleSection(base_lr=1.5e-4, batch_size=2048,
                                       warmup_epochs=10, shape="cosine",
                                       stages=[[128, 800]])
        cfg.data = DataSection(format="ppm_dir", root="", seed=0,
                               count=1_281_167, resolution=256)
    else:
        raise ConfigError(f"unknown preset {name!r}")
    return cfg


PRESET_NAMES = ("isotropic-base", "isotropic-large", "hierarchical-base",
                "hierarchical-large", "paper-table8")
