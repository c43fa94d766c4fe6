"""Training configuration and its flat ``key = value`` file format.

Lines are ``key = value``; ``#`` starts a comment. Booleans accept
true/false/1/0/yes/no. Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .nets import GeneratorConfig

ABLATION_FLAGS = ("no_fm", "no_fa_loss", "no_multiscale", "single_contrast", "no_adv")


@dataclass
class TrainConfig:
    # optimisation
    epochs: int = 50
    ae_epochs: int = 40
    max_steps: int = 0  # 0 = no cap beyond epochs
    max_ae_steps: int = 0
    lr: float = 1e-3
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    batch_size: int = 16
    seed: int = 0
    # diffusion
    T: int = 4
    beta_min: float = 0.1
    beta_max: float = 20.0
    # objective
    lambda1: float = 100.0
    lambda2: float = 1.0
    r1_gamma: float = 1.0
    # model
    image_size: int = 64
    base_channels: int = 32
    num_scales: int = 3
    resnet_blocks_per_scale: int = 1
    attention_resolution: int = 16
    attention_heads: int = 4
    time_embed_dim: int = 128
    z_dim: int = 64
    fm_join: str = "concat"
    disc_sees_cond: bool = False
    z_mode: str = "fresh"
    # evaluation
    val_every: int = 1
    val_limit: int = 0  # 0 = whole val split
    val_seed: int = 1234
    # ablations
    no_fm: bool = False
    no_fa_loss: bool = False
    no_multiscale: bool = False
    single_contrast: bool = False
    no_adv: bool = False

    def __post_init__(self):
        for name in ("epochs", "ae_epochs", "batch_size", "T", "image_size", "base_channels", "num_scales"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.r1_gamma < 0:
            raise ValueError("loss weights must be >= 0")

    def generator_config(self, n_conditions: int = 2) -> GeneratorConfig:
        return GeneratorConfig(
            image_size=self.image_size,
            in_channels_target=1,
            in_channels_cond=1 if self.single_contrast else n_conditions,
            base_channels=self.base_channels,
            num_scales=self.num_scales,
            resnet_blocks_per_scale=self.resnet_blocks_per_scale,
            attention_resolution=self.attention_resolution,
            attention_heads=self.attention_heads,
            time_embed_dim=self.time_embed_dim,
            z_dim=self.z_dim,
            fm_join=self.fm_join,
            use_fm=not self.no_fm,
            multiscale=not self.no_multiscale,
            disc_sees_cond=self.disc_sees_cond,
        )

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _parse_value(raw: str, typ):
    if typ in (bool, "bool"):
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw.strip()


def parse_config_text(text: str) -> dict:
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        out[key] = _parse_value(val, types[key])
    return out


def load_config(path, **overrides) -> TrainConfig:
    d = parse_config_text(Path(path).read_text()) if path else {}
    d.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(d)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
