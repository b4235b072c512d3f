"""Bundled presets and config-file handling.

Two presets ship with the package:

* "full": the full-scale recipe — 25-frame 64x64 generator with a
  [1,2,4,8] U-Net and attention at 16/8, a 5-frame 224x224 refiner with a
  [1,1,2,2,4,4] U-Net and no attention, 200 speech units embedded at width
  128, 500k steps at batch 28, editing windows of 24 frames with stride 12
  and 120-frame sections.  Impractical on a laptop; kept as the reference
  point.
* "desk": a scaled-down twin that trains in minutes on a CPU against the
  synthetic corpus — 8-frame 16x16 generator, 5-frame 48x48 refiner,
  8 units at width 16, identical schedule/guidance structure.

A JSON config file holds any subset of the preset fields and is merged
over the chosen preset; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Optional

from .denoiser import DenoiserConfig
from .diffusion import GuidanceConfig
from .errors import ConfigError, DataError
from .pipeline import DubSettings, RefineSettings
from .training import TrainConfig


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to train and run both stages."""

    num_units: int
    embed_dim: int
    num_train_steps: int
    num_inference_steps: int
    lsd: DenoiserConfig
    srd: DenoiserConfig
    train_lsd: TrainConfig
    train_srd: TrainConfig
    dub: DubSettings
    refine: RefineSettings
    srd_lr_range: tuple[int, int]
    srd_replace_prob: float
    exclusion_radius: int

    def __post_init__(self):
        for name in ("lsd", "srd"):
            cfg: DenoiserConfig = getattr(self, name)
            if cfg.cond_dim != 2 * self.embed_dim:
                raise ConfigError(
                    f"{name}.cond_dim {cfg.cond_dim} must equal 2*embed_dim "
                    f"= {2 * self.embed_dim}"
                )
        if self.srd.spatial_size <= self.lsd.spatial_size:
            raise ConfigError("the refiner must run at a higher resolution than the generator")
        lo, hi = self.srd_lr_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad srd_lr_range {self.srd_lr_range}")
        if not 0.0 <= self.srd_replace_prob <= 1.0:
            raise ConfigError("srd_replace_prob must lie in [0, 1]")
        if self.exclusion_radius < 1:
            raise ConfigError("exclusion_radius must be >= 1")


def full_config() -> PipelineConfig:
    return PipelineConfig(
        num_units=200,
        embed_dim=128,
        num_train_steps=1000,
        num_inference_steps=50,
        lsd=DenoiserConfig(
            input_frames=25,
            spatial_size=64,
            base_channels=64,
            channel_multipliers=(1, 2, 4, 8),
            attention_resolutions=(16, 8),
            num_heads=4,
            time_embed_dim=256,
            groupnorm_groups=32,
            cond_dim=256,
        ),
        srd=DenoiserConfig(
            input_frames=5,
            spatial_size=224,
            base_channels=64,
            channel_multipliers=(1, 1, 2, 2, 4, 4),
            attention_resolutions=(),
            num_heads=4,
            time_embed_dim=256,
            groupnorm_groups=32,
            cond_dim=256,
        ),
        train_lsd=TrainConfig(),
        train_srd=TrainConfig(),
        dub=DubSettings(
            guidance=GuidanceConfig(scale=5.0),
            window_size=24,
            window_step=12,
            section_length=120,
            section_overlap=12,
        ),
        refine=RefineSettings(window_size=5, window_step=3),
        srd_lr_range=(32, 64),
        srd_replace_prob=0.05,
        exclusion_radius=5,
    )


def desk_config() -> PipelineConfig:
    return PipelineConfig(
        num_units=8,
        embed_dim=16,
        num_train_steps=1000,
        num_inference_steps=50,
        lsd=DenoiserConfig(
            input_frames=8,
            spatial_size=16,
            base_channels=16,
            channel_multipliers=(1, 2),
            attention_resolutions=(8,),
            num_heads=2,
            time_embed_dim=64,
            groupnorm_groups=8,
            cond_dim=32,
        ),
        srd=DenoiserConfig(
            input_frames=5,
            spatial_size=48,
            base_channels=16,
            channel_multipliers=(1, 2),
            attention_resolutions=(),
            num_heads=2,
            time_embed_dim=64,
            groupnorm_groups=8,
            cond_dim=32,
        ),
        train_lsd=TrainConfig(
            peak_lr=1e-3,
            final_lr=1e-4,
            warmup_steps=200,
            total_steps=20_000,
            batch_size=8,
        ),
        train_srd=TrainConfig(
            peak_lr=1e-3,
            final_lr=1e-4,
            warmup_steps=200,
            total_steps=20_000,
            batch_size=4,
        ),
        dub=DubSettings(
            guidance=GuidanceConfig(scale=5.0),
            window_size=8,
            window_step=4,
            section_length=120,
            section_overlap=12,
        ),
        refine=RefineSettings(window_size=5, window_step=3),
        srd_lr_range=(12, 24),
        srd_replace_prob=0.05,
        exclusion_radius=2,
    )


PRESETS = {"full": full_config, "desk": desk_config}


def get_preset(name: str) -> PipelineConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


# ---------------------------------------------------------------------------
# JSON round trip


def config_to_dict(config: PipelineConfig) -> dict:
    return dataclasses.asdict(config)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def config_from_dict(data: dict) -> PipelineConfig:
    def tup(x):
        return tuple(x)

    try:
        lsd = dict(data["lsd"])
        srd = dict(data["srd"])
        for dn in (lsd, srd):
            dn["channel_multipliers"] = tup(dn["channel_multipliers"])
            dn["attention_resolutions"] = tup(dn["attention_resolutions"])
        tl = dict(data["train_lsd"])
        ts = dict(data["train_srd"])
        for tc in (tl, ts):
            tc["adam_betas"] = tup(tc["adam_betas"])
        dub = dict(data["dub"])
        dub["guidance"] = GuidanceConfig(**dub["guidance"])
        return PipelineConfig(
            num_units=int(data["num_units"]),
            embed_dim=int(data["embed_dim"]),
            num_train_steps=int(data["num_train_steps"]),
            num_inference_steps=int(data["num_inference_steps"]),
            lsd=DenoiserConfig(**lsd),
            srd=DenoiserConfig(**srd),
            train_lsd=TrainConfig(**tl),
            train_srd=TrainConfig(**ts),
            dub=DubSettings(**dub),
            refine=RefineSettings(**data["refine"]),
            srd_lr_range=tup(int(v) for v in data["srd_lr_range"]),
            srd_replace_prob=float(data["srd_replace_prob"]),
            exclusion_radius=int(data["exclusion_radius"]),
        )
    except KeyError as exc:
        raise ConfigError(f"config missing key: {exc.args[0]}")
    except TypeError as exc:
        raise ConfigError(f"bad config structure: {exc}")


def save_config(path: str, config: PipelineConfig) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(config), fh, indent=2)
        fh.write("\n")


def load_config(preset: str = "desk", config_path: Optional[str] = None) -> PipelineConfig:
    """Preset overlaid with any subset of fields from a JSON file."""
    base = config_to_dict(get_preset(preset))
    if config_path is None:
        return config_from_dict(base)
    if not os.path.isfile(config_path):
        raise DataError(f"missing config file: {config_path}")
    with open(config_path) as fh:
        try:
            override = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: not valid JSON: {exc}")
    if not isinstance(override, dict):
        raise ConfigError(f"{config_path}: top level must be a JSON object")
    return config_from_dict(_merge(base, override))
