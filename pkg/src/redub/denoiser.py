"""Factorised 3D U-Net noise predictor for masked video diffusion.

The network maps a noisy clip (concatenated channelwise with its reference
frames), a diffusion timestep, and a per-frame condition matrix to a noise
estimate.  Structure:

* true 3D convolutions (3x3x3) everywhere; downsampling halves only the
  spatial axes, so temporal length is preserved end to end and the model is
  fully convolutional in time
* a sinusoidal timestep embedding feeds every residual block additively
* the per-frame condition modulates every residual block through FiLM on
  instance-normalised activations (see conditioning.apply_film)
* joint spatio-temporal self-attention at configured spatial resolutions
* concatenation skip connections between mirrored encoder/decoder stages
* the final convolution is zero-initialised so the model starts as the
  zero noise predictor

Tensors cross the module boundary frame-major ([B, T, H, W, C]); the
channel-major layout is internal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn

from .conditioning import FilmGenerator, apply_film
from .errors import ArgumentError, ConfigError


@dataclass(frozen=True)
class DenoiserConfig:
    """Topology of the noise predictor.

    One class covers both the lip-sync generator (attention on, deep
    multipliers) and the super-resolution refiner (deeper, no attention);
    presets live in redub.config.
    """

    input_frames: int
    spatial_size: int
    in_channels: int = 6  # noisy RGB + reference RGB
    out_channels: int = 3
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    resblocks_per_stage: int = 1
    attention_resolutions: tuple[int, ...] = (16, 8)
    num_heads: int = 4
    time_embed_dim: int = 256
    groupnorm_groups: int = 32
    cond_dim: int = 256  # per-frame condition width (two unit embeddings)
    zero_init_output: bool = True

    def __post_init__(self):
        if self.input_frames < 1 or self.spatial_size < 1:
            raise ConfigError("input_frames and spatial_size must be positive")
        if not self.channel_multipliers:
            raise ConfigError("channel_multipliers must be non-empty")
        down = self.num_stages - 1
        if self.spatial_size % (2**down) != 0:
            raise ConfigError(
                f"spatial_size {self.spatial_size} not divisible by 2^{down}"
            )
        if self.base_channels % self.groupnorm_groups != 0:
            raise ConfigError(
                f"base_channels {self.base_channels} must be divisible by "
                f"groupnorm_groups {self.groupnorm_groups}"
            )
        reachable = {self.spatial_size // (2**i) for i in range(self.num_stages)}
        bad = set(self.attention_resolutions) - reachable
        if bad:
            raise ConfigError(
                f"attention resolutions {sorted(bad)} unreachable; stages visit {sorted(reachable)}"
            )
        if self.num_heads < 1 or self.resblocks_per_stage < 1:
            raise ConfigError("num_heads and resblocks_per_stage must be >= 1")

    @property
    def num_stages(self) -> int:
        return len(self.channel_multipliers)

    @property
    def deepest_resolution(self) -> int:
        return self.spatial_size // (2 ** (self.num_stages - 1))


@dataclass
class DenoiserInput:
    """One clip's worth of inputs to predict_noise."""

    x: torch.Tensor  # [T, H, W, in_channels]
    t: int
    condition: torch.Tensor  # [T, cond_dim]


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard log-spaced sin/cos embedding of integer timesteps."""
    if dim % 2 != 0:
        raise ConfigError("time embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock3d(nn.Module):
    """GroupNorm -> conv -> +time -> FiLM(instance-normed) -> conv, residual."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int, cond_dim: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(groups, in_ch), in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.film = FilmGenerator(cond_dim, out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, h: torch.Tensor, temb: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        r = self.conv1(torch.nn.functional.silu(self.norm(h)))
        # FiLM instance-normalises each frame plane, which would erase any
        # per-channel constant, so the time embedding joins afterwards
        r = apply_film(r, self.film(cond))
        r = r + self.time_proj(torch.nn.functional.silu(temb))[:, :, None, None, None]
        r = self.conv2(torch.nn.functional.silu(r))
        return self.skip(h) + r


class AttentionBlock(nn.Module):
    """Joint self-attention over all T*H*W positions of a feature map."""

    def __init__(self, channels: int, num_heads: int, groups: int):
        super().__init__()
        if channels % num_heads != 0:
            raise ConfigError(f"channels {channels} not divisible by heads {num_heads}")
        self.norm = nn.GroupNorm(min(groups, channels), channels)
        self.qkv = nn.Conv1d(channels, channels * 3, 1)
        self.proj = nn.Conv1d(channels, channels, 1)
        self.num_heads = num_heads
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        b, c, t, y, x = h.shape
        flat = self.norm(h).reshape(b, c, t * y * x)
        q, k, v = self.qkv(flat).reshape(b, 3, self.num_heads, c // self.num_heads, -1).unbind(1)
        att = torch.nn.functional.scaled_dot_product_attention(
            q.transpose(-1, -2), k.transpose(-1, -2), v.transpose(-1, -2)
        )
        out = self.proj(att.transpose(-1, -2).reshape(b, c, -1))
        return h + out.reshape(b, c, t, y, x)


class Downsample(nn.Module):
    """Strided conv halving H and W only; time is never downsampled."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, 3, stride=(1, 2, 2), padding=1)

    def forward(self, h):
        return self.conv(h)


class Upsample(nn.Module):
    """Nearest-neighbour spatial doubling followed by a smoothing conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, h):
        h = torch.nn.functional.interpolate(h, scale_factor=(1, 2, 2), mode="nearest")
        return self.conv(h)


class Denoiser(nn.Module):
    """The U-Net.  forward(x [B,T,H,W,Cin], t [B], cond [B,T,cond_dim])."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        cfg = config
        widths = [cfg.base_channels * m for m in cfg.channel_multipliers]
        g = cfg.groupnorm_groups

        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
        )
        self.conv_in = nn.Conv3d(cfg.in_channels, widths[0], 3, padding=1)

        def attn_at(level):
            res = cfg.spatial_size // (2**level)
            return res in cfg.attention_resolutions

        self.enc_blocks = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = widths[0]
        for level, w in enumerate(widths):
            stage = nn.ModuleList()
            for _ in range(cfg.resblocks_per_stage):
                stage.append(ResBlock3d(ch, w, cfg.time_embed_dim, cfg.cond_dim, g))
                ch = w
            self.enc_blocks.append(stage)
            self.enc_attn.append(
                AttentionBlock(w, cfg.num_heads, g) if attn_at(level) else nn.Identity()
            )
            if level < len(widths) - 1:
                self.downs.append(Downsample(w))

        deep = widths[-1]
        self.mid1 = ResBlock3d(deep, deep, cfg.time_embed_dim, cfg.cond_dim, g)
        self.mid_attn = (
            AttentionBlock(deep, cfg.num_heads, g)
            if attn_at(len(widths) - 1)
            else nn.Identity()
        )
        self.mid2 = ResBlock3d(deep, deep, cfg.time_embed_dim, cfg.cond_dim, g)

        self.dec_blocks = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        self.ups = nn.ModuleList()
        ch = deep
        for level in reversed(range(len(widths))):
            w = widths[level]
            stage = nn.ModuleList()
            for _ in range(cfg.resblocks_per_stage):
                stage.append(ResBlock3d(ch + w, w, cfg.time_embed_dim, cfg.cond_dim, g))
                ch = w
            self.dec_blocks.append(stage)
            self.dec_attn.append(
                AttentionBlock(w, cfg.num_heads, g) if attn_at(level) else nn.Identity()
            )
            if level > 0:
                self.ups.append(Upsample(w))

        self.out_norm = nn.GroupNorm(min(g, widths[0]), widths[0])
        self.out_conv = nn.Conv3d(widths[0], cfg.out_channels, 3, padding=1)
        if cfg.zero_init_output:
            nn.init.zeros_(self.out_conv.weight)
            nn.init.zeros_(self.out_conv.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.dim() != 5 or x.shape[-1] != cfg.in_channels:
            raise ArgumentError(
                f"expected [B,T,H,W,{cfg.in_channels}] input, got {tuple(x.shape)}"
            )
        if x.shape[2] != cfg.spatial_size or x.shape[3] != cfg.spatial_size:
            raise ArgumentError(
                f"model built for {cfg.spatial_size}px frames, got {x.shape[2]}x{x.shape[3]}"
            )
        if cond.shape[:2] != x.shape[:2] or cond.shape[2] != cfg.cond_dim:
            raise ArgumentError(
                f"condition must be [B,T,{cfg.cond_dim}], got {tuple(cond.shape)}"
            )
        h = x.permute(0, 4, 1, 2, 3)  # [B, C, T, H, W]
        # the sinusoidal basis is dtype-fixed; follow the input so the model
        # also runs in float64 (e.g. for finite-difference checks)
        temb = self.time_mlp(
            sinusoidal_time_embedding(t, cfg.time_embed_dim).to(x.dtype)
        )

        skips = []
        h = self.conv_in(h)
        for level, stage in enumerate(self.enc_blocks):
            for block in stage:
                h = block(h, temb, cond)
            h = self.enc_attn[level](h)
            skips.append(h)
            if level < len(self.enc_blocks) - 1:
                h = self.downs[level](h)

        h = self.mid1(h, temb, cond)
        h = self.mid_attn(h)
        h = self.mid2(h, temb, cond)

        for i, stage in enumerate(self.dec_blocks):
            h = torch.cat([h, skips[len(skips) - 1 - i]], dim=1)
            for block in stage:
                h = block(h, temb, cond)
            h = self.dec_attn[i](h)
            if i < len(self.ups):
                h = self.ups[i](h)

        h = self.out_conv(torch.nn.functional.silu(self.out_norm(h)))
        return h.permute(0, 2, 3, 4, 1)


def build_denoiser(config: DenoiserConfig, seed: int = 0) -> Denoiser:
    """Construct a denoiser with reproducible initial weights."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Denoiser(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def predict_noise(model: Denoiser, inputs: DenoiserInput) -> torch.Tensor:
    """Single-clip convenience wrapper around the batched forward pass."""
    out = model(
        inputs.x.unsqueeze(0),
        torch.tensor([inputs.t], dtype=torch.long),
        inputs.condition.unsqueeze(0),
    )[0]
    if not torch.isfinite(out).all():
        raise ArgumentError("denoiser produced non-finite values")
    return out
