"""Training loops for the lip-sync generator and the super-resolution refiner.

Optimisation follows the decoupled-weight-decay adaptive-moment recipe with
a linear warmup to the peak learning rate and a half-cosine decay to the
final rate:

    lr(n) = peak * n / warmup                                   n <= warmup
    lr(n) = final + (peak - final) * (1 + cos(pi * u)) / 2      otherwise
            u = (n - warmup) / (total - warmup), clamped to 1

An exponential moving average of all parameters is maintained for
inference.  Every step derives its own RNG from (seed, step), which makes
runs bit-reproducible and lets a resumed run replay the exact trajectory of
an unbroken one.

The generator step noises clips inside the edit mask and minimises the
masked noise-prediction error; the refiner step noises whole frames and
minimises plain MSE, conditioned on a bicubically degraded copy of the
target in which individual frames are occasionally swapped for their
temporal predecessor so the refiner learns to fix small timing artefacts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .conditioning import UnitSequence, drop_condition, embed_units, null_units
from .denoiser import Denoiser, DenoiserConfig, build_denoiser
from .diffusion import DiffusionSchedule, masked_ddpm_loss, masked_forward_noise
from .errors import ArgumentError, ConfigError, DataError


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-4
    final_lr: float = 1e-5
    warmup_steps: int = 10_000
    total_steps: int = 500_000
    batch_size: int = 28
    ema_decay: float = 0.999
    weight_decay: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    flip_probability: float = 0.5
    condition_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.warmup_steps <= self.total_steps:
            raise ConfigError("need 0 < warmup_steps <= total_steps")
        if self.peak_lr < self.final_lr:
            raise ConfigError("peak_lr must be >= final_lr")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError("flip_probability must lie in [0, 1]")
        if not 0.0 <= self.condition_dropout <= 1.0:
            raise ConfigError("condition_dropout must lie in [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def lr_at(step: int, config: TrainConfig) -> float:
    """Learning rate used by optimisation step `step` (1-indexed)."""
    if step < 0:
        raise ArgumentError("step must be >= 0")
    if step <= config.warmup_steps:
        return config.peak_lr * (step / config.warmup_steps)
    span = config.total_steps - config.warmup_steps
    u = 1.0 if span == 0 else min((step - config.warmup_steps) / span, 1.0)
    return config.final_lr + 0.5 * (config.peak_lr - config.final_lr) * (1.0 + math.cos(math.pi * u))


def ema_update(
    ema: dict[str, torch.Tensor], model: nn.Module, decay: float
) -> None:
    """In-place EMA over named parameters: ema <- decay*ema + (1-decay)*p."""
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name not in ema:
                raise ArgumentError(f"EMA state missing parameter {name!r}")
            ema[name].mul_(decay).add_(param, alpha=1.0 - decay)


def init_ema(model: nn.Module) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in model.named_parameters()}


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.peak_lr,
        betas=config.adam_betas,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )


def step_generator(seed: int, step: int) -> torch.Generator:
    """A fresh torch RNG deterministically derived from (seed, step)."""
    entropy = np.random.SeedSequence(entropy=(seed, step)).generate_state(2, np.uint64)
    gen = torch.Generator()
    gen.manual_seed(int(entropy[0] ^ (entropy[1] << 1)) % (2**63))
    return gen


def np_generator(seed: int, step: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, step, salt)))


# ---------------------------------------------------------------------------
# model bundle


class DubbingModel(nn.Module):
    """Denoiser plus its learned unit-embedding table, trained jointly."""

    def __init__(self, denoiser: Denoiser, num_units: int, embed_dim: int, seed: int = 0):
        super().__init__()
        if denoiser.config.cond_dim != 2 * embed_dim:
            raise ConfigError(
                f"denoiser cond_dim {denoiser.config.cond_dim} must equal "
                f"2*embed_dim = {2 * embed_dim}"
            )
        self.denoiser = denoiser
        self.num_units = num_units
        self.embed_dim = embed_dim
        gen = torch.Generator().manual_seed(seed)
        self.embedding = nn.Parameter(
            torch.randn(num_units + 1, embed_dim, generator=gen) * 0.1
        )

    def condition(self, units: UnitSequence) -> torch.Tensor:
        """Per-frame condition rows for a 50 Hz unit sequence."""
        return embed_units(units, self.embedding)

    def forward(self, x, t, cond):
        return self.denoiser(x, t, cond)


def build_dubbing_model(
    config: DenoiserConfig, num_units: int, seed: int = 0
) -> DubbingModel:
    if config.cond_dim % 2 != 0:
        raise ConfigError("cond_dim must be even (two unit embeddings per frame)")
    denoiser = build_denoiser(config, seed=seed)
    return DubbingModel(denoiser, num_units, config.cond_dim // 2, seed=seed + 1)


# ---------------------------------------------------------------------------
# training examples


@dataclass
class LsdExample:
    """One generator training clip: geometry-aligned tensors plus units."""

    clip: torch.Tensor  # [T, H, W, 3]
    mask: torch.Tensor  # [T, H, W]
    reference: torch.Tensor  # [T, H, W, 3]
    units: UnitSequence  # length 2T


@dataclass
class SrdExample:
    """One refiner training clip.

    lr_conditioning is the target bicubically resized down to a random
    resolution and back, with some frames swapped for their temporal
    predecessor; masked_hr keeps the unedited context (edit region blanked)
    for variants that condition on it.
    """

    target: torch.Tensor  # [T, H, W, 3]
    lr_conditioning: torch.Tensor  # [T, H, W, 3]
    masked_hr: torch.Tensor  # [T, H, W, 3]
    mask: torch.Tensor  # [T, H, W]
    units: UnitSequence
    lr_size: int
    replaced: torch.Tensor  # [T] bool; frame i took conditioning frame i-1


def bicubic_resize(clip: torch.Tensor, size: int, antialias: bool = True) -> torch.Tensor:
    """Bicubic spatial resize of a [T, H, W, 3] clip to size x size."""
    x = clip.permute(0, 3, 1, 2)
    down = x.shape[-1] > size
    x = torch.nn.functional.interpolate(
        x, size=(size, size), mode="bicubic", align_corners=False,
        antialias=antialias and down,
    )
    return x.permute(0, 2, 3, 1)


def make_srd_example(
    target: torch.Tensor,
    mask: torch.Tensor,
    units: UnitSequence,
    rng: torch.Generator,
    lr_range: tuple[int, int] = (32, 64),
    replace_prob: float = 0.05,
) -> SrdExample:
    """Degrade the target into the refiner's conditioning signal.

    The low resolution is drawn uniformly from lr_range (inclusive), and the
    conditioning is the target resized down to it and back up.  Each
    conditioning frame after the first is then independently swapped, with
    probability replace_prob, for the frame before it (taken from the
    unswapped conditioning), so the refiner learns to recover from slightly
    stale low-resolution frames.
    """
    if target.dim() != 4 or target.shape[-1] != 3:
        raise ArgumentError("target must be [T, H, W, 3]")
    lo, hi = lr_range
    if not 1 <= lo <= hi:
        raise ConfigError(f"bad lr_range {lr_range}")
    if hi >= target.shape[1]:
        raise ConfigError(
            f"lr_range upper bound {hi} must stay below the target resolution "
            f"{target.shape[1]} so the conditioning always loses detail"
        )
    lr_size = int(torch.randint(lo, hi + 1, (1,), generator=rng).item())
    lr = bicubic_resize(bicubic_resize(target, lr_size), target.shape[1])
    lr = lr.clamp(-1.0, 1.0)
    num_frames = target.shape[0]
    replaced = torch.zeros(num_frames, dtype=torch.bool)
    if num_frames > 1:
        draws = torch.rand(num_frames - 1, generator=rng)
        replaced[1:] = draws < replace_prob
        lr = torch.where(replaced.view(-1, 1, 1, 1), torch.roll(lr, 1, dims=0), lr)
    masked_hr = target * (1.0 - mask.to(target.dtype)).unsqueeze(-1)
    return SrdExample(
        target=target,
        lr_conditioning=lr,
        masked_hr=masked_hr,
        mask=mask,
        units=units,
        lr_size=lr_size,
        replaced=replaced,
    )


# ---------------------------------------------------------------------------
# train steps


@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    ema: dict[str, torch.Tensor]
    step: int = 0


def init_train_state(model: nn.Module, config: TrainConfig) -> TrainState:
    return TrainState(optimizer=make_optimizer(model, config), ema=init_ema(model), step=0)


def _flip_w(t: torch.Tensor) -> torch.Tensor:
    return t.flip(2) if t.dim() == 4 else t.flip(2)


def _apply_update(model, loss, state: TrainState, config: TrainConfig) -> None:
    lr = lr_at(state.step + 1, config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    ema_update(state.ema, model, config.ema_decay)
    state.step += 1


def train_step_lsd(
    model: DubbingModel,
    batch: Sequence[LsdExample],
    state: TrainState,
    config: TrainConfig,
    schedule: DiffusionSchedule,
) -> float:
    """One masked-denoising step; returns the batch loss.

    Per item: joint horizontal flip with flip_probability, all-or-nothing
    condition dropout, a uniform timestep in [1, T], masked forward noising,
    and the masked noise-prediction loss averaged over the batch.
    """
    if not batch:
        raise ArgumentError("empty batch")
    gen = step_generator(config.seed, state.step)
    xs, ts, conds, noises, masks = [], [], [], [], []
    for i, ex in enumerate(batch):
        clip, mask, ref = ex.clip, ex.mask, ex.reference
        if mask.sum() == 0:
            raise DataError(f"batch item {i}: mask selects nothing")
        if torch.rand((), generator=gen).item() < config.flip_probability:
            clip, mask, ref = clip.flip(2), mask.flip(2), ref.flip(2)
        units = drop_condition(
            ex.units, config.condition_dropout, np_generator(config.seed, state.step, i)
        )
        t = int(torch.randint(1, schedule.num_train_steps + 1, (1,), generator=gen).item())
        noise = torch.randn(clip.shape, generator=gen)
        noisy = masked_forward_noise(clip, mask, t, noise, schedule)
        xs.append(torch.cat([noisy.x_t, ref], dim=-1))
        ts.append(t)
        conds.append(embed_units(units, model.embedding))
        noises.append(noise)
        masks.append(mask)
    eps_hat = model(torch.stack(xs), torch.tensor(ts, dtype=torch.long), torch.stack(conds))
    loss = torch.stack(
        [masked_ddpm_loss(eps_hat[i], noises[i], masks[i]) for i in range(len(batch))]
    ).mean()
    _apply_update(model, loss, state, config)
    return float(loss.item())


def train_step_srd(
    model: DubbingModel,
    batch: Sequence[SrdExample],
    state: TrainState,
    config: TrainConfig,
    schedule: DiffusionSchedule,
) -> float:
    """One refinement step: full-frame noising, plain MSE over all pixels."""
    if not batch:
        raise ArgumentError("empty batch")
    gen = step_generator(config.seed, state.step)
    xs, ts, conds, noises = [], [], [], []
    for i, ex in enumerate(batch):
        target, lr_cond = ex.target, ex.lr_conditioning
        if torch.rand((), generator=gen).item() < config.flip_probability:
            target, lr_cond = target.flip(2), lr_cond.flip(2)
        t = int(torch.randint(1, schedule.num_train_steps + 1, (1,), generator=gen).item())
        noise = torch.randn(target.shape, generator=gen)
        ab = float(schedule.alpha_bar[t])
        x_t = math.sqrt(ab) * target + math.sqrt(1.0 - ab) * noise
        xs.append(torch.cat([x_t, lr_cond], dim=-1))
        ts.append(t)
        conds.append(embed_units(ex.units, model.embedding))
        noises.append(noise)
    eps_hat = model(torch.stack(xs), torch.tensor(ts, dtype=torch.long), torch.stack(conds))
    loss = torch.nn.functional.mse_loss(eps_hat, torch.stack(noises))
    _apply_update(model, loss, state, config)
    return float(loss.item())


# ---------------------------------------------------------------------------
# dataset sampling and the outer loop


@dataclass
class ClipRecord:
    """A full training clip as loaded from disk.

    ref_indices[i] is the reference frame for frame i, precomputed from
    landmarks by conditioning.select_reference_frames.
    """

    clip: torch.Tensor  # [T, H, W, 3]
    mask: torch.Tensor  # [T, H, W]
    units: UnitSequence  # length 2T
    ref_indices: np.ndarray  # [T]


def sample_lsd_batch(
    clips: Sequence[ClipRecord],
    input_frames: int,
    batch_size: int,
    gen: torch.Generator,
) -> list[LsdExample]:
    """Draw batch_size random fixed-length windows with gathered references."""
    if not clips:
        raise DataError("empty dataset")
    out = []
    for _ in range(batch_size):
        rec = clips[int(torch.randint(len(clips), (1,), generator=gen).item())]
        total = rec.clip.shape[0]
        if total < input_frames:
            raise DataError(
                f"clip has {total} frames; training window needs {input_frames}"
            )
        start = int(torch.randint(total - input_frames + 1, (1,), generator=gen).item())
        end = start + input_frames
        ref = rec.clip[torch.from_numpy(rec.ref_indices[start:end])]
        units = UnitSequence(rec.units.units[2 * start : 2 * end], rec.units.num_units)
        out.append(
            LsdExample(
                clip=rec.clip[start:end],
                mask=rec.mask[start:end],
                reference=ref,
                units=units,
            )
        )
    return out


def run_lsd_training(
    model: DubbingModel,
    clips: Sequence[ClipRecord],
    config: TrainConfig,
    schedule: DiffusionSchedule,
    num_steps: int,
    state: Optional[TrainState] = None,
    on_step: Optional[Callable[[int, float, float], None]] = None,
) -> TrainState:
    """Run num_steps generator steps (on top of state.step if resuming)."""
    state = state or init_train_state(model, config)
    frames = model.denoiser.config.input_frames
    target = state.step + num_steps
    while state.step < target:
        gen = step_generator(config.seed, state.step)
        batch = sample_lsd_batch(clips, frames, config.batch_size, gen)
        loss = train_step_lsd(model, batch, state, config, schedule)
        if on_step is not None:
            on_step(state.step, lr_at(state.step, config), loss)
    return state


@dataclass
class SrdClipRecord:
    """A high-resolution training clip for the refiner."""

    clip: torch.Tensor  # [T, H, W, 3]
    mask: torch.Tensor  # [T, H, W]
    units: UnitSequence


def sample_srd_batch(
    clips: Sequence[SrdClipRecord],
    input_frames: int,
    batch_size: int,
    gen: torch.Generator,
    lr_range: tuple[int, int],
    replace_prob: float = 0.05,
) -> list[SrdExample]:
    if not clips:
        raise DataError("empty dataset")
    out = []
    for _ in range(batch_size):
        rec = clips[int(torch.randint(len(clips), (1,), generator=gen).item())]
        total = rec.clip.shape[0]
        if total < input_frames:
            raise DataError(
                f"clip has {total} frames; training window needs {input_frames}"
            )
        start = int(torch.randint(total - input_frames + 1, (1,), generator=gen).item())
        end = start + input_frames
        out.append(
            make_srd_example(
                rec.clip[start:end],
                rec.mask[start:end],
                UnitSequence(rec.units.units[2 * start : 2 * end], rec.units.num_units),
                gen,
                lr_range=lr_range,
                replace_prob=replace_prob,
            )
        )
    return out


def run_srd_training(
    model: DubbingModel,
    clips: Sequence[SrdClipRecord],
    config: TrainConfig,
    schedule: DiffusionSchedule,
    num_steps: int,
    lr_range: tuple[int, int],
    replace_prob: float = 0.05,
    state: Optional[TrainState] = None,
    on_step: Optional[Callable[[int, float, float], None]] = None,
) -> TrainState:
    state = state or init_train_state(model, config)
    frames = model.denoiser.config.input_frames
    target = state.step + num_steps
    while state.step < target:
        gen = step_generator(config.seed, state.step)
        batch = sample_srd_batch(
            clips, frames, config.batch_size, gen, lr_range, replace_prob
        )
        loss = train_step_srd(model, batch, state, config, schedule)
        if on_step is not None:
            on_step(state.step, lr_at(state.step, config), loss)
    return state
