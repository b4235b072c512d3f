"""Masked video diffusion: schedule, noising, loss, DDIM sampling and inversion.

The model only ever generates pixels inside an edit mask m.  The forward
process noises masked pixels and leaves the rest of the frame untouched:

    x_t = m * (sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps) + (1 - m) * x_0

so at every timestep the network sees clean context outside the mask.  The
same pinning is applied after every reverse (and inversion) update, which
makes the background bit-identical to the input end to end.

Timesteps follow the squared-cosine schedule

    abar_t = f(t) / f(0),   f(t) = cos((t/T + s) / (1 + s) * pi/2)^2

with offset s = 0.008, tabulated for t = 0..T with abar_0 = 1 exactly.

Deterministic DDIM (eta = 0) steps between adjacent entries of a uniform
inference-step grid.  With the predicted noise eps the update from t to t'
is

    x0_hat = (x_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)        (clipped)
    x_t'   = sqrt(abar_t') * x0_hat + sqrt(1 - abar_t') * eps

Because the map is algebraically invertible in x for a fixed eps, running
the grid upward with the conditional prediction yields the DDIM inversion
used for editing: invert under the original conditioning, then sample back
down under new conditioning with classifier-free guidance

    eps_guided = (1 + s) * eps_cond - s * eps_uncond.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import ArgumentError, ConfigError, DegenerateMaskError

COSINE_OFFSET = 0.008

# A denoiser maps (x_t [T,H,W,3], t, condition-or-None) to predicted noise
# [T,H,W,3].  condition=None requests the unconditional branch.
DenoiserFn = Callable[[torch.Tensor, int, Optional[object]], torch.Tensor]


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class DiffusionSchedule:
    """Tabulated noise schedule plus the inference-step grid.

    alpha_bar has length num_train_steps + 1 with alpha_bar[0] == 1.0 so
    that t = 0 is exactly the data distribution.  inference_steps is a
    strictly increasing uniform grid of train-step indices; sampling walks
    it downward, inversion upward.
    """

    num_train_steps: int
    offset: float
    alpha_bar: np.ndarray = field(repr=False)
    inference_steps: tuple[int, ...]

    def __post_init__(self):
        ab = self.alpha_bar
        if len(ab) != self.num_train_steps + 1:
            raise ConfigError(
                f"alpha_bar must have length T+1={self.num_train_steps + 1}, got {len(ab)}"
            )
        if ab[0] != 1.0:
            raise ConfigError("alpha_bar[0] must equal 1.0 exactly")
        if np.any(np.diff(ab) >= 0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        steps = self.inference_steps
        if not steps or list(steps) != sorted(set(steps)):
            raise ConfigError("inference_steps must be strictly increasing and non-empty")
        if steps[0] != 0 or steps[-1] > self.num_train_steps:
            raise ConfigError("inference_steps must start at 0 and stay within [0, T]")


def build_cosine_schedule(
    num_train_steps: int,
    num_inference_steps: int,
    offset: float = COSINE_OFFSET,
) -> DiffusionSchedule:
    """Tabulate the squared-cosine schedule and a uniform inference grid.

    The grid is range(0, T, T // n): n entries with stride T // n, starting
    at the clean endpoint.  For the reference setting (T=1000, n=50) this is
    0, 20, ..., 980.
    """
    if num_train_steps < 1:
        raise ConfigError("num_train_steps must be >= 1")
    if not 1 <= num_inference_steps <= num_train_steps:
        raise ConfigError("need 1 <= num_inference_steps <= num_train_steps")
    t = np.arange(num_train_steps + 1, dtype=np.float64)
    f = np.cos((t / num_train_steps + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
    alpha_bar = f / f[0]
    stride = num_train_steps // num_inference_steps
    steps = tuple(range(0, stride * num_inference_steps, stride))
    return DiffusionSchedule(num_train_steps, offset, alpha_bar, steps)


def save_schedule(schedule: DiffusionSchedule, path) -> None:
    """Write the schedule as a plain-text key/value file."""
    lines = [
        f"num_train_steps={schedule.num_train_steps}",
        f"offset={schedule.offset!r}",
        "inference_steps=" + ",".join(str(s) for s in schedule.inference_steps),
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_schedule(path) -> DiffusionSchedule:
    """Rebuild a schedule saved by save_schedule (alpha_bar is recomputed)."""
    kv = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ArgumentError(f"malformed schedule line: {line!r}")
            key, val = line.split("=", 1)
            kv[key.strip()] = val.strip()
    try:
        num_train = int(kv["num_train_steps"])
        offset = float(kv["offset"])
        steps = tuple(int(s) for s in kv["inference_steps"].split(",") if s)
    except (KeyError, ValueError) as exc:
        raise ArgumentError(f"invalid schedule file {path}: {exc}") from exc
    t = np.arange(num_train + 1, dtype=np.float64)
    f = np.cos((t / num_train + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
    return DiffusionSchedule(num_train, offset, f / f[0], steps)


# ---------------------------------------------------------------------------
# masked forward process


@dataclass
class NoisyState:
    """A partially generated clip: noised inside the mask, clean outside."""

    x_t: torch.Tensor  # [T, H, W, C]
    t: int
    mask: torch.Tensor  # [T, H, W], 1 = editable
    clean: torch.Tensor  # [T, H, W, C], the pinned background source


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance strength; scale 0 disables the second branch."""

    scale: float = 5.0

    def __post_init__(self):
        if self.scale < 0:
            raise ConfigError("guidance scale must be >= 0")


def _check_mask(clip: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if clip.dim() != 4:
        raise ArgumentError(f"clip must be [T,H,W,C], got shape {tuple(clip.shape)}")
    if mask.shape != clip.shape[:3]:
        raise ArgumentError(
            f"mask shape {tuple(mask.shape)} does not match clip {tuple(clip.shape[:3])}"
        )
    return mask.to(clip.dtype).unsqueeze(-1)


def composite(x: torch.Tensor, clean: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Pin every pixel outside the mask back to its clean value."""
    m = _check_mask(x, mask)
    return torch.where(m > 0, x, clean)


def masked_forward_noise(
    clean: torch.Tensor,
    mask: torch.Tensor,
    t: int,
    noise: torch.Tensor,
    schedule: DiffusionSchedule,
) -> NoisyState:
    """Apply the forward process at step t inside the mask only."""
    if not 0 <= t <= schedule.num_train_steps:
        raise ArgumentError(f"t={t} outside [0, {schedule.num_train_steps}]")
    if noise.shape != clean.shape:
        raise ArgumentError("noise must match clip shape")
    m = _check_mask(clean, mask)
    ab = float(schedule.alpha_bar[t])
    noised = math.sqrt(ab) * clean + math.sqrt(1.0 - ab) * noise
    x_t = torch.where(m > 0, noised, clean)
    return NoisyState(x_t=x_t, t=t, mask=mask, clean=clean)


def masked_ddpm_loss(
    predicted: torch.Tensor, target: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean squared residual over masked elements only.

        L = || (predicted - target) * m ||^2 / sum_i m_i

    The mask broadcasts over channels and the denominator counts masked
    elements after that broadcast, so the loss is an honest per-element
    mean and comparable across mask sizes.
    """
    if predicted.shape != target.shape:
        raise ArgumentError("predicted and target shapes differ")
    m = _check_mask(predicted, mask)
    denom = m.sum() * predicted.shape[-1]
    if denom.item() == 0:
        raise DegenerateMaskError("mask selects no pixels; masked loss undefined")
    resid = (predicted - target) * m
    return resid.pow(2).sum() / denom


# ---------------------------------------------------------------------------
# DDIM


def cfg_combine(
    eps_cond: torch.Tensor, eps_uncond: torch.Tensor, guidance: GuidanceConfig
) -> torch.Tensor:
    """Classifier-free guidance: (1 + s) * eps_cond - s * eps_uncond."""
    s = guidance.scale
    return (1.0 + s) * eps_cond - s * eps_uncond


def ddim_update(
    x: torch.Tensor, eps: torch.Tensor, ab_cur: float, ab_next: float
) -> torch.Tensor:
    """One deterministic DDIM transition between tabulated abar values.

    The x0 estimate is clipped to [-1, 1] before re-projection ("clip
    denoised").  Used for both directions: sampling passes ab_next < ab_cur,
    inversion the reverse.
    """
    x0 = (x - math.sqrt(1.0 - ab_cur) * eps) / math.sqrt(ab_cur)
    x0 = x0.clamp(-1.0, 1.0)
    return math.sqrt(ab_next) * x0 + math.sqrt(1.0 - ab_next) * eps


def _predict_guided(
    denoiser: DenoiserFn,
    x: torch.Tensor,
    t: int,
    conditioning,
    guidance: GuidanceConfig,
) -> torch.Tensor:
    eps = denoiser(x, t, conditioning)
    if eps.shape != x.shape:
        raise ArgumentError(
            f"denoiser returned shape {tuple(eps.shape)} for input {tuple(x.shape)}"
        )
    if guidance.scale == 0.0:
        return eps
    eps_uncond = denoiser(x, t, None)
    return cfg_combine(eps, eps_uncond, guidance)


def ddim_sample(
    denoiser: DenoiserFn,
    init: NoisyState,
    conditioning,
    schedule: DiffusionSchedule,
    guidance: GuidanceConfig = GuidanceConfig(),
) -> torch.Tensor:
    """Deterministic masked DDIM sampling from init down to t = 0.

    init.t must equal the top of the inference grid.  After every update the
    background is pinned from init.clean, so pixels outside the mask pass
    through bit-identical.  The result is clipped to [-1, 1].
    """
    steps = schedule.inference_steps
    if init.t != steps[-1]:
        raise ArgumentError(
            f"init.t={init.t} must equal the largest inference step {steps[-1]}"
        )
    x = composite(init.x_t, init.clean, init.mask)
    ab = schedule.alpha_bar
    for i in range(len(steps) - 1, 0, -1):
        t_cur, t_next = steps[i], steps[i - 1]
        eps = _predict_guided(denoiser, x, t_cur, conditioning, guidance)
        x = ddim_update(x, eps, float(ab[t_cur]), float(ab[t_next]))
        x = composite(x, init.clean, init.mask)
    return composite(x.clamp(-1.0, 1.0), init.clean, init.mask)


def ddim_invert(
    denoiser: DenoiserFn,
    clean: torch.Tensor,
    mask: torch.Tensor,
    conditioning,
    schedule: DiffusionSchedule,
) -> NoisyState:
    """Run the inference grid upward to recover the latent that samples back.

    Uses the pure conditional prediction (guidance scale 0); guidance is an
    asymmetry that would break the algebraic inverse.  Outside the mask the
    latent stays equal to clean at every step.
    """
    steps = schedule.inference_steps
    x = composite(clean, clean, mask)
    ab = schedule.alpha_bar
    off = GuidanceConfig(scale=0.0)
    for i in range(len(steps) - 1):
        t_cur, t_next = steps[i], steps[i + 1]
        eps = _predict_guided(denoiser, x, t_cur, conditioning, off)
        x = ddim_update(x, eps, float(ab[t_cur]), float(ab[t_next]))
        x = composite(x, clean, mask)
    return NoisyState(x_t=x, t=steps[-1], mask=mask, clean=clean)
