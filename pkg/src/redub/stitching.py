"""Temporal stitching: overlapping-window averaging and sequential sections.

A clip longer than the denoiser's native length is covered by overlapping
windows (stride < window size).  At every diffusion step each window is
updated independently and frames covered by several windows take the
arithmetic mean of the per-window results; with deterministic updates this
keeps overlapping windows consistent without any extra machinery.

Very long clips are additionally split into sections processed one after
another.  Each section after the first starts with the last frames of the
previous section's *output*, with the edit mask zeroed on those frames.
Masked diffusion cannot touch zero-mask frames, so the overlap is carried
through bit-identical and the seam is exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .errors import ArgumentError, ConfigError


@dataclass(frozen=True)
class WindowPlan:
    """Half-open frame windows [start, end) covering 0..num_frames."""

    num_frames: int
    window_size: int
    step: int
    windows: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class SectionPlan:
    """Half-open sections with a fixed forced-overlap prefix after the first."""

    num_frames: int
    section_length: int
    overlap: int
    sections: tuple[tuple[int, int], ...]


def plan_windows(num_frames: int, window_size: int, step: int) -> WindowPlan:
    """Cover [0, num_frames) with fixed-size windows at the given stride.

    The last window is shifted left so it ends exactly at num_frames, which
    keeps every window the same length.  Clips no longer than one window get
    a single window.  Every frame is covered at least once and consecutive
    windows overlap whenever step < window_size.
    """
    if window_size < 1 or step < 1:
        raise ConfigError("window_size and step must be >= 1")
    if step > window_size:
        raise ConfigError("step must not exceed window_size (windows must tile)")
    if num_frames < 1:
        raise ArgumentError("num_frames must be >= 1")
    if num_frames <= window_size:
        return WindowPlan(num_frames, window_size, step, ((0, num_frames),))
    starts = list(range(0, num_frames - window_size + 1, step))
    if starts[-1] + window_size < num_frames:
        starts.append(num_frames - window_size)
    windows = tuple((s, s + window_size) for s in starts)
    return WindowPlan(num_frames, window_size, step, windows)


def multidiffusion_step(
    window_values: Sequence[torch.Tensor], plan: WindowPlan
) -> torch.Tensor:
    """Merge per-window tensors into one clip by per-frame arithmetic mean.

    window_values[i] holds the updated state for plan.windows[i] with the
    frame axis first.  Frames covered once pass through unchanged; frames
    covered k times receive the mean of their k window values.
    """
    if len(window_values) != len(plan.windows):
        raise ArgumentError(
            f"got {len(window_values)} window tensors for {len(plan.windows)} windows"
        )
    first = window_values[0]
    out = torch.zeros(
        (plan.num_frames,) + tuple(first.shape[1:]), dtype=first.dtype
    )
    counts = torch.zeros(plan.num_frames, dtype=first.dtype)
    for value, (start, end) in zip(window_values, plan.windows):
        if value.shape[0] != end - start:
            raise ArgumentError(
                f"window [{start},{end}) expects {end - start} frames, got {value.shape[0]}"
            )
        out[start:end] += value
        counts[start:end] += 1
    if (counts == 0).any():
        raise ArgumentError("window plan leaves frames uncovered")
    return out / counts.reshape((-1,) + (1,) * (out.dim() - 1))


def plan_sections(num_frames: int, section_length: int, overlap: int) -> SectionPlan:
    """Split [0, num_frames) into sections that advance by length - overlap."""
    if section_length < 2 or not 0 < overlap < section_length:
        raise ConfigError("need section_length >= 2 and 0 < overlap < section_length")
    if num_frames < 1:
        raise ArgumentError("num_frames must be >= 1")
    if num_frames <= section_length:
        return SectionPlan(num_frames, section_length, overlap, ((0, num_frames),))
    stride = section_length - overlap
    sections = [(0, section_length)]
    while sections[-1][1] < num_frames:
        start = sections[-1][1] - overlap
        sections.append((start, min(start + section_length, num_frames)))
    return SectionPlan(num_frames, section_length, overlap, tuple(sections))


def dub_section_sequential(
    clip: torch.Tensor,
    mask: torch.Tensor,
    plan: SectionPlan,
    dub_one_section: Callable[[torch.Tensor, torch.Tensor, int, int], torch.Tensor],
) -> torch.Tensor:
    """Process sections in order, forcing continuity through the overlap.

    dub_one_section(section_clip, section_mask, start, end) must return a
    tensor of the same shape and may not modify zero-mask frames.  For every
    section after the first, the first `overlap` input frames are replaced
    by the previous section's output and their mask rows zeroed, so those
    frames re-emerge bit-identical and the following frames are generated
    against the already-dubbed context.
    """
    if clip.shape[0] != plan.num_frames or mask.shape[0] != plan.num_frames:
        raise ArgumentError("clip/mask length does not match the section plan")
    out = clip.clone()
    for idx, (start, end) in enumerate(plan.sections):
        sec_clip = clip[start:end].clone()
        sec_mask = mask[start:end].clone()
        if idx > 0:
            sec_clip[: plan.overlap] = out[start : start + plan.overlap]
            sec_mask[: plan.overlap] = 0
        sec_out = dub_one_section(sec_clip, sec_mask, start, end)
        if sec_out.shape != sec_clip.shape:
            raise ArgumentError("section output shape mismatch")
        out[start:end] = sec_out
    return out
