"""Benchmark curation: pose screening, occlusion screening, corruption.

Front-facing selection scans every k-th pose frame of a video and tracks
the running maximum absolute head angle

    m_v = max_f max(|yaw_f|, |pitch_f|, |roll_f|)

breaking out early once m_v exceeds the threshold; videos shorter than the
minimum duration are skipped and survivors are returned sorted by m_v
ascending (most frontal first).

Occlusion selection counts, over every k-th frame, how many face landmarks
fall inside the convex hull of any detected hand, accumulating a per-video
total that stops early once it clears the early-stop bound; videos with
total strictly greater than the acceptance threshold are kept.

Corruption fabricates obviously broken clips for rater-screening: from
frame 15 onward (stopping 5 frames before the end) the mouth box is
replaced by a 180-degree-rotated crop taken from 25 frames earlier, held
for 25-frame spans, plus per-frame Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .errors import ArgumentError, ConfigError, DataError

NOISE_STD = 20.0 / 127.5  # pixel-value noise expressed in [-1, 1] units
CORRUPTION_START = 15
CORRUPTION_TAIL = 5
CORRUPTION_SPAN = 25


@dataclass(frozen=True)
class PoseFrame:
    """Head pose angles in degrees."""

    yaw: float
    pitch: float
    roll: float


@dataclass(frozen=True)
class VideoPoseStream:
    """A video's duration and per-frame poses (None = face not detected)."""

    video_id: str
    duration: float  # seconds
    poses: tuple[Optional[PoseFrame], ...]


@dataclass(frozen=True)
class OcclusionFrame:
    """Landmarks for one frame: face points and zero or more hands."""

    face: Optional[np.ndarray]  # [L, 2] or None
    hands: tuple[np.ndarray, ...]  # each [M, 2]


@dataclass(frozen=True)
class VideoOcclusionStream:
    video_id: str
    frames: tuple[OcclusionFrame, ...]


def pose_score(
    poses: Sequence[Optional[PoseFrame]],
    frame_step: int = 5,
    theta_max: Optional[float] = None,
) -> float:
    """Running max absolute angle over every frame_step-th pose.

    Frames without a detected face contribute nothing to the score (whether
    they invalidate the whole video is the selector's concern, not the
    score's).  If theta_max is given, scanning stops as soon as the score
    exceeds it (the early break); the returned score is then only a witness
    that the video fails.
    """
    if frame_step < 1:
        raise ConfigError("frame_step must be >= 1")
    if len(poses) == 0:
        raise ArgumentError("cannot score an empty pose sequence")
    score = 0.0
    for pose in poses[::frame_step]:
        if pose is None:
            continue
        score = max(score, abs(pose.yaw), abs(pose.pitch), abs(pose.roll))
        if theta_max is not None and score > theta_max:
            break
    return score


def select_low_angle(
    videos: Iterable[VideoPoseStream],
    theta_max: float = 20.0,
    min_duration: float = 6.0,
    frame_step: int = 5,
) -> list[tuple[str, float]]:
    """(video_id, score) for near-frontal videos, sorted by score ascending.

    A video is rejected when it is shorter than min_duration, when any
    sampled frame has no detected face, or when the running maximum angle
    exceeds theta_max (scanning stops at the first offending frame either
    way); it is accepted otherwise, boundary inclusive (score == theta_max
    passes).
    """
    if frame_step < 1:
        raise ConfigError("frame_step must be >= 1")
    accepted = []
    for video in videos:
        if video.duration < min_duration:
            continue
        sampled = video.poses[::frame_step]
        score, face_found = 0.0, bool(sampled)
        for pose in sampled:
            if pose is None:
                face_found = False
                break
            score = max(score, abs(pose.yaw), abs(pose.pitch), abs(pose.roll))
            if score > theta_max:
                break
        if face_found and score <= theta_max:
            accepted.append((video.video_id, score))
    accepted.sort(key=lambda pair: pair[1])
    return accepted


# ---------------------------------------------------------------------------
# convex hulls and occlusion


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counter-clockwise, no repeated endpoint."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ArgumentError("points must be [N, 2]")
    uniq = sorted(set(map(tuple, pts.tolist())))
    if len(uniq) <= 2:
        return np.asarray(uniq, dtype=np.float64)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in uniq:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(uniq):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1], dtype=np.float64)


def point_in_hull(point, hull: np.ndarray) -> bool:
    """Boundary-inclusive point-in-convex-polygon test.

    The hull must be convex with consistently ordered vertices (as produced
    by convex_hull).  Degenerate hulls (fewer than 3 non-collinear vertices)
    contain nothing.
    """
    hull = np.asarray(hull, dtype=np.float64)
    if hull.ndim != 2 or hull.shape[0] < 3:
        return False
    x, y = float(point[0]), float(point[1])
    area2 = 0.0
    for i in range(len(hull)):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % len(hull)]
        area2 += ax * by - bx * ay
    if area2 == 0.0:
        return False
    sign = 1.0 if area2 > 0 else -1.0
    for i in range(len(hull)):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % len(hull)]
        cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
        if sign * cross < 0:
            return False
    return True


def count_occluded_landmarks(
    face: np.ndarray, hand_hulls: Sequence[np.ndarray]
) -> int:
    """Number of face landmarks inside at least one hand hull."""
    face = np.asarray(face, dtype=np.float64)
    if face.ndim != 2 or face.shape[1] != 2:
        raise ArgumentError("face landmarks must be [L, 2]")
    count = 0
    for point in face:
        if any(point_in_hull(point, hull) for hull in hand_hulls):
            count += 1
    return count


@dataclass(frozen=True)
class OcclusionRecord:
    """Occlusion evidence accumulated while scanning one video."""

    video_id: str
    total_occlusion: int
    max_occlusion: int  # largest single-frame count; never exceeds the total
    processed_frames: int  # sampled frames examined before any early stop


def occlusion_scan(
    frames: Sequence[OcclusionFrame],
    frame_step: int = 10,
    early_stop_total: int = 100,
) -> tuple[int, int, int]:
    """(total, per-frame max, frames scanned) over every frame_step-th frame.

    Frames missing the face or hands contribute nothing.  Scanning stops as
    soon as the total reaches early_stop_total; the video is clearly
    occluded and further work is wasted.
    """
    if frame_step < 1:
        raise ConfigError("frame_step must be >= 1")
    total = max_occ = processed = 0
    for frame in frames[::frame_step]:
        processed += 1
        if frame.face is not None and frame.hands:
            hulls = [convex_hull(h) for h in frame.hands]
            count = count_occluded_landmarks(frame.face, hulls)
            total += count
            max_occ = max(max_occ, count)
            if total >= early_stop_total:
                break
    return total, max_occ, processed


def occlusion_total(
    frames: Sequence[OcclusionFrame],
    frame_step: int = 10,
    early_stop_total: int = 100,
) -> int:
    """Accumulated occluded-landmark count over every frame_step-th frame."""
    return occlusion_scan(frames, frame_step, early_stop_total)[0]


def select_occluded(
    videos: Iterable[VideoOcclusionStream],
    threshold: int = 30,
    frame_step: int = 10,
    early_stop_total: int = 100,
) -> list[OcclusionRecord]:
    """Records for videos whose occluded-landmark total strictly exceeds threshold."""
    accepted = []
    for video in videos:
        total, max_occ, processed = occlusion_scan(
            video.frames, frame_step, early_stop_total
        )
        if total > threshold:
            accepted.append(OcclusionRecord(video.video_id, total, max_occ, processed))
    return accepted


# ---------------------------------------------------------------------------
# corruption


@dataclass(frozen=True)
class MouthBox:
    """Half-open pixel rectangle [top, bottom) x [left, right)."""

    top: int
    bottom: int
    left: int
    right: int

    def __post_init__(self):
        if not (self.top < self.bottom and self.left < self.right):
            raise ArgumentError("mouth box must have positive area")


def corrupt_clip(clip: torch.Tensor, box: MouthBox, seed: int = 0) -> torch.Tensor:
    """Deliberately break lip sync for rater screening.

    From frame CORRUPTION_START until CORRUPTION_TAIL frames before the end,
    the mouth box shows a 180-degree-rotated crop sourced 25 frames earlier
    (wrapping), refreshed every CORRUPTION_SPAN frames and perturbed with
    per-frame Gaussian noise of sigma NOISE_STD.  Output stays in [-1, 1].
    """
    if clip.dim() != 4:
        raise ArgumentError("clip must be [T, H, W, C]")
    num_frames = clip.shape[0]
    if num_frames <= CORRUPTION_START + CORRUPTION_TAIL:
        raise ArgumentError(
            f"clip must have more than {CORRUPTION_START + CORRUPTION_TAIL} frames"
        )
    if box.bottom > clip.shape[1] or box.right > clip.shape[2]:
        raise ArgumentError("mouth box exceeds the frame")
    gen = torch.Generator().manual_seed(seed)
    out = clip.clone()
    for f in range(CORRUPTION_START, num_frames - CORRUPTION_TAIL):
        span_start = CORRUPTION_START + ((f - CORRUPTION_START) // CORRUPTION_SPAN) * CORRUPTION_SPAN
        source = (span_start - CORRUPTION_SPAN) % num_frames
        crop = clip[source, box.top : box.bottom, box.left : box.right]
        rotated = crop.flip(0).flip(1)
        noise = torch.randn(rotated.shape, generator=gen) * NOISE_STD
        out[f, box.top : box.bottom, box.left : box.right] = (rotated + noise).clamp(-1.0, 1.0)
    return out
