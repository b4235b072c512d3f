"""Procedural talking-blob corpus: verifiable stand-ins for real faces.

A blob clip is a flat-coloured disk "face" with an elliptical "mouth" whose
opening is fully determined by the speech units: frame i owns units
u_{2i}, u_{2i+1} and its aperture is the mean of their aperture_map values.
Because the generative process is known, everything the pipeline does to a
clip can be checked by measurement:

* measure_aperture reads the mouth opening back off the pixels (soft count
  of dark rows along the mouth's vertical axis, so it resolves sub-pixel
  openings) and must agree with commanded_aperture to within a pixel row
* identities are hue rotations with zero-sum chroma, so the channel mean
  (luma) is identity-invariant while embeddings can still separate speakers
* landmarks expose the face outline (static pose) plus four lip points that
  move with the aperture, exercising reference-frame selection
* hidden per-unit centroids generate speech features whose k-means
  recovery is exact up to permutation at low noise

Geometry is stored in normalised [0, 1] coordinates so the same spec
renders consistently at any resolution (16 px desk clips, 48 px HR clips).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from .conditioning import UnitSequence
from .errors import ArgumentError, ConfigError, DataError

LIP_LANDMARKS = (12, 13, 14, 15)  # indices of the four moving lip points
FACE_GRAY = 0.25
MOUTH_GRAY = -0.9
BACKGROUND_GRAY = -0.85
CHROMA = 0.35


def default_aperture_map(num_units: int) -> tuple[float, ...]:
    """Evenly spaced, injective unit-to-aperture assignment."""
    if num_units == 1:
        return (1.0,)
    return tuple(u / (num_units - 1) for u in range(num_units))


@dataclass(frozen=True)
class BlobSpec:
    """Normalised geometry and appearance of one synthetic speaker."""

    image_size: int
    frames: int
    face_center: tuple[float, float] = (0.5, 0.5)
    face_radius: float = 0.44
    eye_level: float = 0.45  # mask covers rows below this
    mouth_center: tuple[float, float] = (0.5, 0.68)
    mouth_width: float = 0.40
    mouth_max_height: float = 0.30
    aperture_map: tuple[float, ...] = (0.0, 1.0)
    identity_hue: float = 0.0

    def __post_init__(self):
        if self.image_size < 8 or self.frames < 1:
            raise ConfigError("image_size must be >= 8 and frames >= 1")
        if not all(0.0 <= a <= 1.0 for a in self.aperture_map):
            raise ConfigError("aperture_map values must lie in [0, 1]")
        if len(set(self.aperture_map)) != len(self.aperture_map):
            raise ConfigError("aperture_map must be injective over the unit alphabet")
        cx, cy = self.mouth_center
        top = cy - self.mouth_max_height / 2
        bottom = cy + self.mouth_max_height / 2
        fy = self.face_center[1]
        if top < self.eye_level:
            raise ConfigError("mouth at full aperture reaches above the eye level mask")
        if bottom > fy + self.face_radius:
            raise ConfigError("mouth at full aperture leaves the face")
        half_w = self.mouth_width / 2
        if cx - half_w < self.face_center[0] - self.face_radius or cx + half_w > self.face_center[0] + self.face_radius:
            raise ConfigError("mouth wider than the face")


def identity_color(hue: float) -> np.ndarray:
    """Face RGB for a hue in [0, 1): constant luma, zero-sum chroma."""
    phases = 2 * math.pi * hue + np.array([0.0, -2 * math.pi / 3, 2 * math.pi / 3])
    return FACE_GRAY + CHROMA * np.cos(phases)


def commanded_aperture(units: UnitSequence, spec: BlobSpec) -> np.ndarray:
    """Per-frame aperture implied by a 50 Hz unit sequence."""
    if len(units) % 2 != 0:
        raise ArgumentError("unit sequence length must be even")
    ids = units.units
    if ids.max(initial=0) >= len(spec.aperture_map):
        raise DataError(
            "unit sequence contains ids outside the spec's aperture_map "
            "(NULL cannot be rendered)"
        )
    amap = np.asarray(spec.aperture_map)
    return amap[ids].reshape(-1, 2).mean(axis=1)


def render_blob_clip(
    spec: BlobSpec, units: UnitSequence
) -> tuple[torch.Tensor, torch.Tensor, np.ndarray]:
    """Render (clip [T,H,W,3], mask [T,H,W], landmarks [T,16,2]).

    The mask is the rectangle of face columns below the eye level, constant
    across frames; landmarks are normalised coordinates with the face
    outline at indices 0..11 and lips at LIP_LANDMARKS.
    """
    if len(units) != 2 * spec.frames:
        raise ArgumentError(
            f"need {2 * spec.frames} units for {spec.frames} frames, got {len(units)}"
        )
    size = spec.image_size
    apertures = commanded_aperture(units, spec)
    ys, xs = np.meshgrid(
        (np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size, indexing="ij"
    )
    cx, cy = spec.face_center
    face_dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    # ~1px anti-aliased edge in normalised units
    px = 1.0 / size
    face_alpha = np.clip((spec.face_radius - face_dist) / px + 0.5, 0.0, 1.0)
    face_rgb = identity_color(spec.identity_hue)

    mx, my = spec.mouth_center
    half_w = spec.mouth_width / 2

    frames = []
    for a in apertures:
        frame = np.full((size, size, 3), BACKGROUND_GRAY, dtype=np.float64)
        frame += face_alpha[..., None] * (face_rgb - frame)
        half_h = a * spec.mouth_max_height / 2
        if half_h > 0:
            q = np.sqrt(((xs - mx) / half_w) ** 2 + ((ys - my) / half_h) ** 2)
            mouth_alpha = np.clip((1.0 - q) * min(half_w, half_h) / px + 0.5, 0.0, 1.0)
            frame += (mouth_alpha * face_alpha)[..., None] * (MOUTH_GRAY - frame)
        frames.append(frame)
    clip = torch.from_numpy(np.stack(frames).astype(np.float32)).clamp(-1.0, 1.0)

    row0 = int(math.ceil(spec.eye_level * size))
    row1 = min(size, int(math.floor((cy + spec.face_radius) * size)) + 1)
    col0 = max(0, int(math.floor((cx - spec.face_radius) * size)))
    col1 = min(size, int(math.ceil((cx + spec.face_radius) * size)))
    mask = torch.zeros(spec.frames, size, size, dtype=torch.float32)
    mask[:, row0:row1, col0:col1] = 1.0

    boundary = np.stack(
        [
            np.array(
                [
                    cx + spec.face_radius * math.cos(2 * math.pi * k / 12),
                    cy + spec.face_radius * math.sin(2 * math.pi * k / 12),
                ]
            )
            for k in range(12)
        ]
    )
    landmarks = np.empty((spec.frames, 16, 2), dtype=np.float64)
    for i, a in enumerate(apertures):
        half_h = a * spec.mouth_max_height / 2
        lips = np.array(
            [
                [mx - half_w, my],
                [mx + half_w, my],
                [mx, my - half_h],
                [mx, my + half_h],
            ]
        )
        landmarks[i, :12] = boundary
        landmarks[i, 12:] = lips
    return clip, mask, landmarks


def measure_aperture(clip: torch.Tensor, spec: BlobSpec) -> np.ndarray:
    """Read the per-frame mouth opening back off the pixels.

    Counts dark rows (with fractional boundary rows) along the mouth's
    vertical axis inside the mouth bounding box, averaged over the central
    half of the mouth's width, normalised by the full-aperture height.
    """
    if clip.dim() != 4:
        raise ArgumentError("clip must be [T, H, W, C]")
    size = spec.image_size
    if clip.shape[1] != size or clip.shape[2] != size:
        raise ArgumentError(
            f"clip is {clip.shape[1]}x{clip.shape[2]} but spec renders {size}x{size}"
        )
    arr = np.asarray(clip.detach().cpu(), dtype=np.float64)
    gray = arr.mean(axis=-1)
    mx, my = spec.mouth_center
    max_h_px = spec.mouth_max_height * size
    y0 = max(0, int(math.floor((my - spec.mouth_max_height / 2) * size)) - 1)
    y1 = min(size, int(math.ceil((my + spec.mouth_max_height / 2) * size)) + 1)
    quarter_w = spec.mouth_width / 4
    x0 = int(round((mx - quarter_w) * size))
    x1 = max(x0 + 1, int(round((mx + quarter_w) * size)))
    rows = gray[:, y0:y1, x0:x1].mean(axis=2)
    darkness = np.clip((FACE_GRAY - rows) / (FACE_GRAY - MOUTH_GRAY), 0.0, 1.0)
    return np.clip(darkness.sum(axis=1) / max_h_px, 0.0, 1.0)


# ---------------------------------------------------------------------------
# speech features with known structure


def make_hidden_centroids(num_units: int, feature_dim: int, seed: int = 0) -> np.ndarray:
    """Well-separated per-unit feature centroids (the 'true' codebook)."""
    rng = np.random.default_rng(seed)
    centroids = rng.standard_normal((num_units, feature_dim)) * 10.0
    return centroids


def synth_speech_features(
    units: UnitSequence,
    centroids: np.ndarray,
    noise_std: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Features around each unit's hidden centroid: centroid + N(0, std^2)."""
    centroids = np.asarray(centroids, dtype=np.float64)
    ids = units.units
    if ids.max(initial=0) >= centroids.shape[0]:
        raise DataError("unit sequence contains ids without a hidden centroid")
    return centroids[ids] + rng.standard_normal((len(ids), centroids.shape[1])) * noise_std


# ---------------------------------------------------------------------------
# identity embedding


def synth_identity_embedder(clip) -> np.ndarray:
    """Per-frame identity embedding: 4x4 grid colour means + 8x8 gray thumb.

    Deterministic, unit-normalised rows.  Colour cells carry the identity
    hue; the thumbnail carries coarse geometry.  Works for any clip size.
    """
    x = torch.as_tensor(np.asarray(clip), dtype=torch.float32)
    if x.dim() != 4:
        raise ArgumentError("clip must be [T, H, W, C]")
    chw = x.permute(0, 3, 1, 2)
    cells = torch.nn.functional.adaptive_avg_pool2d(chw, (4, 4))  # [T,3,4,4]
    gray = chw.mean(dim=1, keepdim=True)
    thumb = torch.nn.functional.adaptive_avg_pool2d(gray, (8, 8))  # [T,1,8,8]
    emb = torch.cat([cells.flatten(1), thumb.flatten(1)], dim=1).double().numpy()
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    return emb / np.maximum(norms, 1e-12)


# ---------------------------------------------------------------------------
# corpus generation


def random_units(
    rng: np.random.Generator, num_units: int, length: int, change_prob: float = 0.5
) -> UnitSequence:
    """A unit sequence with geometric run lengths (speech-like repeats)."""
    ids = np.empty(length, dtype=np.int64)
    cur = int(rng.integers(num_units))
    for i in range(length):
        if i > 0 and rng.random() < change_prob:
            cur = int(rng.integers(num_units))
        ids[i] = cur
    return UnitSequence(ids, num_units)


def random_blob_spec(
    rng: np.random.Generator,
    image_size: int,
    frames: int,
    num_units: int,
) -> BlobSpec:
    """A randomly perturbed speaker: new hue, slightly moved geometry."""
    return BlobSpec(
        image_size=image_size,
        frames=frames,
        face_center=(0.5 + rng.uniform(-0.02, 0.02), 0.5 + rng.uniform(-0.02, 0.02)),
        face_radius=0.44 + rng.uniform(-0.015, 0.015),
        aperture_map=default_aperture_map(num_units),
        identity_hue=float(rng.random()),
    )


@dataclass
class BlobClip:
    """One generated corpus entry."""

    spec: BlobSpec
    units: UnitSequence
    clip: torch.Tensor
    mask: torch.Tensor
    landmarks: np.ndarray


def make_blob_corpus(
    num_clips: int,
    image_size: int,
    frames: int,
    num_units: int,
    seed: int = 0,
) -> list[BlobClip]:
    """Generate a reproducible corpus of talking blobs."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(num_clips):
        spec = random_blob_spec(rng, image_size, frames, num_units)
        units = random_units(rng, num_units, 2 * frames)
        clip, mask, landmarks = render_blob_clip(spec, units)
        out.append(BlobClip(spec=spec, units=units, clip=clip, mask=mask, landmarks=landmarks))
    return out
