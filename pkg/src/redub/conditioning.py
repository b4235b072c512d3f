"""Speech-unit conditioning and reference-frame selection.

Speech is represented as a sequence of discrete units obtained by k-means
over self-supervised speech features at 50 Hz.  Video runs at 25 fps, so
every frame owns exactly two units; a learned table with one extra NULL row
(index k, used for dropped conditioning and padding) embeds each unit and
the two embeddings are concatenated into one row per frame:

    c_i = [E[u_{2i}] ; E[u_{2i+1}]]  in R^{2d}

Per-frame FiLM parameters are produced from these rows by a depthwise
temporal convolution followed by a linear projection; inside the denoiser
they modulate instance-normalised activations channelwise, AdaIN-style.

Reference frames give the network an unmasked view of the speaker: frame i
is paired with the frame whose non-lip landmarks are nearest in L2 among
frames more than `exclusion_radius` away, which favours matching head pose
while preventing lip leakage from temporal neighbours.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ArgumentError, ConfigError, ContractError, DataError

NULL_IS_LAST_ROW = True  # the NULL symbol always equals num_units

_CODEBOOK_MAGIC = b"RDCB"
_CODEBOOK_VERSION = 1


# ---------------------------------------------------------------------------
# unit sequences


@dataclass(frozen=True)
class UnitSequence:
    """Discrete speech units at 50 Hz; NULL is num_units itself."""

    units: np.ndarray  # int64 [N]
    num_units: int

    def __post_init__(self):
        units = np.asarray(self.units, dtype=np.int64)
        object.__setattr__(self, "units", units)
        if units.ndim != 1:
            raise ArgumentError("units must be a 1-D sequence")
        if self.num_units < 1:
            raise ConfigError("num_units must be >= 1")
        if units.size and (units.min() < 0 or units.max() > self.num_units):
            raise DataError(
                f"unit ids must lie in [0, {self.num_units}] (NULL={self.num_units})"
            )

    def __len__(self):
        return len(self.units)

    @property
    def null_id(self) -> int:
        return self.num_units


def null_units(length: int, num_units: int) -> UnitSequence:
    """An all-NULL sequence, the unconditional branch's input."""
    return UnitSequence(np.full(length, num_units, dtype=np.int64), num_units)


def drop_condition(units: UnitSequence, prob: float, rng: np.random.Generator) -> UnitSequence:
    """With probability prob, replace the whole sequence by NULL symbols.

    Dropping is all-or-nothing per clip so the unconditional branch sees
    coherent inputs during classifier-free training.
    """
    if not 0.0 <= prob <= 1.0:
        raise ConfigError("dropout probability must lie in [0, 1]")
    if rng.random() < prob:
        return null_units(len(units), units.num_units)
    return units


# ---------------------------------------------------------------------------
# k-means codebook


@dataclass(frozen=True)
class Codebook:
    """k-means centroids used to discretise speech features."""

    centroids: np.ndarray  # float64 [k, d]

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        object.__setattr__(self, "centroids", c)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ArgumentError("centroids must be [k, d] with k >= 1")

    @property
    def num_units(self) -> int:
        return self.centroids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centroids.shape[1]


def _sq_dists(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ||x - c||^2 expanded; clip tiny negatives from cancellation
    d = (
        (features**2).sum(1, keepdims=True)
        - 2.0 * features @ centroids.T
        + (centroids**2).sum(1)
    )
    return np.maximum(d, 0.0)


def fit_codebook(
    features: np.ndarray,
    num_units: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> Codebook:
    """Lloyd's k-means with k-means++ seeding.

    Stops when the relative change in inertia falls below tol or after
    max_iter sweeps.  A cluster that empties is reseeded to the point
    farthest from its assigned centroid.  Deterministic given the seed.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ArgumentError("features must be [N, d]")
    n = features.shape[0]
    if n < num_units:
        raise DataError(f"need at least {num_units} feature vectors, got {n}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((num_units, features.shape[1]))
    centroids[0] = features[rng.integers(n)]
    best = _sq_dists(features, centroids[:1]).ravel()
    for j in range(1, num_units):
        total = best.sum()
        if total <= 0:
            centroids[j] = features[rng.integers(n)]
        else:
            centroids[j] = features[np.searchsorted(np.cumsum(best / total), rng.random())]
        best = np.minimum(best, _sq_dists(features, centroids[j : j + 1]).ravel())

    inertia_prev = np.inf
    for _ in range(max_iter):
        dists = _sq_dists(features, centroids)
        assign = dists.argmin(1)
        nearest = dists[np.arange(n), assign]
        inertia = nearest.sum()
        for j in range(num_units):
            members = assign == j
            if members.any():
                centroids[j] = features[members].mean(0)
            else:
                far = nearest.argmax()
                centroids[j] = features[far]
                nearest[far] = 0.0
        if inertia_prev - inertia <= tol * max(inertia_prev, 1e-300):
            break
        inertia_prev = inertia
    return Codebook(centroids)


def quantize(features: np.ndarray, codebook: Codebook) -> UnitSequence:
    """Map each feature vector to its nearest centroid (ties: lowest index)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != codebook.feature_dim:
        raise ArgumentError(
            f"features must be [N, {codebook.feature_dim}], got {features.shape}"
        )
    assign = _sq_dists(features, codebook.centroids).argmin(1)
    return UnitSequence(assign.astype(np.int64), codebook.num_units)


def save_codebook(codebook: Codebook, path) -> None:
    """16-byte header (magic, k, feature_dim, version) + float64 centroids."""
    header = struct.pack(
        "<4sIII", _CODEBOOK_MAGIC, codebook.num_units, codebook.feature_dim, _CODEBOOK_VERSION
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(codebook.centroids, dtype="<f8").tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise DataError(f"{path}: truncated codebook header")
        magic, k, dim, version = struct.unpack("<4sIII", header)
        if magic != _CODEBOOK_MAGIC:
            raise DataError(f"{path}: not a codebook file (bad magic {magic!r})")
        if version != _CODEBOOK_VERSION:
            raise DataError(f"{path}: unsupported codebook version {version}")
        payload = fh.read()
    expected = k * dim * 8
    if len(payload) != expected:
        raise DataError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    centroids = np.frombuffer(payload, dtype="<f8").reshape(k, dim).copy()
    return Codebook(centroids)


# ---------------------------------------------------------------------------
# embedding


def make_embedding_table(
    num_units: int, dim: int, seed: int = 0, scale: float = 1.0
) -> torch.Tensor:
    """A [num_units + 1, dim] table; the extra last row embeds NULL."""
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(num_units + 1, dim, generator=gen) * scale


def embed_units(units: UnitSequence, table) -> torch.Tensor:
    """Concatenate the two 50 Hz unit embeddings owned by each 25 fps frame.

    Returns an [N/2, 2*dim] per-frame condition matrix.  The sequence length
    must be even; trim or pad with NULL upstream.
    """
    n = len(units)
    if n % 2 != 0:
        raise ArgumentError(f"unit sequence length {n} is odd; each frame needs two units")
    rows = table.shape[0]
    if units.num_units + 1 != rows:
        raise ArgumentError(
            f"table has {rows} rows but alphabet needs {units.num_units + 1}"
        )
    idx = units.units
    if isinstance(table, torch.Tensor):
        emb = table[torch.from_numpy(idx)]
        return emb.reshape(n // 2, 2 * table.shape[1])
    emb = np.asarray(table)[idx]
    return emb.reshape(n // 2, 2 * table.shape[1])


# ---------------------------------------------------------------------------
# reference frames


def select_reference_frames(
    landmarks: np.ndarray,
    lip_indices,
    exclusion_radius: int = 5,
) -> np.ndarray:
    """For each frame, the index of the non-neighbour with nearest pose.

    Distance is the L2 norm over all landmarks except lip_indices, so the
    choice tracks head pose rather than mouth shape.  Frames within
    exclusion_radius are skipped to stop the network copying lips from
    temporal neighbours; ties break toward the smallest index.  If every
    other frame is excluded, the temporally farthest frame is used.
    """
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.ndim != 3 or landmarks.shape[2] != 2:
        raise ArgumentError("landmarks must be [T, L, 2]")
    num_frames, num_points, _ = landmarks.shape
    lip = np.zeros(num_points, dtype=bool)
    lip[list(lip_indices)] = True
    if lip.all():
        raise ArgumentError("cannot select references: every landmark is a lip landmark")
    pose = landmarks[:, ~lip, :].reshape(num_frames, -1)
    diff = pose[:, None, :] - pose[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    out = np.empty(num_frames, dtype=np.int64)
    idx = np.arange(num_frames)
    for i in range(num_frames):
        allowed = np.abs(idx - i) > exclusion_radius
        if allowed.any():
            d = np.where(allowed, dist[i], np.inf)
            out[i] = int(d.argmin())
        else:
            out[i] = int(np.abs(idx - i).argmax())
    return out


# ---------------------------------------------------------------------------
# FiLM


@dataclass
class FilmParams:
    """Per-frame channelwise affine parameters."""

    gamma: torch.Tensor  # [..., T, C]
    beta: torch.Tensor  # [..., T, C]


class FilmGenerator(torch.nn.Module):
    """Depthwise temporal conv + linear projection to per-frame (gamma, beta).

    Initialised to the identity modulation: the depthwise kernel is a centre
    tap and the projection is zero, so gamma = 1 and beta = 0 until training
    moves them.  Padding is zero-padding, kernel width 3 by default.
    """

    def __init__(self, cond_dim: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd for same-length output")
        self.conv = torch.nn.Conv1d(
            cond_dim, cond_dim, kernel_size, padding=kernel_size // 2, groups=cond_dim
        )
        self.proj = torch.nn.Linear(cond_dim, 2 * out_channels)
        self.out_channels = out_channels
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.weight[:, 0, kernel_size // 2] = 1.0
            self.conv.bias.zero_()
            self.proj.weight.zero_()
            self.proj.bias.zero_()

    def forward(self, cond: torch.Tensor) -> FilmParams:
        """cond [B, T, c] (or [T, c]) -> FilmParams with gamma/beta [B, T, C]."""
        squeeze = cond.dim() == 2
        if squeeze:
            cond = cond.unsqueeze(0)
        h = self.conv(cond.transpose(1, 2)).transpose(1, 2)
        gb = self.proj(h)
        gamma = 1.0 + gb[..., : self.out_channels]
        beta = gb[..., self.out_channels :]
        if squeeze:
            gamma, beta = gamma[0], beta[0]
        return FilmParams(gamma=gamma, beta=beta)


def film_params(frame_conditions: torch.Tensor, generator: FilmGenerator) -> FilmParams:
    """Functional entry point for the generator (kept for symmetry with ops)."""
    return generator(frame_conditions)


def apply_film(h: torch.Tensor, params: FilmParams, eps: float = 1e-5) -> torch.Tensor:
    """Instance-normalise each (frame, channel) plane and apply the affine.

    h is [B, C, T, H, W]; gamma/beta are [B, T, C].  Normalisation is over
    the spatial extent of each frame, so the condition rescales per-frame
    feature statistics without mixing time.
    """
    if h.dim() != 5:
        raise ArgumentError("apply_film expects [B, C, T, H, W] activations")
    mean = h.mean(dim=(3, 4), keepdim=True)
    var = h.var(dim=(3, 4), unbiased=False, keepdim=True)
    normed = (h - mean) / torch.sqrt(var + eps)
    gamma = params.gamma.permute(0, 2, 1)[..., None, None]  # [B, C, T, 1, 1]
    beta = params.beta.permute(0, 2, 1)[..., None, None]
    return gamma * normed + beta
