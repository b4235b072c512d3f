"""Identity and lip-sync metrics with report aggregation.

All metrics consume per-frame embedding sequences (rows are embeddings) and
are pure numpy:

* ID-P  (identity persistence): softmax-weighted mean over frames of
  1 - cos(orig_i, gen_i), so frames where identity slips dominate the score.
  Identical sequences score exactly 0, which is the real-video reference.
* ID-TC (temporal consistency): softmax-weighted mean over consecutive
  generated frames of 1 - cos(e_i, e_{i+1}).
* LSE-D: mean over frames of 1 - <audio_i, video_i> at zero offset.
* LSE-C: scan temporal offsets -W..W, d(o) = mean 1 - <audio_i, video_{i+o}>
  over valid pairs; confidence = median_o d(o) - min_o d(o).  High values
  mean sync at the true offset stands out from the background.

Cosine distances are computed as ||u - v||^2 / 2 on unit rows — algebraically
identical to 1 - <u, v> but exactly 0.0 for identical rows, so the
real-video reference really scores 0 rather than float noise.

The softmax-weighted mean (max-subtracted, temperature tau) makes the worst
frames dominate an aggregate, matching how short failures dominate
perception.

For the synthetic corpus, apertures map to unit vectors on a quarter circle
(sync_embed_aperture), so cosine distance between commanded audio apertures
and measured video apertures is a faithful sync signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ArgumentError, DataError

LSE_OFFSET_RANGE = 15


def softmax_weighted_mean(values, tau: float = 1.0) -> float:
    """Sum_i softmax(values / tau)_i * values_i with max subtraction."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ArgumentError("softmax_weighted_mean of an empty sequence")
    if tau <= 0:
        raise ArgumentError("tau must be positive")
    z = (v - v.max()) / tau
    w = np.exp(z)
    w /= w.sum()
    return float((w * v).sum())


def _unit_rows(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ArgumentError(f"{name} must be [T, dim]")
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms < 1e-12):
        raise DataError(f"{name} contains a zero embedding row")
    return arr / norms[:, None]


def _cosine_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise 1 - cos on unit rows, as halved squared differences.

    Exactly 0.0 when rows coincide bit-for-bit, and never negative.
    """
    return np.square(a - b).sum(axis=1) / 2.0


def id_persistence(original, generated) -> float:
    """ID-P: softmax-weighted per-frame cosine distance, original vs generated."""
    o = _unit_rows(original, "original")
    g = _unit_rows(generated, "generated")
    if o.shape != g.shape:
        raise ArgumentError("original and generated embeddings must align")
    return softmax_weighted_mean(_cosine_distances(o, g))


def id_temporal_consistency(generated) -> float:
    """ID-TC: softmax-weighted cosine distance between consecutive frames."""
    g = _unit_rows(generated, "generated")
    if g.shape[0] < 2:
        raise ArgumentError("ID-TC needs at least two frames")
    return softmax_weighted_mean(_cosine_distances(g[:-1], g[1:]))


def _offset_distance(audio: np.ndarray, video: np.ndarray, offset: int) -> Optional[float]:
    n = audio.shape[0]
    idx = np.arange(n)
    vidx = idx + offset
    valid = (vidx >= 0) & (vidx < n)
    if not valid.any():
        return None
    return float(np.mean(_cosine_distances(audio[valid], video[vidx[valid]])))


def lse_metrics(audio_embeds, video_embeds, offset_window: int = 15) -> tuple[float, float]:
    """(LSE-D, LSE-C) for aligned audio/video embedding sequences.

    The confidence scan covers offsets -offset_window..offset_window, so the
    sequences must hold at least 2 * offset_window + 1 frames — otherwise the
    extreme offsets have no aligned pairs and the scan is ill-defined.
    """
    a = _unit_rows(audio_embeds, "audio_embeds")
    v = _unit_rows(video_embeds, "video_embeds")
    if a.shape != v.shape:
        raise ArgumentError("audio and video embedding sequences must align")
    if offset_window < 0:
        raise ArgumentError("offset_window must be non-negative")
    if a.shape[0] < 2 * offset_window + 1:
        raise ArgumentError(
            f"need at least {2 * offset_window + 1} frames to scan offsets "
            f"within +/-{offset_window}, got {a.shape[0]}"
        )
    distances = {}
    for off in range(-offset_window, offset_window + 1):
        d = _offset_distance(a, v, off)
        if d is not None:
            distances[off] = d
    lse_d = distances[0]
    vals = np.array(list(distances.values()))
    lse_c = float(np.median(vals) - vals.min())
    return lse_d, lse_c


def sync_embed_aperture(apertures) -> np.ndarray:
    """Map apertures in [0, 1] to unit vectors on a quarter circle.

    Distinct apertures get distinct directions and cosine distance grows
    monotonically with |a - b|, so sync metrics on these embeddings measure
    aperture agreement directly.
    """
    a = np.clip(np.asarray(apertures, dtype=np.float64).ravel(), 0.0, 1.0)
    angle = a * (math.pi / 2)
    return np.stack([np.cos(angle), np.sin(angle)], axis=1)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Per-video metric rows plus mean and standard-error aggregation."""

    metric_names: tuple[str, ...]
    rows: list[tuple[str, dict[str, float]]] = field(default_factory=list)

    def add(self, video_id: str, values: dict[str, float]) -> None:
        missing = set(self.metric_names) - set(values)
        if missing:
            raise ArgumentError(f"row {video_id!r} missing metrics {sorted(missing)}")
        self.rows.append((video_id, {k: float(values[k]) for k in self.metric_names}))

    @property
    def num_videos(self) -> int:
        return len(self.rows)

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """metric -> (mean, standard error); stderr is 0 for a single video."""
        if not self.rows:
            raise DataError("empty report has no aggregate")
        out = {}
        for name in self.metric_names:
            vals = np.array([row[1][name] for row in self.rows])
            if len(vals) > 1:
                stderr = float(vals.std(ddof=1) / math.sqrt(len(vals)))
            else:
                stderr = 0.0
            out[name] = (float(vals.mean()), stderr)
        return out

    @property
    def degenerate_stderr(self) -> bool:
        return len(self.rows) < 2


def paired_difference(
    report_a: MetricReport, report_b: MetricReport, metric: str
) -> np.ndarray:
    """Per-video metric differences (a - b) over the shared video ids."""
    a = {vid: row[metric] for vid, row in report_a.rows}
    b = {vid: row[metric] for vid, row in report_b.rows}
    shared = sorted(set(a) & set(b))
    if not shared:
        raise DataError("reports share no video ids")
    return np.array([a[v] - b[v] for v in shared])


def paired_wilcoxon(
    report_a: MetricReport, report_b: MetricReport, metric: str
) -> tuple[float, float]:
    """Wilcoxon signed-rank test over paired per-video metrics.

    Returns (statistic, p_value), two-sided.  Thin wrapper; anything more
    elaborate belongs in a stats package, not here.
    """
    from scipy.stats import wilcoxon

    diff = paired_difference(report_a, report_b, metric)
    if np.allclose(diff, 0):
        raise DataError("all paired differences are zero; test undefined")
    res = wilcoxon(diff)
    return float(res.statistic), float(res.pvalue)
