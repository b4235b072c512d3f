"""File formats for clips, units, checkpoints, logs, and reports.

A clip on disk is a directory:

    clip/
      manifest.json            {"frames": T, "height": H, "width": W,
                                "channels": 3, "fps": 25}
      frames/frame_00000.npy   one float32 [H, W, C] array per frame
      mask.npy                 optional uint8 [T, H, W]
      landmarks.txt            optional, one line per frame: "x0 y0 x1 y1 ..."
      units.txt                optional, one unit id per line (2T lines)
      spec.json                optional synthetic-face geometry

Checkpoints are a raw little-endian float32 blob plus a text manifest of
"name shape offset" lines, with a config.json sidecar describing how to
rebuild the model.  Everything human-inspectable stays text.
"""

from __future__ import annotations

import dataclasses
import json
import os
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .denoiser import DenoiserConfig, build_denoiser
from .errors import DataError
from .synthetic import BlobSpec
from .training import DubbingModel

CLIP_MANIFEST = "manifest.json"
FRAME_DIR = "frames"
FRAME_PATTERN = "frame_{:05d}.npy"


# ---------------------------------------------------------------------------
# clips


def save_clip(path: str, clip: torch.Tensor, fps: int = 25) -> None:
    """Write a [T, H, W, C] float32 clip as per-frame .npy files."""
    arr = np.asarray(clip.detach().cpu().numpy(), dtype=np.float32)
    if arr.ndim != 4:
        raise DataError(f"clip must be [T, H, W, C], got shape {arr.shape}")
    frames, height, width, channels = arr.shape
    frame_dir = os.path.join(path, FRAME_DIR)
    os.makedirs(frame_dir, exist_ok=True)
    for i in range(frames):
        np.save(os.path.join(frame_dir, FRAME_PATTERN.format(i)), arr[i])
    manifest = {
        "frames": frames,
        "height": height,
        "width": width,
        "channels": channels,
        "fps": fps,
    }
    with open(os.path.join(path, CLIP_MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_clip(path: str) -> torch.Tensor:
    manifest_path = os.path.join(path, CLIP_MANIFEST)
    if not os.path.isfile(manifest_path):
        raise DataError(f"not a clip directory (no {CLIP_MANIFEST}): {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    frames = int(manifest["frames"])
    shape = (int(manifest["height"]), int(manifest["width"]), int(manifest["channels"]))
    out = np.empty((frames,) + shape, dtype=np.float32)
    for i in range(frames):
        frame_path = os.path.join(path, FRAME_DIR, FRAME_PATTERN.format(i))
        if not os.path.isfile(frame_path):
            raise DataError(f"missing frame file: {frame_path}")
        frame = np.load(frame_path)
        if frame.shape != shape:
            raise DataError(
                f"frame {i} has shape {frame.shape}, manifest says {shape}"
            )
        out[i] = frame.astype(np.float32)
    return torch.from_numpy(out)


def save_mask(path: str, mask: torch.Tensor) -> None:
    arr = np.asarray(mask.detach().cpu().numpy())
    np.save(os.path.join(path, "mask.npy"), (arr > 0.5).astype(np.uint8))


def load_mask(path: str) -> torch.Tensor:
    mask_path = os.path.join(path, "mask.npy")
    if not os.path.isfile(mask_path):
        raise DataError(f"missing mask file: {mask_path}")
    return torch.from_numpy(np.load(mask_path).astype(np.float32))


# ---------------------------------------------------------------------------
# units, landmarks, synthetic geometry


def save_units(path: str, units: Sequence[int]) -> None:
    with open(path, "w") as fh:
        for u in units:
            fh.write(f"{int(u)}\n")


def load_units(path: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise DataError(f"missing units file: {path}")
    values = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                values.append(int(text))
            except ValueError:
                raise DataError(f"{path}:{line_no}: not an integer unit id: {text!r}")
    return np.asarray(values, dtype=np.int64)


def save_landmarks(path: str, landmarks: np.ndarray) -> None:
    arr = np.asarray(landmarks, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise DataError(f"landmarks must be [T, L, 2], got shape {arr.shape}")
    with open(path, "w") as fh:
        for row in arr:
            fh.write(" ".join(f"{v:.6f}" for v in row.reshape(-1)) + "\n")


def load_landmarks(path: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise DataError(f"missing landmarks file: {path}")
    rows = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) % 2 != 0:
                raise DataError(f"{path}:{line_no}: odd number of coordinates")
            rows.append([float(p) for p in parts])
    if not rows:
        raise DataError(f"empty landmarks file: {path}")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise DataError(f"{path}: inconsistent landmark counts across frames")
    arr = np.asarray(rows, dtype=np.float64)
    return arr.reshape(arr.shape[0], width // 2, 2)


def save_blob_spec(path: str, spec: BlobSpec) -> None:
    payload = dataclasses.asdict(spec)
    payload["aperture_map"] = list(spec.aperture_map)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_blob_spec(path: str) -> BlobSpec:
    if not os.path.isfile(path):
        raise DataError(f"missing spec file: {path}")
    with open(path) as fh:
        payload = json.load(fh)
    payload["aperture_map"] = tuple(float(v) for v in payload["aperture_map"])
    for key in ("face_center", "mouth_center"):
        if key in payload:
            payload[key] = tuple(float(v) for v in payload[key])
    try:
        return BlobSpec(**payload)
    except TypeError as exc:
        raise DataError(f"bad spec file {path}: {exc}")


# ---------------------------------------------------------------------------
# datasets: a root directory with an index of clip ids


def save_dataset_index(root: str, clip_ids: Sequence[str]) -> None:
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "index.txt"), "w") as fh:
        for cid in clip_ids:
            fh.write(cid + "\n")


def load_dataset_index(root: str) -> list[str]:
    index_path = os.path.join(root, "index.txt")
    if not os.path.isfile(index_path):
        raise DataError(f"missing dataset index: {index_path}")
    with open(index_path) as fh:
        ids = [line.strip() for line in fh if line.strip()]
    if not ids:
        raise DataError(f"empty dataset index: {index_path}")
    return ids


# ---------------------------------------------------------------------------
# dataset <-> training records


def save_blob_clip(path: str, blob, fps: int = 25) -> None:
    """Write one synthetic corpus entry as a full clip directory."""
    os.makedirs(path, exist_ok=True)
    save_clip(path, blob.clip, fps=fps)
    save_mask(path, blob.mask)
    save_landmarks(os.path.join(path, "landmarks.txt"), blob.landmarks)
    save_units(os.path.join(path, "units.txt"), blob.units.units)
    save_blob_spec(os.path.join(path, "spec.json"), blob.spec)


def load_clip_record(
    path: str,
    num_units: int,
    lip_indices: Sequence[int],
    exclusion_radius: int,
):
    """Load a clip directory into a generator training record."""
    from .conditioning import UnitSequence, select_reference_frames
    from .training import ClipRecord

    clip = load_clip(path)
    mask = load_mask(path)
    units = UnitSequence(load_units(os.path.join(path, "units.txt")), num_units)
    if len(units) != 2 * clip.shape[0]:
        raise DataError(
            f"{path}: {len(units)} units for {clip.shape[0]} frames (need 2 per frame)"
        )
    landmarks = load_landmarks(os.path.join(path, "landmarks.txt"))
    if landmarks.shape[0] != clip.shape[0]:
        raise DataError(f"{path}: landmark frame count mismatch")
    ref = select_reference_frames(landmarks, lip_indices, exclusion_radius)
    return ClipRecord(clip=clip, mask=mask, units=units, ref_indices=ref)


def load_srd_record(path: str, num_units: int):
    """Load a clip directory into a refiner training record."""
    from .conditioning import UnitSequence
    from .training import SrdClipRecord

    clip = load_clip(path)
    mask = load_mask(path)
    units = UnitSequence(load_units(os.path.join(path, "units.txt")), num_units)
    if len(units) != 2 * clip.shape[0]:
        raise DataError(
            f"{path}: {len(units)} units for {clip.shape[0]} frames (need 2 per frame)"
        )
    return SrdClipRecord(clip=clip, mask=mask, units=units)


# ---------------------------------------------------------------------------
# checkpoints


def write_tensor_blob(prefix: str, tensors: dict[str, torch.Tensor]) -> None:
    """Raw float32 blob (<prefix>.bin) plus "name shape offset" manifest."""
    lines = []
    offset = 0
    with open(prefix + ".bin", "wb") as blob:
        for name in sorted(tensors):
            arr = tensors[name].detach().cpu().numpy().astype("<f4")
            blob.write(arr.tobytes())
            shape = ",".join(str(d) for d in arr.shape) or "scalar"
            lines.append(f"{name} {shape} {offset}")
            offset += arr.size * 4
    with open(prefix + ".manifest", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_tensor_blob(prefix: str) -> dict[str, torch.Tensor]:
    manifest_path = prefix + ".manifest"
    blob_path = prefix + ".bin"
    if not os.path.isfile(manifest_path) or not os.path.isfile(blob_path):
        raise DataError(f"missing checkpoint files for prefix {prefix}")
    with open(blob_path, "rb") as fh:
        raw = fh.read()
    out: dict[str, torch.Tensor] = {}
    with open(manifest_path) as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 3:
                raise DataError(f"{manifest_path}:{line_no}: expected 'name shape offset'")
            name, shape_text, offset_text = parts
            shape = () if shape_text == "scalar" else tuple(
                int(d) for d in shape_text.split(",")
            )
            count = int(np.prod(shape)) if shape else 1
            offset = int(offset_text)
            if offset + count * 4 > len(raw):
                raise DataError(f"{manifest_path}:{line_no}: blob too short for {name}")
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            out[name] = torch.from_numpy(arr.reshape(shape).copy())
    return out


def save_model_checkpoint(
    ckpt_dir: str,
    model: DubbingModel,
    ema: Optional[dict[str, torch.Tensor]] = None,
    step: int = 0,
    extra: Optional[dict] = None,
) -> None:
    os.makedirs(ckpt_dir, exist_ok=True)
    write_tensor_blob(
        os.path.join(ckpt_dir, "model"), dict(model.state_dict())
    )
    if ema is not None:
        write_tensor_blob(os.path.join(ckpt_dir, "ema"), ema)
    config = {
        "denoiser": dataclasses.asdict(model.denoiser.config),
        "num_units": model.num_units,
        "embed_dim": model.embed_dim,
        "step": step,
    }
    if extra:
        config.update(extra)
    with open(os.path.join(ckpt_dir, "config.json"), "w") as fh:
        json.dump(config, fh, indent=2)
        fh.write("\n")


def load_model_checkpoint(
    ckpt_dir: str, use_ema: bool = True
) -> tuple[DubbingModel, dict]:
    """Rebuild the model from config.json and load weights (EMA if present)."""
    config_path = os.path.join(ckpt_dir, "config.json")
    if not os.path.isfile(config_path):
        raise DataError(f"missing checkpoint config: {config_path}")
    with open(config_path) as fh:
        config = json.load(fh)
    dn = dict(config["denoiser"])
    for key in ("channel_multipliers", "attention_resolutions"):
        dn[key] = tuple(dn[key])
    denoiser = build_denoiser(DenoiserConfig(**dn), seed=0)
    model = DubbingModel(
        denoiser, num_units=int(config["num_units"]), embed_dim=int(config["embed_dim"])
    )
    prefix = os.path.join(ckpt_dir, "ema")
    if not (use_ema and os.path.isfile(prefix + ".manifest")):
        prefix = os.path.join(ckpt_dir, "model")
    tensors = read_tensor_blob(prefix)
    expected = set(model.state_dict().keys())
    found = set(tensors.keys())
    if expected != found:
        missing = sorted(expected - found)[:3]
        surplus = sorted(found - expected)[:3]
        raise DataError(
            f"checkpoint/model mismatch (missing {missing}, surplus {surplus})"
        )
    model.load_state_dict(tensors)
    model.eval()
    return model, config


# ---------------------------------------------------------------------------
# training logs


def append_training_log(path: str, step: int, lr: float, loss: float) -> None:
    new = not os.path.isfile(path)
    with open(path, "a") as fh:
        if new:
            fh.write("step\tlr\tloss\n")
        fh.write(f"{step}\t{lr:.8e}\t{loss:.8e}\n")


def read_training_log(path: str) -> list[tuple[int, float, float]]:
    if not os.path.isfile(path):
        raise DataError(f"missing training log: {path}")
    rows = []
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("step"):
            raise DataError(f"{path}: missing 'step\\tlr\\tloss' header")
        for line_no, line in enumerate(fh, start=2):
            text = line.strip()
            if not text:
                continue
            parts = text.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{line_no}: expected three tab-separated fields")
            rows.append((int(parts[0]), float(parts[1]), float(parts[2])))
    return rows


# ---------------------------------------------------------------------------
# metric reports


def write_metric_report(out_dir: str, report) -> tuple[str, str]:
    """report.tsv (per video) and aggregate.txt (mean +/- standard error)."""
    os.makedirs(out_dir, exist_ok=True)
    tsv_path = os.path.join(out_dir, "report.tsv")
    with open(tsv_path, "w") as fh:
        fh.write("video_id\t" + "\t".join(report.metric_names) + "\n")
        for video_id, values in report.rows:
            fh.write(
                video_id
                + "\t"
                + "\t".join(f"{values[m]:.6f}" for m in report.metric_names)
                + "\n"
            )
    agg_path = os.path.join(out_dir, "aggregate.txt")
    agg = report.aggregate()
    with open(agg_path, "w") as fh:
        fh.write(f"videos: {report.num_videos}\n")
        for name in report.metric_names:
            mean, stderr = agg[name]
            fh.write(f"{name}: {mean:.6f} +/- {stderr:.6f}\n")
        if report.degenerate_stderr:
            fh.write("stderr_degenerate: true\n")
    return tsv_path, agg_path


def read_metric_report(tsv_path: str):
    from .metrics import MetricReport

    if not os.path.isfile(tsv_path):
        raise DataError(f"missing report: {tsv_path}")
    with open(tsv_path) as fh:
        header = fh.readline().strip().split("\t")
        if not header or header[0] != "video_id":
            raise DataError(f"{tsv_path}: first column must be video_id")
        names = tuple(header[1:])
        report = MetricReport(metric_names=names)
        for line_no, line in enumerate(fh, start=2):
            text = line.strip()
            if not text:
                continue
            parts = text.split("\t")
            if len(parts) != len(names) + 1:
                raise DataError(f"{tsv_path}:{line_no}: wrong field count")
            report.add(parts[0], {n: float(v) for n, v in zip(names, parts[1:])})
    return report


# ---------------------------------------------------------------------------
# curation inputs


def load_pose_stream(path: str, video_id: Optional[str] = None):
    """Pose file: "duration=<seconds>" then one line per frame.

    Frame lines hold "yaw pitch roll" in degrees, or the word "none" for
    frames where the face detector found nothing.
    """
    from .curation import PoseFrame, VideoPoseStream

    if not os.path.isfile(path):
        raise DataError(f"missing pose file: {path}")
    with open(path) as fh:
        first = fh.readline().strip()
        if not first.startswith("duration="):
            raise DataError(f"{path}:1: expected 'duration=<seconds>' header")
        try:
            duration = float(first.split("=", 1)[1])
        except ValueError:
            raise DataError(f"{path}:1: bad duration value")
        poses = []
        for line_no, line in enumerate(fh, start=2):
            text = line.strip()
            if not text:
                continue
            if text == "none":
                poses.append(None)
                continue
            parts = text.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{line_no}: expected 'yaw pitch roll' or 'none'")
            poses.append(PoseFrame(float(parts[0]), float(parts[1]), float(parts[2])))
    if video_id is None:
        video_id = os.path.splitext(os.path.basename(path))[0]
    return VideoPoseStream(video_id=video_id, duration=duration, poses=tuple(poses))


def load_occlusion_stream(path: str, video_id: Optional[str] = None):
    """Occlusion file: one JSON object per line.

    Each line is {"face": [[x, y], ...] | null, "hands": [[[x, y], ...], ...]};
    a null face means no detection for that frame.
    """
    from .curation import OcclusionFrame, VideoOcclusionStream

    if not os.path.isfile(path):
        raise DataError(f"missing occlusion file: {path}")
    frames = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: bad JSON: {exc}")
            face = obj.get("face")
            hands = obj.get("hands") or []
            frames.append(
                OcclusionFrame(
                    face=None if face is None else tuple((float(x), float(y)) for x, y in face),
                    hands=tuple(tuple((float(x), float(y)) for x, y in hand) for hand in hands),
                )
            )
    if video_id is None:
        video_id = os.path.splitext(os.path.basename(path))[0]
    return VideoOcclusionStream(video_id=video_id, frames=tuple(frames))


def load_stream_manifest(path: str) -> list[tuple[str, str]]:
    """Manifest of "video_id<TAB>path" lines; relative paths resolve from it."""
    if not os.path.isfile(path):
        raise DataError(f"missing manifest: {path}")
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{line_no}: expected 'video_id<TAB>path'")
            vid, rel = parts
            out.append((vid, rel if os.path.isabs(rel) else os.path.join(base, rel)))
    return out


def write_selection(
    path: str,
    selected: Iterable[tuple],
    header: tuple[str, ...] = ("video_id", "score"),
) -> None:
    """Write selection rows as TSV: a video id followed by its value columns."""
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for vid, *values in selected:
            cells = [str(vid)] + [
                f"{v:.6f}" if isinstance(v, float) else str(v) for v in values
            ]
            fh.write("\t".join(cells) + "\n")
