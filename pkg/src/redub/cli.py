"""Command-line interface.

    redub make-synthetic --out data/train --clips 500
    redub train-lsd --data data/train --out runs/lsd --steps 20000
    redub train-srd --data data/train-hr --out runs/srd
    redub dub --checkpoint runs/lsd --clip data/test/clip_000 \
        --units new_units.txt --out out/clip_000
    redub evaluate --originals data/test --generated out --report report/
    redub curate pose --manifest streams/pose.tsv --out curated/
    redub corrupt --clip data/test/clip_000 --out corrupted/clip_000

Exit codes: 0 success, 2 configuration problems, 3 data problems,
4 internal invariant violations.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional

import numpy as np
import torch

from . import __version__, config as cfg, io, plots
from .conditioning import (
    UnitSequence,
    fit_codebook,
    load_codebook,
    quantize,
    save_codebook,
)
from .curation import (
    MouthBox,
    corrupt_clip,
    pose_score,
    occlusion_total,
    select_low_angle,
    select_occluded,
)
from .errors import ArgumentError, DataError, PipelineError
from .pipeline import dub_clip, dub_with_refinement, evaluate_pairs, invert_clip
from .synthetic import (
    LIP_LANDMARKS,
    commanded_aperture,
    make_blob_corpus,
    measure_aperture,
    synth_identity_embedder,
)
from .training import (
    build_dubbing_model,
    init_train_state,
    run_lsd_training,
    run_srd_training,
)
from .diffusion import build_cosine_schedule


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="desk", choices=sorted(cfg.PRESETS))
    p.add_argument("--config", default=None, help="JSON file overriding preset fields")


def _load_config(args) -> cfg.PipelineConfig:
    return cfg.load_config(preset=args.preset, config_path=args.config)


# ---------------------------------------------------------------------------
# make-synthetic


def cmd_make_synthetic(args) -> int:
    config = _load_config(args)
    size = args.size if args.size is not None else config.lsd.spatial_size
    corpus = make_blob_corpus(
        num_clips=args.clips,
        image_size=size,
        frames=args.frames,
        num_units=config.num_units,
        seed=args.seed,
    )
    ids = []
    for i, blob in enumerate(corpus):
        cid = f"clip_{i:04d}"
        io.save_blob_clip(os.path.join(args.out, cid), blob)
        ids.append(cid)
    io.save_dataset_index(args.out, ids)
    print(f"wrote {len(ids)} clips ({args.frames} frames at {size}x{size}) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# training


def _train_common(args, stage: str) -> int:
    config = _load_config(args)
    dn_config = config.lsd if stage == "lsd" else config.srd
    train_config = config.train_lsd if stage == "lsd" else config.train_srd
    if args.seed is not None:
        import dataclasses

        train_config = dataclasses.replace(train_config, seed=args.seed)
    schedule = build_cosine_schedule(config.num_train_steps, config.num_inference_steps)
    root = args.data
    ids = io.load_dataset_index(root)
    if stage == "lsd":
        clips = [
            io.load_clip_record(
                os.path.join(root, cid),
                config.num_units,
                LIP_LANDMARKS,
                config.exclusion_radius,
            )
            for cid in ids
        ]
        expected = dn_config.spatial_size
    else:
        clips = [io.load_srd_record(os.path.join(root, cid), config.num_units) for cid in ids]
        expected = dn_config.spatial_size
    for cid, rec in zip(ids, clips):
        if rec.clip.shape[1] != expected or rec.clip.shape[2] != expected:
            raise DataError(
                f"{cid}: clips must be {expected}x{expected} for the {stage} stage, "
                f"got {rec.clip.shape[1]}x{rec.clip.shape[2]}"
            )

    model = build_dubbing_model(dn_config, config.num_units, seed=train_config.seed)
    state = init_train_state(model, train_config)
    if args.resume is not None:
        loaded, meta = io.load_model_checkpoint(args.resume, use_ema=False)
        model.load_state_dict(loaded.state_dict())
        state.ema = io.read_tensor_blob(os.path.join(args.resume, "ema"))
        opt_path = os.path.join(args.resume, "optimizer.pt")
        if not os.path.isfile(opt_path):
            raise DataError(f"cannot resume: missing {opt_path}")
        state.optimizer.load_state_dict(torch.load(opt_path, weights_only=True))
        state.step = int(meta.get("step", 0))
        print(f"resumed from {args.resume} at step {state.step}")

    remaining = train_config.total_steps - state.step
    num_steps = remaining if args.steps is None else min(args.steps, remaining)
    if num_steps <= 0:
        print("nothing to do: training already complete")
        return 0

    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.tsv")

    def on_step(step, lr, loss):
        if step % args.log_every == 0 or step == train_config.total_steps:
            io.append_training_log(log_path, step, lr, loss)
        if step % args.print_every == 0:
            print(f"step {step}  lr {lr:.3e}  loss {loss:.5f}", flush=True)

    if stage == "lsd":
        run_lsd_training(model, clips, train_config, schedule, num_steps, state, on_step)
    else:
        run_srd_training(
            model,
            clips,
            train_config,
            schedule,
            num_steps,
            lr_range=config.srd_lr_range,
            replace_prob=config.srd_replace_prob,
            state=state,
            on_step=on_step,
        )

    io.save_model_checkpoint(
        args.out, model, ema=state.ema, step=state.step, extra={"stage": stage}
    )
    torch.save(state.optimizer.state_dict(), os.path.join(args.out, "optimizer.pt"))
    if os.path.isfile(log_path):
        plots.save_loss_curve(
            io.read_training_log(log_path), os.path.join(args.out, "loss_curve.png")
        )
    print(f"saved checkpoint at step {state.step} to {args.out}")
    return 0


def cmd_train_lsd(args) -> int:
    return _train_common(args, "lsd")


def cmd_train_srd(args) -> int:
    return _train_common(args, "srd")


# ---------------------------------------------------------------------------
# dubbing


def _load_landmarks_if_any(clip_dir: str) -> Optional[np.ndarray]:
    path = os.path.join(clip_dir, "landmarks.txt")
    return io.load_landmarks(path) if os.path.isfile(path) else None


def cmd_dub(args) -> int:
    config = _load_config(args)
    schedule = build_cosine_schedule(config.num_train_steps, config.num_inference_steps)
    model, meta = io.load_model_checkpoint(args.checkpoint, use_ema=not args.no_ema)
    clip = io.load_clip(args.clip)
    mask = io.load_mask(args.clip)
    units_orig = UnitSequence(
        io.load_units(os.path.join(args.clip, "units.txt")), model.num_units
    )
    units_new = UnitSequence(io.load_units(args.units), model.num_units)
    landmarks = _load_landmarks_if_any(args.clip)

    if args.srd_checkpoint is not None:
        srd_model, _ = io.load_model_checkpoint(args.srd_checkpoint, use_ema=not args.no_ema)
        out = dub_with_refinement(
            model,
            srd_model,
            schedule,
            clip,
            mask,
            units_orig,
            units_new,
            settings=config.dub,
            refine_settings=config.refine,
            landmarks=landmarks,
            lip_indices=LIP_LANDMARKS,
            seed=args.seed,
        )
    else:
        size = model.denoiser.config.spatial_size
        if clip.shape[1] != size or clip.shape[2] != size:
            raise DataError(
                f"clip is {clip.shape[1]}x{clip.shape[2]} but the generator expects "
                f"{size}x{size} (pass --srd-checkpoint to refine larger clips)"
            )
        out = dub_clip(
            model,
            schedule,
            clip,
            mask,
            units_orig,
            units_new,
            settings=config.dub,
            landmarks=landmarks,
            lip_indices=LIP_LANDMARKS,
            exclusion_radius=config.exclusion_radius,
        )

    os.makedirs(args.out, exist_ok=True)
    io.save_clip(args.out, out)
    io.save_units(os.path.join(args.out, "units.txt"), units_new.units)
    spec_path = os.path.join(args.clip, "spec.json")
    if os.path.isfile(spec_path):
        io.save_blob_spec(os.path.join(args.out, "spec.json"), io.load_blob_spec(spec_path))
    print(f"dubbed {clip.shape[0]} frames -> {args.out}")
    return 0


def cmd_invert(args) -> int:
    config = _load_config(args)
    schedule = build_cosine_schedule(config.num_train_steps, config.num_inference_steps)
    model, _ = io.load_model_checkpoint(args.checkpoint, use_ema=not args.no_ema)
    clip = io.load_clip(args.clip)
    mask = io.load_mask(args.clip)
    units_orig = UnitSequence(
        io.load_units(os.path.join(args.clip, "units.txt")), model.num_units
    )
    latent = invert_clip(model, schedule, clip, mask, units_orig, settings=config.dub)
    os.makedirs(args.out, exist_ok=True)
    io.save_clip(args.out, latent)
    print(f"inverted {clip.shape[0]} frames -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# evaluation


def cmd_evaluate(args) -> int:
    pairs = []
    for cid in io.load_dataset_index(args.generated):
        gen_dir = os.path.join(args.generated, cid)
        orig_dir = os.path.join(args.originals, cid)
        spec = io.load_blob_spec(os.path.join(gen_dir, "spec.json"))
        units = UnitSequence(
            io.load_units(os.path.join(gen_dir, "units.txt")), len(spec.aperture_map)
        )
        pairs.append((cid, io.load_clip(orig_dir), io.load_clip(gen_dir), spec, units))
    report = evaluate_pairs(
        pairs,
        embedder=synth_identity_embedder,
        measure=measure_aperture,
        commanded=lambda units, spec: commanded_aperture(units, spec),
    )
    tsv_path, agg_path = io.write_metric_report(args.report, report)
    figures = plots.save_metric_bars(report, args.report)
    for cid, _orig, gen, spec, units in pairs[: args.trace_clips]:
        figures.append(
            plots.save_aperture_traces(
                commanded_aperture(units, spec),
                measure_aperture(gen, spec),
                os.path.join(args.report, f"aperture_{cid}.png"),
                title=f"mouth opening: {cid}",
            )
        )
    with open(agg_path) as fh:
        sys.stdout.write(fh.read())
    print(f"report: {tsv_path}")
    print(f"figures: {', '.join(os.path.basename(p) for p in figures)}")
    return 0


# ---------------------------------------------------------------------------
# benchmark curation


def cmd_curate(args) -> int:
    entries = io.load_stream_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "pose":
        step = 5 if args.frame_step is None else args.frame_step
        videos = [io.load_pose_stream(path, vid) for vid, path in entries]
        selected = select_low_angle(
            videos,
            theta_max=args.theta_max,
            min_duration=args.min_duration,
            frame_step=step,
        )
        scores = [pose_score(v.poses, frame_step=step) for v in videos]
        threshold = args.theta_max
        title = "largest head angle per video"
        rows, header = selected, ("video_id", "score")
    else:
        step = 10 if args.frame_step is None else args.frame_step
        videos = [io.load_occlusion_stream(path, vid) for vid, path in entries]
        selected = select_occluded(videos, threshold=args.threshold, frame_step=step)
        scores = [float(occlusion_total(v.frames, frame_step=step)) for v in videos]
        threshold = float(args.threshold)
        title = "occluded landmark total per video"
        rows = [
            (r.video_id, r.total_occlusion, r.max_occlusion, r.processed_frames)
            for r in selected
        ]
        header = ("video_id", "total", "max", "frames")
    out_path = os.path.join(args.out, "selected.tsv")
    io.write_selection(out_path, rows, header=header)
    fig_path = plots.save_score_histogram(
        [s for s in scores if np.isfinite(s)],
        os.path.join(args.out, "scores.png"),
        title=title,
        threshold=threshold,
    )
    print(f"selected {len(selected)} of {len(videos)} videos -> {out_path}")
    print(f"figure: {fig_path}")
    return 0


def cmd_corrupt(args) -> int:
    clip = io.load_clip(args.clip)
    spec_path = os.path.join(args.clip, "spec.json")
    if args.box is not None:
        try:
            top, bottom, left, right = (int(v) for v in args.box.split(","))
        except ValueError:
            raise ArgumentError("--box must be 'top,bottom,left,right' in pixels")
        box = MouthBox(top=top, bottom=bottom, left=left, right=right)
    elif os.path.isfile(spec_path):
        spec = io.load_blob_spec(spec_path)
        size = spec.image_size
        cx, cy = spec.mouth_center
        box = MouthBox(
            top=int((cy - spec.mouth_max_height / 2) * size),
            bottom=int((cy + spec.mouth_max_height / 2) * size) + 1,
            left=int((cx - spec.mouth_width / 2) * size),
            right=int((cx + spec.mouth_width / 2) * size) + 1,
        )
    else:
        raise ArgumentError("no spec.json in the clip directory; pass --box")
    out = corrupt_clip(clip, box, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    io.save_clip(args.out, out)
    for name in ("units.txt",):
        src = os.path.join(args.clip, name)
        if os.path.isfile(src):
            io.save_units(os.path.join(args.out, name), io.load_units(src))
    if os.path.isfile(spec_path):
        io.save_blob_spec(os.path.join(args.out, "spec.json"), io.load_blob_spec(spec_path))
    print(f"corrupted mouth region of {clip.shape[0]} frames -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# speech units


def cmd_fit_codebook(args) -> int:
    features = np.load(args.features)
    codebook = fit_codebook(features, args.units, seed=args.seed)
    save_codebook(codebook, args.out)
    print(f"fit {codebook.num_units} centroids of dim {codebook.feature_dim} -> {args.out}")
    return 0


def cmd_quantize(args) -> int:
    features = np.load(args.features)
    codebook = load_codebook(args.codebook)
    units = quantize(features, codebook)
    io.save_units(args.out, units.units)
    print(f"quantized {len(units)} frames of features -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="redub", description="speech-conditioned video dubbing"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate a synthetic talking-blob dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=100)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--size", type=int, default=None, help="default: generator resolution")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)

    for stage, fn in (("train-lsd", cmd_train_lsd), ("train-srd", cmd_train_srd)):
        p = sub.add_parser(stage, help=f"train the {stage.split('-')[1]} stage")
        _add_config_flags(p)
        p.add_argument("--data", required=True, help="dataset root with index.txt")
        p.add_argument("--out", required=True, help="checkpoint directory")
        p.add_argument("--steps", type=int, default=None, help="steps this run (default: to completion)")
        p.add_argument("--resume", default=None, help="checkpoint directory to continue from")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--log-every", type=int, default=10)
        p.add_argument("--print-every", type=int, default=200)
        p.set_defaults(func=fn)

    p = sub.add_parser("dub", help="re-synchronise a clip to a new unit sequence")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="input clip directory")
    p.add_argument("--units", required=True, help="new unit sequence file")
    p.add_argument("--out", required=True)
    p.add_argument("--srd-checkpoint", default=None, help="refine through this checkpoint")
    p.add_argument("--seed", type=int, default=0, help="refiner noise seed")
    p.add_argument("--no-ema", action="store_true", help="use raw instead of EMA weights")
    p.set_defaults(func=cmd_dub)

    p = sub.add_parser("invert", help="write the DDIM inversion latent of a clip")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-ema", action="store_true")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("evaluate", help="score generated clips against originals")
    p.add_argument("--originals", required=True, help="dataset root of source clips")
    p.add_argument("--generated", required=True, help="root of dubbed clips (with index.txt)")
    p.add_argument("--report", required=True, help="output directory")
    p.add_argument("--trace-clips", type=int, default=3, help="aperture trace figures")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("curate", help="select benchmark videos from detector streams")
    p.add_argument("kind", choices=("pose", "occlusion"))
    p.add_argument("--manifest", required=True, help="TSV of video_id<TAB>stream-path")
    p.add_argument("--out", required=True)
    p.add_argument("--theta-max", type=float, default=20.0)
    p.add_argument("--min-duration", type=float, default=6.0)
    p.add_argument("--threshold", type=int, default=30)
    p.add_argument("--frame-step", type=int, default=None)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("corrupt", help="degrade the mouth region for robustness tests")
    p.add_argument("--clip", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--box", default=None, help="top,bottom,left,right pixels")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("fit-codebook", help="k-means codebook from speech features")
    p.add_argument("--features", required=True, help=".npy of [N, D] feature rows")
    p.add_argument("--units", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_codebook)

    p = sub.add_parser("quantize", help="map speech features to unit ids")
    p.add_argument("--features", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
