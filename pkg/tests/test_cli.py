"""End-to-end command-line runs on a miniature configuration."""

import json
import os

import numpy as np
import pytest
import torch

from redub import io
from redub.cli import main
from redub.conditioning import load_codebook
from redub.synthetic import make_hidden_centroids, synth_speech_features, random_units

TINY = {
    "num_units": 4,
    "embed_dim": 4,
    "num_train_steps": 50,
    "num_inference_steps": 5,
    "lsd": {
        "input_frames": 4,
        "spatial_size": 8,
        "base_channels": 8,
        "channel_multipliers": [1],
        "attention_resolutions": [],
        "num_heads": 1,
        "time_embed_dim": 16,
        "groupnorm_groups": 4,
        "cond_dim": 8,
    },
    "srd": {
        "input_frames": 4,
        "spatial_size": 16,
        "base_channels": 8,
        "channel_multipliers": [1],
        "attention_resolutions": [],
        "num_heads": 1,
        "time_embed_dim": 16,
        "groupnorm_groups": 4,
        "cond_dim": 8,
    },
    "train_lsd": {"warmup_steps": 5, "total_steps": 40, "batch_size": 2},
    "train_srd": {"warmup_steps": 5, "total_steps": 30, "batch_size": 2},
    "dub": {"window_size": 4, "window_step": 2},
    "refine": {"window_size": 4, "window_step": 2},
    "srd_lr_range": [6, 12],
    "exclusion_radius": 2,
}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "tiny.json"
    with open(path, "w") as fh:
        json.dump(TINY, fh)
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, tiny_config):
    """Dataset -> trained checkpoint -> dub, shared across CLI tests."""
    root = tmp_path_factory.mktemp("ws")
    data = str(root / "data")
    ckpt = str(root / "ckpt")
    assert main([
        "make-synthetic", "--config", tiny_config, "--out", data,
        "--clips", "3", "--frames", "6", "--seed", "5",
    ]) == 0
    assert main([
        "train-lsd", "--config", tiny_config, "--data", data, "--out", ckpt,
        "--steps", "12", "--log-every", "2", "--print-every", "1000",
    ]) == 0
    return {"root": root, "data": data, "ckpt": ckpt, "config": tiny_config}


class TestMakeSynthetic:
    def test_dataset_is_complete(self, workspace):
        data = workspace["data"]
        ids = io.load_dataset_index(data)
        assert ids == ["clip_0000", "clip_0001", "clip_0002"]
        clip = io.load_clip(os.path.join(data, ids[0]))
        assert clip.shape == (6, 8, 8, 3)
        for name in ("mask.npy", "landmarks.txt", "units.txt", "spec.json"):
            assert os.path.isfile(os.path.join(data, ids[0], name))


class TestTraining:
    def test_checkpoint_and_artifacts(self, workspace):
        ckpt = workspace["ckpt"]
        model, meta = io.load_model_checkpoint(ckpt)
        assert meta["step"] == 12
        assert meta["stage"] == "lsd"
        assert os.path.isfile(os.path.join(ckpt, "train_log.tsv"))
        assert os.path.isfile(os.path.join(ckpt, "loss_curve.png"))
        assert os.path.isfile(os.path.join(ckpt, "optimizer.pt"))
        rows = io.read_training_log(os.path.join(ckpt, "train_log.tsv"))
        assert rows[0][0] == 2 and rows[-1][0] == 12

    def test_resume_continues_exactly(self, workspace, tmp_path):
        """12 steps in one run == 6 + 6 across a checkpoint boundary."""
        data, config = workspace["data"], workspace["config"]
        a = str(tmp_path / "a")
        b = str(tmp_path / "b")
        assert main(["train-lsd", "--config", config, "--data", data,
                     "--out", a, "--steps", "6", "--print-every", "1000"]) == 0
        assert main(["train-lsd", "--config", config, "--data", data,
                     "--out", b, "--steps", "6", "--resume", a,
                     "--print-every", "1000"]) == 0
        unbroken, _ = io.load_model_checkpoint(workspace["ckpt"], use_ema=False)
        resumed, meta = io.load_model_checkpoint(b, use_ema=False)
        assert meta["step"] == 12
        for k, v in unbroken.state_dict().items():
            assert torch.equal(v, resumed.state_dict()[k]), k
        ema_a = io.read_tensor_blob(os.path.join(workspace["ckpt"], "ema"))
        ema_b = io.read_tensor_blob(os.path.join(b, "ema"))
        for k in ema_a:
            assert torch.equal(ema_a[k], ema_b[k]), k


class TestDub:
    def test_dub_writes_clip_and_preserves_background(self, workspace, tmp_path):
        data, ckpt, config = workspace["data"], workspace["ckpt"], workspace["config"]
        clip_dir = os.path.join(data, "clip_0001")
        donor_units = os.path.join(data, "clip_0002", "units.txt")
        out = str(tmp_path / "dubbed")
        assert main(["dub", "--config", config, "--checkpoint", ckpt,
                     "--clip", clip_dir, "--units", donor_units, "--out", out]) == 0
        original = io.load_clip(clip_dir)
        dubbed = io.load_clip(out)
        mask = io.load_mask(clip_dir)
        outside = mask.unsqueeze(-1).expand_as(original) == 0
        assert torch.equal(dubbed[outside], original[outside])
        assert os.path.isfile(os.path.join(out, "units.txt"))
        assert os.path.isfile(os.path.join(out, "spec.json"))

    def test_dub_rejects_wrong_resolution(self, workspace, tmp_path):
        config, ckpt = workspace["config"], workspace["ckpt"]
        big = str(tmp_path / "big")
        os.makedirs(big)
        io.save_clip(big, torch.zeros(4, 12, 12, 3))
        io.save_mask(big, torch.ones(4, 12, 12))
        io.save_units(os.path.join(big, "units.txt"), [0] * 8)
        rc = main(["dub", "--config", config, "--checkpoint", ckpt,
                   "--clip", big, "--units", os.path.join(big, "units.txt"),
                   "--out", str(tmp_path / "o")])
        assert rc == 3

    def test_invert_round_trip_artifact(self, workspace, tmp_path):
        data, ckpt, config = workspace["data"], workspace["ckpt"], workspace["config"]
        out = str(tmp_path / "latent")
        assert main(["invert", "--config", config, "--checkpoint", ckpt,
                     "--clip", os.path.join(data, "clip_0000"), "--out", out]) == 0
        latent = io.load_clip(out)
        assert latent.shape == (6, 8, 8, 3)


class TestEvaluate:
    def test_report_files_and_figures(self, workspace, tmp_path):
        data, ckpt, config = workspace["data"], workspace["ckpt"], workspace["config"]
        gen_root = str(tmp_path / "gen")
        out = str(tmp_path / "dub0")
        assert main(["dub", "--config", config, "--checkpoint", ckpt,
                     "--clip", os.path.join(data, "clip_0000"),
                     "--units", os.path.join(data, "clip_0001", "units.txt"),
                     "--out", os.path.join(gen_root, "clip_0000")]) == 0
        del out
        io.save_dataset_index(gen_root, ["clip_0000"])
        report_dir = str(tmp_path / "report")
        assert main(["evaluate", "--originals", data, "--generated", gen_root,
                     "--report", report_dir, "--trace-clips", "1"]) == 0
        report = io.read_metric_report(os.path.join(report_dir, "report.tsv"))
        assert report.num_videos == 1
        assert set(report.metric_names) == {"lse_d", "lse_c", "id_p", "id_tc"}
        assert os.path.isfile(os.path.join(report_dir, "aggregate.txt"))
        assert os.path.isfile(os.path.join(report_dir, "metric_lse_d.png"))
        assert os.path.isfile(os.path.join(report_dir, "aperture_clip_0000.png"))


class TestCurate:
    def test_pose_selection(self, tmp_path):
        streams = tmp_path / "streams"
        streams.mkdir()
        cases = {"steady": 10.0, "turned": 45.0}
        for name, angle in cases.items():
            with open(streams / f"{name}.pose", "w") as fh:
                fh.write("duration=8.0\n")
                for _ in range(30):
                    fh.write(f"{angle} 0 0\n")
        manifest = str(tmp_path / "m.tsv")
        with open(manifest, "w") as fh:
            fh.write("steady\tstreams/steady.pose\nturned\tstreams/turned.pose\n")
        out = str(tmp_path / "curated")
        assert main(["curate", "pose", "--manifest", manifest, "--out", out]) == 0
        with open(os.path.join(out, "selected.tsv")) as fh:
            lines = fh.read().splitlines()
        assert lines[1].split("\t")[0] == "steady"
        assert len(lines) == 2
        assert os.path.isfile(os.path.join(out, "scores.png"))

    def test_occlusion_selection(self, tmp_path):
        streams = tmp_path / "streams"
        streams.mkdir()
        face_pts = [[float(x), float(y)] for x in range(5) for y in range(5)]
        hand = [[-1.0, -1.0], [5.0, -1.0], [5.0, 5.0], [-1.0, 5.0]]
        covered = {"face": face_pts, "hands": [hand]}
        clear = {"face": face_pts, "hands": []}
        for name, frame in (("covered", covered), ("clear", clear)):
            with open(streams / f"{name}.occ", "w") as fh:
                for _ in range(15):
                    fh.write(json.dumps(frame) + "\n")
        manifest = str(tmp_path / "m.tsv")
        with open(manifest, "w") as fh:
            fh.write("covered\tstreams/covered.occ\nclear\tstreams/clear.occ\n")
        out = str(tmp_path / "curated")
        assert main(["curate", "occlusion", "--manifest", manifest, "--out", out]) == 0
        with open(os.path.join(out, "selected.tsv")) as fh:
            lines = fh.read().splitlines()
        assert [ln.split("\t")[0] for ln in lines[1:]] == ["covered"]


class TestCorrupt:
    def test_corrupt_clip_dir(self, tmp_path):
        from redub.synthetic import make_blob_corpus

        blob = make_blob_corpus(1, 16, 30, 4, seed=9)[0]
        src = str(tmp_path / "long_clip")
        io.save_blob_clip(src, blob)
        out = str(tmp_path / "corrupted")
        assert main(["corrupt", "--clip", src, "--out", out]) == 0
        orig = io.load_clip(src)
        bad = io.load_clip(out)
        assert bad.shape == orig.shape
        assert not torch.equal(bad, orig)
        assert torch.all(bad >= -1) and torch.all(bad <= 1)

    def test_explicit_box(self, tmp_path):
        src = str(tmp_path / "src")
        os.makedirs(src)
        io.save_clip(src, torch.zeros(30, 8, 8, 3))
        out = str(tmp_path / "out")
        assert main(["corrupt", "--clip", src, "--out", out,
                     "--box", "4,8,2,6"]) == 0
        assert io.load_clip(out).shape == (30, 8, 8, 3)

    def test_box_required_without_spec(self, tmp_path):
        src = str(tmp_path / "src")
        os.makedirs(src)
        io.save_clip(src, torch.zeros(4, 8, 8, 3))
        rc = main(["corrupt", "--clip", src, "--out", str(tmp_path / "o")])
        assert rc == 3


class TestSpeechUnits:
    def test_fit_and_quantize_recover_units(self, tmp_path):
        rng = np.random.default_rng(0)
        centroids = make_hidden_centroids(4, 6, seed=1)
        units = random_units(rng, 4, 240)
        features = synth_speech_features(units, centroids, noise_std=0.3, rng=rng)
        feat_path = str(tmp_path / "features.npy")
        np.save(feat_path, features)
        cb_path = str(tmp_path / "codebook.bin")
        units_path = str(tmp_path / "units.txt")
        assert main(["fit-codebook", "--features", feat_path, "--units", "4",
                     "--out", cb_path]) == 0
        assert main(["quantize", "--features", feat_path, "--codebook", cb_path,
                     "--out", units_path]) == 0
        codebook = load_codebook(cb_path)
        assert codebook.num_units == 4
        recovered = io.load_units(units_path)
        # recovered ids must be a relabelling of the true ids
        mapping = {}
        for true, rec in zip(units.units.tolist(), recovered.tolist()):
            mapping.setdefault(true, rec)
            assert mapping[true] == rec
        assert len(set(mapping.values())) == 4


class TestErrorPaths:
    def test_missing_dataset_is_data_error(self, tiny_config, tmp_path):
        rc = main(["train-lsd", "--config", tiny_config,
                   "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
        assert rc == 3

    def test_bad_config_key_is_config_error(self, tmp_path):
        path = str(tmp_path / "bad.json")
        with open(path, "w") as fh:
            json.dump({"nonsense": 1}, fh)
        rc = main(["make-synthetic", "--config", path,
                   "--out", str(tmp_path / "d"), "--clips", "1"])
        assert rc == 2

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "redub" in capsys.readouterr().out
