"""Round-trip and validation tests for the on-disk formats."""

import os

import numpy as np
import pytest
import torch

from redub import io
from redub.conditioning import UnitSequence
from redub.curation import PoseFrame
from redub.denoiser import DenoiserConfig
from redub.errors import DataError
from redub.metrics import MetricReport
from redub.synthetic import make_blob_corpus
from redub.training import DubbingModel, build_dubbing_model


def small_model():
    config = DenoiserConfig(
        input_frames=4,
        spatial_size=8,
        base_channels=8,
        channel_multipliers=(1, 2),
        attention_resolutions=(),
        num_heads=1,
        time_embed_dim=16,
        groupnorm_groups=4,
        cond_dim=8,
    )
    return build_dubbing_model(config, num_units=4, seed=3)


class TestClipRoundTrip:
    def test_clip_round_trip_exact(self, tmp_path):
        clip = torch.rand(5, 6, 7, 3) * 2 - 1
        io.save_clip(str(tmp_path), clip)
        assert torch.equal(io.load_clip(str(tmp_path)), clip)

    def test_manifest_records_geometry(self, tmp_path):
        io.save_clip(str(tmp_path), torch.zeros(2, 4, 6, 3), fps=30)
        import json

        with open(tmp_path / "manifest.json") as fh:
            manifest = json.load(fh)
        assert manifest == {
            "frames": 2, "height": 4, "width": 6, "channels": 3, "fps": 30
        }

    def test_missing_frame_raises(self, tmp_path):
        io.save_clip(str(tmp_path), torch.zeros(3, 4, 4, 3))
        os.remove(tmp_path / "frames" / "frame_00001.npy")
        with pytest.raises(DataError, match="missing frame"):
            io.load_clip(str(tmp_path))

    def test_not_a_clip_dir_raises(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            io.load_clip(str(tmp_path))

    def test_shape_mismatch_raises(self, tmp_path):
        io.save_clip(str(tmp_path), torch.zeros(2, 4, 4, 3))
        np.save(tmp_path / "frames" / "frame_00000.npy", np.zeros((5, 5, 3), np.float32))
        with pytest.raises(DataError, match="shape"):
            io.load_clip(str(tmp_path))

    def test_mask_round_trip_binarises(self, tmp_path):
        mask = torch.tensor([[[0.0, 0.7], [0.2, 1.0]]])
        io.save_mask(str(tmp_path), mask)
        assert torch.equal(
            io.load_mask(str(tmp_path)), torch.tensor([[[0.0, 1.0], [0.0, 1.0]]])
        )


class TestTextFormats:
    def test_units_round_trip(self, tmp_path):
        path = str(tmp_path / "units.txt")
        io.save_units(path, [0, 3, 1, 1])
        assert io.load_units(path).tolist() == [0, 3, 1, 1]

    def test_units_reject_garbage(self, tmp_path):
        path = str(tmp_path / "units.txt")
        with open(path, "w") as fh:
            fh.write("0\nbanana\n")
        with pytest.raises(DataError, match="banana"):
            io.load_units(path)

    def test_landmarks_round_trip(self, tmp_path):
        path = str(tmp_path / "landmarks.txt")
        pts = np.random.default_rng(0).random((4, 5, 2))
        io.save_landmarks(path, pts)
        assert np.allclose(io.load_landmarks(path), pts, atol=1e-6)

    def test_landmarks_inconsistent_counts(self, tmp_path):
        path = str(tmp_path / "landmarks.txt")
        with open(path, "w") as fh:
            fh.write("0 0 1 1\n0 0\n")
        with pytest.raises(DataError, match="inconsistent"):
            io.load_landmarks(path)

    def test_blob_spec_round_trip(self, tmp_path):
        blob = make_blob_corpus(1, 16, 2, 4, seed=7)[0]
        path = str(tmp_path / "spec.json")
        io.save_blob_spec(path, blob.spec)
        assert io.load_blob_spec(path) == blob.spec

    def test_dataset_index_round_trip(self, tmp_path):
        io.save_dataset_index(str(tmp_path), ["a", "b", "c"])
        assert io.load_dataset_index(str(tmp_path)) == ["a", "b", "c"]


class TestClipRecords:
    def test_blob_clip_round_trip_feeds_training(self, tmp_path):
        blob = make_blob_corpus(1, 16, 6, 4, seed=1)[0]
        io.save_blob_clip(str(tmp_path / "c0"), blob)
        rec = io.load_clip_record(str(tmp_path / "c0"), 4, (12, 13, 14, 15), 2)
        assert torch.equal(rec.clip, blob.clip)
        assert torch.equal(rec.mask, blob.mask)
        assert rec.units.units.tolist() == blob.units.units.tolist()
        assert rec.ref_indices.shape == (6,)
        assert all(abs(int(r) - i) > 2 for i, r in enumerate(rec.ref_indices))

    def test_unit_count_mismatch(self, tmp_path):
        blob = make_blob_corpus(1, 16, 6, 4, seed=1)[0]
        io.save_blob_clip(str(tmp_path / "c0"), blob)
        io.save_units(str(tmp_path / "c0" / "units.txt"), [0, 1, 2])
        with pytest.raises(DataError, match="2 per frame"):
            io.load_clip_record(str(tmp_path / "c0"), 4, (12, 13, 14, 15), 2)


class TestCheckpoints:
    def test_tensor_blob_round_trip(self, tmp_path):
        tensors = {
            "a.weight": torch.randn(3, 4),
            "b.bias": torch.randn(7),
            "scalar": torch.tensor(2.5),
        }
        prefix = str(tmp_path / "ckpt")
        io.write_tensor_blob(prefix, tensors)
        loaded = io.read_tensor_blob(prefix)
        assert set(loaded) == set(tensors)
        for name in tensors:
            assert torch.equal(loaded[name], tensors[name])

    def test_manifest_is_text(self, tmp_path):
        prefix = str(tmp_path / "ckpt")
        io.write_tensor_blob(prefix, {"w": torch.zeros(2, 2)})
        with open(prefix + ".manifest") as fh:
            assert fh.read() == "w 2,2 0\n"

    def test_model_checkpoint_round_trip(self, tmp_path):
        model = small_model()
        io.save_model_checkpoint(str(tmp_path), model, step=17)
        loaded, meta = io.load_model_checkpoint(str(tmp_path))
        assert meta["step"] == 17
        assert isinstance(loaded, DubbingModel)
        for (n1, p1), (n2, p2) in zip(
            model.state_dict().items(), loaded.state_dict().items()
        ):
            assert n1 == n2
            assert torch.equal(p1, p2)

    def test_checkpoint_prefers_ema(self, tmp_path):
        model = small_model()
        ema = {k: torch.full_like(v, 0.5) for k, v in model.state_dict().items()}
        io.save_model_checkpoint(str(tmp_path), model, ema=ema)
        loaded, _ = io.load_model_checkpoint(str(tmp_path), use_ema=True)
        assert torch.all(loaded.embedding == 0.5)
        raw, _ = io.load_model_checkpoint(str(tmp_path), use_ema=False)
        assert torch.equal(raw.embedding.data, model.embedding.data)

    def test_name_mismatch_raises(self, tmp_path):
        model = small_model()
        io.save_model_checkpoint(str(tmp_path), model)
        import json

        with open(tmp_path / "config.json") as fh:
            config = json.load(fh)
        config["num_units"] = 7  # embedding table now has a different shape
        with open(tmp_path / "config.json", "w") as fh:
            json.dump(config, fh)
        with pytest.raises(Exception):
            io.load_model_checkpoint(str(tmp_path))


class TestLogsAndReports:
    def test_training_log_round_trip(self, tmp_path):
        path = str(tmp_path / "log.tsv")
        io.append_training_log(path, 1, 1e-4, 0.5)
        io.append_training_log(path, 2, 2e-4, 0.25)
        assert io.read_training_log(path) == [(1, 1e-4, 0.5), (2, 2e-4, 0.25)]

    def test_metric_report_round_trip(self, tmp_path):
        report = MetricReport(metric_names=("lse_d", "id_p"))
        report.add("v1", {"lse_d": 1.25, "id_p": 0.03125})
        report.add("v2", {"lse_d": 0.5, "id_p": 0.0625})
        tsv, agg = io.write_metric_report(str(tmp_path), report)
        loaded = io.read_metric_report(tsv)
        assert loaded.metric_names == report.metric_names
        assert loaded.rows == report.rows
        with open(agg) as fh:
            text = fh.read()
        assert "videos: 2" in text
        assert "stderr_degenerate" not in text

    def test_single_video_flags_degenerate_stderr(self, tmp_path):
        report = MetricReport(metric_names=("m",))
        report.add("only", {"m": 1.0})
        _, agg = io.write_metric_report(str(tmp_path), report)
        with open(agg) as fh:
            assert "stderr_degenerate: true" in fh.read()


class TestStreamParsers:
    def test_pose_stream(self, tmp_path):
        path = str(tmp_path / "vid1.pose")
        with open(path, "w") as fh:
            fh.write("duration=7.25\n10 -3 0.5\nnone\n1 2 3\n")
        stream = io.load_pose_stream(path)
        assert stream.video_id == "vid1"
        assert stream.duration == 7.25
        assert stream.poses[0] == PoseFrame(10.0, -3.0, 0.5)
        assert stream.poses[1] is None
        assert len(stream.poses) == 3

    def test_pose_stream_needs_header(self, tmp_path):
        path = str(tmp_path / "bad.pose")
        with open(path, "w") as fh:
            fh.write("1 2 3\n")
        with pytest.raises(DataError, match="duration"):
            io.load_pose_stream(path)

    def test_occlusion_stream(self, tmp_path):
        path = str(tmp_path / "vid2.occ")
        with open(path, "w") as fh:
            fh.write('{"face": [[0, 0], [1, 0], [0, 1]], "hands": [[[0.1, 0.1]]]}\n')
            fh.write('{"face": null, "hands": []}\n')
        stream = io.load_occlusion_stream(path)
        assert len(stream.frames) == 2
        assert stream.frames[0].face == ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0))
        assert stream.frames[0].hands == (((0.1, 0.1),),)
        assert stream.frames[1].face is None

    def test_manifest_resolves_relative_paths(self, tmp_path):
        sub = tmp_path / "streams"
        sub.mkdir()
        with open(sub / "a.pose", "w") as fh:
            fh.write("duration=1\n")
        manifest = str(tmp_path / "manifest.tsv")
        with open(manifest, "w") as fh:
            fh.write("vidA\tstreams/a.pose\n")
        entries = io.load_stream_manifest(manifest)
        assert entries[0][0] == "vidA"
        assert os.path.isfile(entries[0][1])

    def test_selection_file(self, tmp_path):
        path = str(tmp_path / "sel.tsv")
        io.write_selection(path, [("a", 1.5), ("b", 2.0)])
        with open(path) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "video_id\tscore"
        assert lines[1].startswith("a\t1.5")
