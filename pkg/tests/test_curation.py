"""Curation tests: full-scan oracles for the early-exit selection passes,
geometric oracles for hull containment, and corruption-layout checks."""

import numpy as np
import pytest
import torch

from redub.curation import (
    CORRUPTION_SPAN,
    CORRUPTION_START,
    CORRUPTION_TAIL,
    NOISE_STD,
    MouthBox,
    OcclusionFrame,
    PoseFrame,
    VideoOcclusionStream,
    VideoPoseStream,
    convex_hull,
    corrupt_clip,
    count_occluded_landmarks,
    occlusion_total,
    point_in_hull,
    pose_score,
    select_low_angle,
    select_occluded,
)
from redub.errors import ArgumentError


def pose(y, p=0.0, r=0.0):
    return PoseFrame(yaw=y, pitch=p, roll=r)


def full_scan_low_angle(videos, theta_max=20.0, min_duration=6.0, frame_step=5):
    """Oracle: no early exit, plain max over sampled frames."""
    out = []
    for v in videos:
        if v.duration < min_duration:
            continue
        sampled = v.poses[::frame_step]
        if not sampled or any(f is None for f in sampled):
            continue
        score = max(
            max(abs(f.yaw), abs(f.pitch), abs(f.roll)) for f in sampled
        )
        if score <= theta_max:
            out.append((v.video_id, score))
    return sorted(out, key=lambda x: x[1])


class TestPoseSelection:
    def _random_stream(self, rng, vid):
        n = int(rng.integers(5, 60))
        poses = tuple(
            None
            if rng.random() < 0.1
            else pose(rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(-40, 40))
            for _ in range(n)
        )
        return VideoPoseStream(vid, duration=float(rng.uniform(2, 20)), poses=poses)

    def test_matches_full_scan_oracle(self):
        rng = np.random.default_rng(0)
        videos = [self._random_stream(rng, f"v{i}") for i in range(60)]
        got = select_low_angle(videos)
        want = full_scan_low_angle(videos)
        assert [v for v, _ in got] == [v for v, _ in want]
        assert np.allclose([s for _, s in got], [s for _, s in want])

    def test_boundary_score_exactly_theta_accepted(self):
        v = VideoPoseStream("edge", 10.0, (pose(20.0, 10.0, 5.0),))
        got = select_low_angle([v], theta_max=20.0)
        assert got == [("edge", 20.0)]

    def test_score_just_over_rejected(self):
        v = VideoPoseStream("over", 10.0, (pose(20.0001,),))
        assert select_low_angle([v], theta_max=20.0) == []

    def test_short_videos_skipped(self):
        ok = VideoPoseStream("ok", 6.0, (pose(1.0),))
        short = VideoPoseStream("short", 5.999, (pose(1.0),))
        got = select_low_angle([ok, short])
        assert [v for v, _ in got] == ["ok"]

    def test_sorted_ascending(self):
        videos = [
            VideoPoseStream("b", 10.0, (pose(15.0),)),
            VideoPoseStream("a", 10.0, (pose(3.0),)),
            VideoPoseStream("c", 10.0, (pose(9.0),)),
        ]
        got = select_low_angle(videos)
        assert [v for v, _ in got] == ["a", "c", "b"]

    def test_frame_step_skips_frames(self):
        # the violating pose sits on a skipped frame, so it is never seen
        poses = tuple(pose(90.0) if i % 5 == 2 else pose(1.0) for i in range(20))
        v = VideoPoseStream("sampled", 10.0, poses)
        assert select_low_angle([v], frame_step=5) == [("sampled", 1.0)]

    def test_missing_face_rejects_the_video(self):
        v = VideoPoseStream("gaps", 10.0, (None, pose(2.0), None))
        assert select_low_angle([v], frame_step=1) == []
        # but a missing face on a skipped frame is invisible to the selector
        v2 = VideoPoseStream("offgrid", 10.0, (pose(2.0), None, pose(3.0)))
        assert select_low_angle([v2], frame_step=2) == [("offgrid", 3.0)]

    def test_pose_score_ignores_gaps_and_rejects_empty(self):
        assert pose_score((None, pose(2.0), None), frame_step=1) == 2.0
        with pytest.raises(ArgumentError):
            pose_score((), frame_step=1)

    def test_early_break_same_decisions(self):
        rng = np.random.default_rng(1)
        videos = [self._random_stream(rng, f"v{i}") for i in range(40)]
        with_break = {v for v, _ in select_low_angle(videos)}
        without = {v for v, _ in full_scan_low_angle(videos)}
        assert with_break == without
        # and the early break genuinely stops scanning
        for v in videos:
            s = pose_score(v.poses, 5, theta_max=20.0)
            if s > 20.0:
                full = pose_score(v.poses, 5, theta_max=None)
                assert s <= full


def ray_cast_inside(point, polygon):
    """Oracle: even-odd ray casting for points not on the boundary."""
    x, y = point
    inside = False
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if xc > x:
                inside = not inside
    return inside


class TestHulls:
    def test_square_hull(self):
        pts = np.array(
            [[0, 0], [2, 0], [2, 2], [0, 2], [1, 1], [0.5, 1.5], [1.7, 0.2]]
        )
        hull = convex_hull(pts)
        assert len(hull) == 4
        assert set(map(tuple, hull.tolist())) == {(0, 0), (2, 0), (2, 2), (0, 2)}

    def test_hull_matches_ray_cast_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            pts = rng.uniform(0, 10, (12, 2))
            hull = convex_hull(pts)
            for _ in range(20):
                p = rng.uniform(-2, 12, 2)
                assert point_in_hull(p, hull) == ray_cast_inside(p, hull)

    def test_boundary_inclusive(self):
        hull = convex_hull(np.array([[0, 0], [4, 0], [4, 4], [0, 4]]))
        assert point_in_hull((0, 0), hull)  # vertex
        assert point_in_hull((2, 0), hull)  # edge midpoint
        assert point_in_hull((2, 2), hull)  # interior
        assert not point_in_hull((2, -0.001), hull)

    def test_degenerate_hulls_contain_nothing(self):
        line = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
        hull = convex_hull(line)
        assert not point_in_hull((1.0, 1.0), hull)
        assert not point_in_hull((0.0, 0.0), convex_hull(np.array([[0.0, 0.0]])))

    def test_count_occluded(self):
        face = np.array([[1.0, 1.0], [5.0, 5.0], [0.5, 0.5], [9.0, 9.0]])
        hull_a = convex_hull(np.array([[0, 0], [2, 0], [2, 2], [0, 2]]))
        hull_b = convex_hull(np.array([[4, 4], [6, 4], [6, 6], [4, 6]]))
        assert count_occluded_landmarks(face, [hull_a, hull_b]) == 3


def square_hand(cx, cy, r=1.0):
    return np.array([[cx - r, cy - r], [cx + r, cy - r], [cx + r, cy + r], [cx - r, cy + r]])


def occluded_frame(n_inside):
    """A frame with exactly n_inside face landmarks under one hand."""
    face = np.array(
        [[0.0, 0.0]] * n_inside + [[100.0, 100.0]] * (10 - n_inside), dtype=float
    )
    return OcclusionFrame(face=face, hands=(square_hand(0.0, 0.0),))


def clear_frame():
    return OcclusionFrame(face=np.array([[50.0, 50.0]]), hands=(square_hand(0.0, 0.0),))


class TestOcclusionSelection:
    def test_totals_accumulate(self):
        frames = tuple([occluded_frame(4), occluded_frame(7), clear_frame()])
        assert occlusion_total(frames, frame_step=1) == 11

    def test_boundary_total_30_rejected_31_accepted(self):
        v30 = VideoOcclusionStream("t30", tuple([occluded_frame(10)] * 3))
        v31 = VideoOcclusionStream(
            "t31", tuple([occluded_frame(10)] * 3 + [occluded_frame(1)])
        )
        got = select_occluded([v30, v31], threshold=30, frame_step=1)
        assert [r.video_id for r in got] == ["t31"]
        assert got[0].total_occlusion == 31
        assert got[0].max_occlusion == 10
        assert got[0].processed_frames == 4
        assert got[0].max_occlusion <= got[0].total_occlusion

    def test_early_stop_at_total(self):
        # 15 frames of 10 would total 150 without the early stop
        frames = tuple([occluded_frame(10)] * 15)
        total = occlusion_total(frames, frame_step=1, early_stop_total=100)
        assert total == 100

    def test_frame_step_sampling(self):
        # occlusions only on odd frames are invisible at step 2
        frames = tuple(
            occluded_frame(10) if i % 2 == 1 else clear_frame() for i in range(10)
        )
        assert occlusion_total(frames, frame_step=2) == 0

    def test_missing_face_or_hands_skipped(self):
        frames = (
            OcclusionFrame(face=None, hands=(square_hand(0, 0),)),
            OcclusionFrame(face=np.array([[0.0, 0.0]]), hands=()),
        )
        assert occlusion_total(frames, frame_step=1) == 0


class TestCorruptClip:
    def _clip(self, n=60, size=16, seed=0):
        gen = torch.Generator().manual_seed(seed)
        return (torch.rand((n, size, size, 3), generator=gen) * 2 - 1) * 0.5

    def test_untouched_regions(self):
        clip = self._clip()
        box = MouthBox(top=8, bottom=14, left=4, right=12)
        out = corrupt_clip(clip, box, seed=1)
        assert torch.equal(out[:CORRUPTION_START], clip[:CORRUPTION_START])
        assert torch.equal(out[-CORRUPTION_TAIL:], clip[-CORRUPTION_TAIL:])
        outside = out.clone()
        outside[:, box.top : box.bottom, box.left : box.right] = 0
        orig_outside = clip.clone()
        orig_outside[:, box.top : box.bottom, box.left : box.right] = 0
        assert torch.equal(outside, orig_outside)

    def test_rotated_crop_and_noise_stats(self):
        clip = self._clip(n=70)
        box = MouthBox(top=2, bottom=14, left=2, right=14)
        out = corrupt_clip(clip, box, seed=2)
        f = CORRUPTION_START + 3
        span_start = CORRUPTION_START
        source = (span_start - CORRUPTION_SPAN) % 70
        want = clip[source, box.top : box.bottom, box.left : box.right].flip(0).flip(1)
        resid = out[f, box.top : box.bottom, box.left : box.right] - want
        # residual is the injected noise wherever clamping did not bite
        inner = (want.abs() < 0.7) & (resid.abs() < 3 * NOISE_STD)
        vals = resid[inner]
        assert vals.numel() > 100
        assert abs(vals.std().item() - NOISE_STD) < 0.03

    def test_source_held_for_span(self):
        clip = self._clip(n=70)
        box = MouthBox(top=4, bottom=10, left=4, right=10)
        out = corrupt_clip(clip, box, seed=3)
        span = range(CORRUPTION_START, CORRUPTION_START + CORRUPTION_SPAN)
        source = (CORRUPTION_START - CORRUPTION_SPAN) % 70
        want = clip[source, box.top : box.bottom, box.left : box.right].flip(0).flip(1)
        for f in span:
            if f >= 70 - CORRUPTION_TAIL:
                break
            got = out[f, box.top : box.bottom, box.left : box.right]
            assert (got - want).abs().max() < 6 * NOISE_STD

    def test_deterministic_and_in_range(self):
        clip = self._clip()
        box = MouthBox(top=8, bottom=14, left=4, right=12)
        a = corrupt_clip(clip, box, seed=4)
        b = corrupt_clip(clip, box, seed=4)
        assert torch.equal(a, b)
        assert a.min() >= -1.0 and a.max() <= 1.0
        c = corrupt_clip(clip, box, seed=5)
        assert not torch.equal(a, c)

    def test_too_short_clip_rejected(self):
        with pytest.raises(ArgumentError):
            corrupt_clip(torch.zeros(20, 8, 8, 3), MouthBox(2, 4, 2, 4))

    def test_bad_box_rejected(self):
        with pytest.raises(ArgumentError):
            MouthBox(top=4, bottom=4, left=0, right=2)
        with pytest.raises(ArgumentError):
            corrupt_clip(torch.zeros(30, 8, 8, 3), MouthBox(0, 9, 0, 4))
