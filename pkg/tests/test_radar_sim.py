import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ric_fusion.fusion import DetectionRecord
from ric_fusion.geometry import from_object_frame, relative_yaw, to_object_frame
from ric_fusion.objects import ObjectBox
from ric_fusion.radar_sim import (MonoNoise, PlacementError, RadarModel, SceneConfig, _blur, emit_hits,
                                  oracle_range_error, read_scenes, sample_frame, sample_frames, sample_scene,
                                  write_scenes)
from ric_fusion.ric_model import facing_edges


def quiet_config(**kw):
    radar = RadarModel(edge_weight=1.0, range_sigma=0.0, angular_sigma=0.0, doppler_sigma=0.0, clutter_per_sweep=0.0)
    return SceneConfig(radar=radar, **kw)


def frame_json(f):
    return json.dumps(f.to_dict(), sort_keys=True)


def record(box, r):
    return DetectionRecord(box, 0, r, box.score, "fused")


class TestDeterminism:
    def test_same_seed_same_frame(self):
        cfg = SceneConfig(seed=3, objects_per_frame=6)
        assert frame_json(sample_scene(cfg)) == frame_json(sample_scene(SceneConfig(seed=3, objects_per_frame=6)))

    def test_different_seed_differs(self):
        assert frame_json(sample_scene(SceneConfig(seed=3))) != frame_json(sample_scene(SceneConfig(seed=4)))

    def test_frames_are_independent_of_batch(self):
        cfg = SceneConfig(seed=1, num_frames=4, objects_per_frame=3)
        frames = sample_frames(cfg)
        assert frame_json(frames[2]) == frame_json(sample_frame(cfg, 2))

    def test_sweeps_ordered_with_reference_dt(self):
        f = sample_scene(SceneConfig(seed=2, objects_per_frame=3))
        ts = [s.timestamp for s in f.sweeps]
        assert all(a < b for a, b in zip(ts, ts[1:]))
        assert len(f.sweeps) == 13
        for s in f.sweeps:
            assert s.timestamp + s.dt == pytest.approx(f.timestamp, abs=1e-12)
        assert sorted(round(s.dt / 0.077) for s in f.sweeps) == list(range(-6, 7))


class TestObjects:
    def test_boxes_do_not_overlap(self):
        f = sample_scene(SceneConfig(seed=5, objects_per_frame=30))
        for i, a in enumerate(f.gt):
            for b in f.gt[i + 1:]:
                gap = np.hypot(*(np.asarray(a.center) - np.asarray(b.center)))
                assert gap > 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))

    def test_ranges_and_speeds_within_config(self):
        cfg = SceneConfig(seed=6, objects_per_frame=20, range_min=10, range_max=20, speed_min=0, speed_max=4)
        for b in sample_scene(cfg).gt:
            assert 10 <= b.range <= 20
            assert np.hypot(*b.velocity) <= 4 + 1e-12

    def test_monocular_is_identity_without_noise(self):
        mono = MonoNoise(range_sigma=0, tangential_sigma=0, yaw_sigma=0, size_sigma=0, velocity_sigma=0,
                         score_sigma=0)
        f = sample_scene(SceneConfig(seed=7, objects_per_frame=5, mono=mono))
        for g, m in zip(f.gt, f.monocular):
            assert m.range == pytest.approx(g.range, abs=1e-12)
            assert (m.length, m.width, m.yaw, m.velocity) == (g.length, g.width, g.yaw, g.velocity)

    def test_monocular_range_noise_scale(self):
        cfg = SceneConfig(seed=8, num_frames=40, objects_per_frame=10)
        d = [m.range - g.range for f in sample_frames(cfg) for g, m in zip(f.gt, f.monocular)]
        assert abs(np.std(d) - 1.0) < 0.1 and abs(np.mean(d)) < 0.15

    def test_placement_error(self):
        cfg = SceneConfig(objects_per_frame=200, range_min=5, range_max=6, max_retries=10)
        with pytest.raises(PlacementError):
            sample_scene(cfg)

    @pytest.mark.parametrize("bad", [
        {"radar": RadarModel(edge_weight=1.5)},
        {"radar": RadarModel(doppler_sigma=-1)},
        {"mono": MonoNoise(range_sigma=-0.1)},
        {"range_min": 10, "range_max": 5},
        {"category_mix": {"zeppelin": 1.0}},
    ])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            SceneConfig(**bad)


class TestRadar:
    def test_noise_free_hits_lie_on_facing_edges(self):
        f = sample_scene(quiet_config(seed=9, objects_per_frame=8))
        checked = 0
        for s in f.sweeps:
            for k, box in enumerate(f.gt):
                at_t = box.moved(center=tuple(np.asarray(box.center) - np.asarray(box.velocity) * s.dt))
                local = to_object_frame(s.positions[s.object_id == k], at_t)
                hl, hw = at_t.length / 2, at_t.width / 2
                on = {"front": np.abs(local[:, 0] - hl) < 1e-9, "rear": np.abs(local[:, 0] + hl) < 1e-9,
                      "left": np.abs(local[:, 1] - hw) < 1e-9, "right": np.abs(local[:, 1] + hw) < 1e-9}
                hit = np.zeros(len(local), bool)
                for e in facing_edges(relative_yaw(at_t)):
                    hit |= on[e]
                assert hit.all()
                checked += len(local)
        assert checked > 100

    def test_exact_doppler_without_noise(self):
        f = sample_scene(quiet_config(seed=10, objects_per_frame=8))
        for s in f.sweeps:
            m = s.object_id >= 0
            p = s.positions[m]
            v = np.array([f.gt[k].velocity for k in s.object_id[m]])
            expect = np.einsum("ij,ij->i", p / np.hypot(p[:, 0], p[:, 1])[:, None], v)
            np.testing.assert_allclose(s.radial_speed[m], expect, rtol=0, atol=1e-12)

    def test_positions_advance_with_velocity(self):
        f = sample_scene(quiet_config(seed=11, objects_per_frame=6))
        for s in f.sweeps:
            for k, box in enumerate(f.gt):
                m = s.object_id == k
                at_t = box.moved(center=tuple(np.asarray(box.center) - np.asarray(box.velocity) * s.dt))
                np.testing.assert_allclose(s.positions[m], from_object_frame(s.body_xy[m], at_t), atol=1e-9)

    def test_expected_hits_non_increasing(self):
        r = np.linspace(0.1, 200, 5000)
        h = RadarModel().expected_hits(r)
        assert np.all(np.diff(h) <= 0)

    def test_empirical_hits_fall_with_range(self):
        rng = np.random.default_rng(0)
        radar = RadarModel()
        counts = []
        for r in (10, 20, 40):
            box = ObjectBox("car", (r, 0.0), 4.5, 1.9, 1.6, 0.3)
            counts.append(np.mean([len(emit_hits(box, radar, rng)) for _ in range(2000)]))
        assert counts[0] > counts[1] > counts[2]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 1))
    def test_emissions_inside_footprint(self, seed, edge_weight):
        rng = np.random.default_rng(seed)
        box = ObjectBox("car", (rng.uniform(3, 12), rng.uniform(-5, 5)), rng.uniform(0.3, 12), rng.uniform(0.3, 3),
                        1.5, rng.uniform(-math.pi, math.pi))
        body = emit_hits(box, RadarModel(edge_weight=edge_weight, hits_per_sweep=30), rng)
        assert np.all(np.abs(body[:, 0]) <= box.length / 2 + 1e-12)
        assert np.all(np.abs(body[:, 1]) <= box.width / 2 + 1e-12)

    @pytest.mark.parametrize("seed", [1, 2])
    def test_blur_within_five_sigma(self, seed):
        rng = np.random.default_rng(seed)
        radar = RadarModel()
        r = rng.uniform(5, 50, 1_000_000)
        a = rng.uniform(-math.pi, math.pi, len(r))
        p = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
        d = _blur(p, radar, rng) - p
        ray = p / r[:, None]
        radial = np.einsum("ij,ij->i", d, ray)
        tangential = d[:, 1] * ray[:, 0] - d[:, 0] * ray[:, 1]
        assert np.all(np.abs(radial) < 5 * radar.range_sigma)
        assert np.all(np.abs(tangential) < 5 * radar.angular_sigma * r)

    def test_clutter_is_labelled(self):
        f = sample_scene(SceneConfig(seed=12, objects_per_frame=0))
        assert all(np.all(s.object_id == -1) for s in f.sweeps)
        assert sum(len(s) for s in f.sweeps) > 0


class TestOracleRangeError:
    def test_perfect_records(self):
        f = sample_scene(SceneConfig(seed=13, objects_per_frame=4))
        out = oracle_range_error(f, [record(g, g.range) for g in f.gt])
        for c, v in out.items():
            if c != "unmatched":
                assert v["mean"] == 0 and v["median"] == 0
        assert out["unmatched"] == 0

    def test_single_pair_half_meter(self):
        gt = ObjectBox("car", (20.0, 0.0), 4, 2, 1.5, 0.0)
        f = sample_scene(SceneConfig(objects_per_frame=0))
        f.gt = [gt]
        out = oracle_range_error(f, [record(gt.moved(center=(20.5, 0.0)), 20.5)])
        assert out["car"] == {"mean": 0.5, "median": 0.5, "count": 1}

    def test_hand_summed_batch(self):
        rng = np.random.default_rng(14)
        f = sample_scene(SceneConfig(objects_per_frame=0))
        f.gt = [ObjectBox("car", (10.0 * k, 30.0), 4, 2, 1.5, 0.0) for k in range(-3, 4)]
        offsets = rng.uniform(-1.5, 1.5, len(f.gt))
        recs = [record(g, g.range + o) for g, o in zip(f.gt, offsets)]
        recs.append(record(ObjectBox("car", (80.0, -80.0), 4, 2, 1.5, 0.0), 10.0))
        out = oracle_range_error(f, recs)
        errs = [abs(o) for o in offsets]
        assert out["car"]["mean"] == pytest.approx(math.fsum(errs) / len(errs), abs=1e-12)
        assert out["car"]["median"] == pytest.approx(sorted(errs)[len(errs) // 2], abs=1e-12)
        assert out["unmatched"] == 1


class TestSceneFiles:
    def test_round_trip_is_exact(self, tmp_path):
        frames = sample_frames(SceneConfig(seed=15, num_frames=2, objects_per_frame=4))
        write_scenes(tmp_path / "s.jsonl", frames)
        back = read_scenes(tmp_path / "s.jsonl")
        assert [frame_json(f) for f in back] == [frame_json(f) for f in frames]
        write_scenes(tmp_path / "t.jsonl", back)
        assert (tmp_path / "s.jsonl").read_bytes() == (tmp_path / "t.jsonl").read_bytes()

    def test_empty_file(self, tmp_path):
        write_scenes(tmp_path / "e.jsonl", [])
        assert read_scenes(tmp_path / "e.jsonl") == []

    def test_malformed_line(self, tmp_path):
        frames = sample_frames(SceneConfig(seed=16, objects_per_frame=1))
        write_scenes(tmp_path / "s.jsonl", frames)
        with open(tmp_path / "s.jsonl", "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(ValueError, match=":2:"):
            read_scenes(tmp_path / "s.jsonl")

    def test_wrong_schema(self, tmp_path):
        (tmp_path / "s.jsonl").write_text(json.dumps({"schema": "other/9"}) + "\n")
        with pytest.raises(ValueError, match="schema"):
            read_scenes(tmp_path / "s.jsonl")
