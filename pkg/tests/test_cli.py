import csv
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ric_fusion import nn
from ric_fusion.cli import main, parse_ablation
from ric_fusion.config import ConfigError, RunConfig, TrainSchedule, load_config
from ric_fusion.fusion import associate_gt
from ric_fusion.objects import STAGE3_BIN
from ric_fusion.radar_sim import read_scenes

FIXTURES = Path(__file__).parent / "fixtures"
SCENES = sorted(FIXTURES.glob("scene_*"))
SMALL = ["--hidden", "16,16,16", "--batch-size", "8"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Tiny Stage-1 + Stage-3 checkpoint trained on one fixture scene."""
    out = tmp_path_factory.mktemp("trained")
    scenes = str(SCENES[0] / "scenes.jsonl")
    assert main(["train-ric", "--scenes", scenes, "--epochs", "2", "--out", str(out), *SMALL]) == 0
    assert main(["train-fusion", "--scenes", scenes, "--checkpoint", str(out / "ric.npz"), "--epochs", "2",
                 "--out", str(out), *SMALL]) == 0
    return scenes, str(out / "fusion.npz")


class TestConfig:
    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31), sweeps=st.integers(0, 13), alpha=st.floats(0, 10, allow_nan=False),
           mode=st.sampled_from(["none", "doppler", "backproj", "doppler+tan", "mono"]),
           lr=st.floats(1e-9, 1.0), epochs=st.integers(0, 500), halve=st.one_of(st.none(), st.integers(0, 500)),
           sigma=st.floats(0, 5), edge=st.floats(0, 1))
    def test_round_trip(self, seed, sweeps, alpha, mode, lr, epochs, halve, sigma, edge):
        cfg = RunConfig(command="eval", seed=seed, sweeps=sweeps, alpha=alpha, velocity_mode=mode,
                        train_ric=TrainSchedule(epochs, lr, halve))
        cfg.scene["mono"]["range_sigma"] = sigma
        cfg.scene["radar"]["edge_weight"] = edge
        cfg.validate()
        back = RunConfig.loads(cfg.dump())
        assert back.to_dict() == cfg.to_dict()
        assert back.dump() == cfg.dump()

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            RunConfig.loads("sede: 3\n")

    def test_scene_seed_rejected(self):
        cfg = RunConfig()
        cfg.scene["seed"] = 4
        with pytest.raises(ConfigError, match="top-level seed"):
            cfg.validate()

    @pytest.mark.parametrize("text", ["seed: [1\n", "- 1\n- 2\n", "schema: other/2\n", "sweeps: 99\n",
                                      "train_ric: {epochs: 1, lr: 0.1, warmup: 3}\n", "alpha: -1\n"])
    def test_malformed_config_exits_2(self, tmp_path, capsys, text):
        p = tmp_path / "bad.yaml"
        p.write_text(text)
        assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
        assert "error" in capsys.readouterr().err

    def test_resolved_config_is_written_and_reloads(self, tmp_path):
        assert main(["simulate", "--frames", "1", "--objects", "2", "--seed", "9", "--out", str(tmp_path)]) == 0
        cfg = load_config(tmp_path / "simulate.config.yaml")
        assert cfg.seed == 9 and cfg.scene["objects_per_frame"] == 2
        assert main(["simulate", "--config", str(tmp_path / "simulate.config.yaml"), "--out",
                     str(tmp_path / "again")]) == 0
        assert (tmp_path / "scenes.jsonl").read_bytes() == (tmp_path / "again" / "scenes.jsonl").read_bytes()

    def test_bad_bin_table(self, tmp_path):
        p = tmp_path / "bins.yaml"
        p.write_text("car: 0.3\n")
        scenes = str(SCENES[0] / "scenes.jsonl")
        assert main(["train-ric", "--scenes", scenes, "--bin-size-table", str(p), "--out", str(tmp_path)]) == 2

    def test_parse_ablation(self):
        assert parse_ablation("sweeps=1,3,5,7") == ("sweeps", [1, 3, 5, 7])
        assert parse_ablation("velocity_mode=none,mono") == ("velocity_mode", ["none", "mono"])
        for bad in ("sweeps", "colour=1", "alpha=x"):
            with pytest.raises(ConfigError):
                parse_ablation(bad)


class TestSimulate:
    @pytest.mark.parametrize("fixture", SCENES, ids=lambda p: p.name)
    def test_fixtures_regenerate_bitwise(self, fixture, tmp_path):
        assert main(["simulate", "--config", str(fixture / "simulate.config.yaml"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "scenes.jsonl").read_bytes() == (fixture / "scenes.jsonl").read_bytes()

    def test_empty_request(self, tmp_path):
        assert main(["simulate", "--frames", "0", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "scenes.jsonl").read_bytes() == b""
        assert read_scenes(tmp_path / "scenes.jsonl") == []

    def test_unwritable_path(self, tmp_path):
        (tmp_path / "file").write_text("")
        assert main(["simulate", "--frames", "1", "--out", str(tmp_path / "file" / "sub")]) == 2


class TestTrain:
    def test_zero_scenes_exit_2(self, tmp_path):
        assert main(["simulate", "--frames", "0", "--out", str(tmp_path)]) == 0
        assert main(["train-ric", "--scenes", str(tmp_path / "scenes.jsonl"), "--out", str(tmp_path)]) == 2

    def test_missing_scenes_exit_2(self, tmp_path, capsys):
        assert main(["train-ric", "--scenes", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 2
        assert "not found" in capsys.readouterr().err

    def test_fusion_needs_stage1_checkpoint(self, tmp_path):
        scenes = str(SCENES[0] / "scenes.jsonl")
        assert main(["train-fusion", "--scenes", scenes, "--out", str(tmp_path)]) == 2
        assert main(["train-fusion", "--scenes", scenes, "--checkpoint", str(tmp_path / "x.npz"),
                     "--out", str(tmp_path)]) == 2

    def test_divergence_exit_3(self, tmp_path, capsys):
        scenes = str(SCENES[0] / "scenes.jsonl")
        assert main(["train-ric", "--scenes", scenes, "--lr", "1e300", "--epochs", "3", "--out", str(tmp_path),
                     *SMALL]) == 3
        assert "numerical" in capsys.readouterr().err
        assert not (tmp_path / "ric.npz").exists()

    def test_loss_trends_down_over_20_epochs(self, tmp_path):
        scenes = str(SCENES[1] / "scenes.jsonl")
        assert main(["train-ric", "--scenes", scenes, "--epochs", "20", "--out", str(tmp_path), *SMALL]) == 0
        rows = read_csv(tmp_path / "ric_loss.csv")
        loss = np.array([float(r["loss"]) for r in rows])
        assert len(loss) == 20
        slope = np.polyfit(np.arange(20), loss, 1)[0]
        assert slope < 0 and loss[-5:].mean() < loss[:5].mean()

    @pytest.mark.parametrize("stage", ["ric", "fusion"])
    def test_resume_is_bitwise(self, tmp_path, stage, trained):
        scenes, ckpt = trained
        cmd = "train-ric" if stage == "ric" else "train-fusion"
        base = [] if stage == "ric" else ["--checkpoint", str(tmp_path / "base.npz")]
        if stage == "fusion":
            net, opt, meta = nn.load_checkpoint(ckpt, "ric")
            nn.save_checkpoint(tmp_path / "base.npz", {"ric": (net, opt, meta)})
        full, part = tmp_path / "full", tmp_path / "part"
        assert main([cmd, "--scenes", scenes, "--epochs", "3", "--out", str(full), *base, *SMALL]) == 0
        assert main([cmd, "--scenes", scenes, "--epochs", "2", "--out", str(part), *base, *SMALL]) == 0
        name = f"{stage}.npz"
        assert main([cmd, "--scenes", scenes, "--epochs", "1", "--checkpoint", str(part / name),
                     "--out", str(part / "resumed"), *SMALL]) == 0
        a = read_csv(full / f"{stage}_loss.csv")[2]
        b = read_csv(part / "resumed" / f"{stage}_loss.csv")[0]
        assert a == b
        net_a, _, meta_a = nn.load_checkpoint(full / name, stage)
        net_b, _, meta_b = nn.load_checkpoint(part / "resumed" / name, stage)
        assert meta_a["epochs_done"] == meta_b["epochs_done"] == 3
        for k in net_a.params:
            np.testing.assert_array_equal(net_a.params[k], net_b.params[k])


class TestEval:
    def test_missing_checkpoint_exit_2(self, tmp_path, capsys):
        scenes = str(SCENES[0] / "scenes.jsonl")
        assert main(["eval", "--scenes", scenes, "--checkpoint", str(tmp_path / "none.npz"),
                     "--out", str(tmp_path)]) == 2
        assert "not found" in capsys.readouterr().err

    def test_stage1_only_checkpoint_exit_2(self, tmp_path):
        scenes = str(SCENES[0] / "scenes.jsonl")
        assert main(["train-ric", "--scenes", scenes, "--epochs", "1", "--out", str(tmp_path), *SMALL]) == 0
        assert main(["eval", "--scenes", scenes, "--checkpoint", str(tmp_path / "ric.npz"),
                     "--out", str(tmp_path)]) == 2

    def test_twice_identical(self, tmp_path, trained):
        scenes, ckpt = trained
        for d in ("a", "b"):
            assert main(["eval", "--scenes", scenes, "--checkpoint", ckpt, "--plots", "2", "--distributions",
                         "--out", str(tmp_path / d)]) == 0
        for name in ("report.csv", "detections.csv", "report.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        plots = sorted((tmp_path / "a" / "plots").glob("*.svg"))
        assert len(plots) == 2
        for p in plots:
            assert p.read_bytes() == (tmp_path / "b" / "plots" / p.name).read_bytes()

    def test_counts_match_association_recount(self, tmp_path, trained):
        for fixture in SCENES:
            scenes = str(fixture / "scenes.jsonl")
            out = tmp_path / fixture.name
            assert main(["eval", "--scenes", scenes, "--checkpoint", trained[1], "--plots", "0",
                         "--out", str(out)]) == 0
            frames = read_scenes(scenes)
            pairs = [(f.monocular[d].category) for f in frames for d, _, _ in associate_gt(f.monocular, f.gt,
                                                                                          STAGE3_BIN)]
            rows = read_csv(out / "report.csv")
            for cat in set(pairs):
                cells = [r for r in rows if r["category"] == cat]
                assert len(cells) == 3
                assert all(int(r["count"]) == pairs.count(cat) for r in cells)
            dets = read_csv(out / "detections.csv")
            assert len(dets) == sum(len(f.monocular) for f in frames)

    def test_ablate_sweeps_four_rows(self, tmp_path, trained, capsys):
        scenes, ckpt = trained
        assert main(["ablate", "--scenes", scenes, "--checkpoint", ckpt, "--ablate", "sweeps=1,3,5,7",
                     "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "ablation_sweeps.csv")
        assert [r["value"] for r in rows] == ["1", "3", "5", "7"]
        assert len(capsys.readouterr().out.strip().splitlines()) == 5

    def test_eval_ablate_flag(self, tmp_path, trained):
        scenes, ckpt = trained
        assert main(["eval", "--scenes", scenes, "--checkpoint", ckpt, "--ablate", "alpha=0,0.5",
                     "--out", str(tmp_path)]) == 0
        assert len(read_csv(tmp_path / "ablation_alpha.csv")) == 2

    def test_bad_ablation_kind_exit_2(self, tmp_path, trained):
        scenes, ckpt = trained
        assert main(["ablate", "--scenes", scenes, "--checkpoint", ckpt, "--ablate", "colour=1",
                     "--out", str(tmp_path)]) == 2
