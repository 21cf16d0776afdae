"""Command-line entry point: simulate scenes, train both networks, evaluate and ablate.

Exit codes: 0 success, 2 usage or data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import evalkit, nn, radar_sim
from .config import ConfigError, RunConfig, TrainSchedule, load_bin_table, load_config
from .fusion import Stage3Model, train_stage3
from .matcher import VelocityMode
from .ric_model import EmptyAccumulation, GtSample, RicModel, build_gt_distribution, train_ric

log = logging.getLogger("ric_fusion")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

RIC_TAG = "ric"
FUSION_TAG = "fusion"


class DataError(Exception):
    """Missing or unusable input data."""


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config; explicit flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    pipeline = argparse.ArgumentParser(add_help=False)
    pipeline.add_argument("--scenes", help="scene JSONL file")
    pipeline.add_argument("--checkpoint", help="checkpoint file")
    pipeline.add_argument("--sweeps", type=int, help="radar sweeps accumulated at inference (0-13)")
    pipeline.add_argument("--alpha", type=float, help="weight of the Stage-3 peak in the fused score")
    pipeline.add_argument("--velocity-mode", choices=[m.value for m in VelocityMode])
    pipeline.add_argument("--bin-size-table", help="YAML/JSON mapping category -> pixel size (0.1 or 0.2)")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--epochs", type=int)
    training.add_argument("--lr", type=float)
    training.add_argument("--halve-at", type=int, help="epoch from which the learning rate is halved")
    training.add_argument("--batch-size", type=int)
    training.add_argument("--hidden", help="comma-separated hidden widths")

    p = argparse.ArgumentParser(prog="ric-fusion", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write simulated scenes as JSONL")
    s.add_argument("--frames", type=int, help="number of frames")
    s.add_argument("--objects", type=int, help="objects per frame")

    sub.add_parser("train-ric", parents=[common, pipeline, training],
                   help="train the hit-distribution network (resumes from --checkpoint)")
    sub.add_parser("train-fusion", parents=[common, pipeline, training],
                   help="train the range selector on top of a Stage-1 checkpoint")

    for name, helptext in (("eval", "evaluate a checkpoint on scenes"), ("ablate", "run an ablation grid")):
        e = sub.add_parser(name, parents=[common, pipeline], help=helptext)
        e.add_argument("--ablate", required=name == "ablate", metavar="KIND=V1,V2,...",
                       help=f"kind is one of {', '.join(evalkit.ABLATION_KINDS)}")
        if name == "eval":
            e.add_argument("--plots", type=int, help="number of profile plots to write")
            e.add_argument("--distributions", action="store_true", default=None,
                           help="also compare hit-distribution models on GT boxes")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg.command = args.command
    for name in ("seed", "out", "scenes", "checkpoint", "sweeps", "alpha", "velocity_mode", "ablate", "plots",
                 "distributions"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "bin_size_table", None):
        cfg.bin_size_table = args.bin_size_table
    if cfg.bin_size_table:
        cfg.bin_table = load_bin_table(cfg.bin_size_table)
    if args.command == "simulate":
        if args.frames is not None:
            cfg.scene["num_frames"] = args.frames
        if args.objects is not None:
            cfg.scene["objects_per_frame"] = args.objects
    if args.command in ("train-ric", "train-fusion"):
        key = "train_ric" if args.command == "train-ric" else "train_fusion"
        sched: TrainSchedule = getattr(cfg, key)
        for name in ("epochs", "lr", "halve_at", "batch_size"):
            v = getattr(args, name)
            if v is not None:
                setattr(sched, name, v)
        if args.hidden:
            try:
                widths = [int(w) for w in args.hidden.split(",")]
            except ValueError:
                raise ConfigError(f"--hidden expects comma-separated integers, got {args.hidden!r}") from None
            setattr(cfg, "ric_hidden" if key == "train_ric" else "fusion_hidden", widths)
    try:
        return cfg.validate()
    except TypeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None


def parse_ablation(spec: str) -> tuple[str, list]:
    kind, sep, vals = spec.partition("=")
    kind = kind.strip()
    if not sep or not vals.strip():
        raise ConfigError(f"--ablate expects KIND=V1,V2,..., got {spec!r}")
    if kind not in evalkit.ABLATION_KINDS:
        raise ConfigError(f"unknown ablation kind {kind!r}; expected one of {list(evalkit.ABLATION_KINDS)}")
    raw = [v.strip() for v in vals.split(",") if v.strip()]
    try:
        if kind == "sweeps":
            values = [int(v) for v in raw]
        elif kind == "velocity_mode":
            values = [VelocityMode(v).value for v in raw]
        else:
            values = [float(v) for v in raw]
    except ValueError as exc:
        raise ConfigError(f"bad --ablate value: {exc}") from None
    return kind, values


# ---------------------------------------------------------------------------
# Data and checkpoints


def load_frames(cfg: RunConfig) -> list[radar_sim.Frame]:
    if not cfg.scenes:
        raise DataError("--scenes is required")
    path = Path(cfg.scenes)
    if not path.is_file():
        raise DataError(f"scene file {path} not found")
    try:
        frames = radar_sim.read_scenes(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if not frames:
        raise DataError(f"scene file {path} holds no frames")
    return frames


def open_checkpoint(path: str | None, tag: str):
    if not path:
        raise DataError("--checkpoint is required")
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} not found")
    try:
        return nn.load_checkpoint(path, tag)
    except KeyError as exc:
        raise DataError(str(exc.args[0])) from None
    except (ValueError, OSError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None


def has_section(path: str, tag: str) -> bool:
    try:
        open_checkpoint(path, tag)
    except DataError:
        return False
    return True


def load_models(cfg: RunConfig) -> tuple[RicModel, Stage3Model]:
    net, _, meta = open_checkpoint(cfg.checkpoint, RIC_TAG)
    ric = RicModel(net=net, bin_table=meta["bin_table"])
    s3net, _, _ = open_checkpoint(cfg.checkpoint, FUSION_TAG)
    return ric, Stage3Model(net=s3net)


def write_rows(path: Path, rows: list[dict]) -> None:
    evalkit.write_csv(path, rows)
    log.info("wrote %s", path)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(cfg: RunConfig) -> Path:
    scene = cfg.scene_config()
    out = Path(cfg.out)
    path = out / "scenes.jsonl"
    try:
        out.mkdir(parents=True, exist_ok=True)
        radar_sim.write_scenes(path, radar_sim.sample_frames(scene))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None
    log.info("wrote %d frames to %s", scene.num_frames, path)
    return path


def ric_samples(frames: list[radar_sim.Frame], bin_table: dict) -> list[GtSample]:
    samples = []
    for f in frames:
        for b in f.gt:
            try:
                samples.append(GtSample.from_grid(b, build_gt_distribution(f.sweeps, b, bin_table=bin_table)))
            except EmptyAccumulation:
                continue
    return samples


def cmd_train_ric(cfg: RunConfig) -> Path:
    frames = load_frames(cfg)
    sched = cfg.train_ric
    start = 0
    if cfg.checkpoint:
        net, opt, meta = open_checkpoint(cfg.checkpoint, RIC_TAG)
        model = RicModel(net=net, bin_table=meta["bin_table"])
        start = int(meta["epochs_done"])
        log.info("resuming Stage-1 training at epoch %d", start)
    else:
        model = RicModel(hidden=tuple(cfg.ric_hidden), bin_table=cfg.bin_table, seed=cfg.seed)
        opt = None
    samples = ric_samples(frames, model.bin_table)
    if not samples:
        raise DataError("no ground-truth object with radar hits in the scenes")
    log.info("%d training maps, %d parameters", len(samples), model.net.num_params())
    opt, history = train_ric(model, samples, sched.epochs, sched.lr, sched.halve_at, sched.batch_size,
                             seed=cfg.seed, opt=opt, start_epoch=start)
    out = Path(cfg.out)
    path = out / "ric.npz"
    meta = {"bin_table": model.bin_table, "epochs_done": start + sched.epochs, "schedule": asdict(sched),
            "seed": cfg.seed, "samples": len(samples)}
    nn.save_checkpoint(path, {RIC_TAG: (model.net, opt, meta)})
    write_rows(out / "ric_loss.csv", history)
    return path


def cmd_train_fusion(cfg: RunConfig) -> Path:
    frames = load_frames(cfg)
    sched = cfg.train_fusion
    net, ric_opt, ric_meta = open_checkpoint(cfg.checkpoint, RIC_TAG)
    ric = RicModel(net=net, bin_table=ric_meta["bin_table"])
    start = 0
    if has_section(cfg.checkpoint, FUSION_TAG):
        s3net, opt, meta = open_checkpoint(cfg.checkpoint, FUSION_TAG)
        stage3 = Stage3Model(net=s3net)
        start = int(meta["epochs_done"])
        log.info("resuming Stage-3 training at epoch %d", start)
    else:
        stage3 = Stage3Model(hidden=tuple(cfg.fusion_hidden), seed=cfg.seed)
        opt = None
    settings = pipeline_settings(cfg, ric)
    inputs, labels = evalkit.stage3_dataset(frames, ric, settings)
    if not inputs:
        raise DataError("no associated detection with a non-zero matching profile in the scenes")
    log.info("%d Stage-3 samples", len(inputs))
    opt, history = train_stage3(stage3, inputs, labels, sched.epochs, sched.lr, sched.halve_at, sched.batch_size,
                                seed=cfg.seed, opt=opt, start_epoch=start)
    out = Path(cfg.out)
    path = out / "fusion.npz"
    meta = {"epochs_done": start + sched.epochs, "schedule": asdict(sched), "seed": cfg.seed,
            "samples": len(inputs), "settings": asdict(settings)}
    nn.save_checkpoint(path, {RIC_TAG: (ric.net, ric_opt, ric_meta), FUSION_TAG: (stage3.net, opt, meta)})
    write_rows(out / "fusion_loss.csv", history)
    return path


def pipeline_settings(cfg: RunConfig, ric: RicModel) -> evalkit.PipelineSettings:
    # An explicit table wins; otherwise use the one the Stage-1 model was trained with.
    table = cfg.bin_table if cfg.bin_size_table else ric.bin_table
    return evalkit.PipelineSettings(cfg.sweeps, cfg.velocity_mode, cfg.alpha, bin_table=dict(table))


def detection_rows(results: list[evalkit.DetectionResult]) -> list[dict]:
    keys = ("frame_id", "index", "category", "range_gt", "range_mono", "range_stage2", "range_stage3",
            "score_mono", "score_fused", "source", "label")
    return [{k: getattr(r, k) for k in keys} for r in results]


def write_plots(out: Path, results: list[evalkit.DetectionResult], count: int, bin_table: dict) -> list[Path]:
    from .plots import profile_plot

    picked = [r for r in results if r.range_gt is not None][:count]
    paths = []
    for r in picked:
        pixel = bin_table[r.category]
        name = f"profile_f{r.frame_id:04d}_d{r.index:02d}_{r.category}.svg"
        paths.append(profile_plot(out / "plots" / name, r.profile, pixel, r.range_mono, r.range_gt,
                                  r.stage3_scores, f"frame {r.frame_id} / {r.category} #{r.index}"))
    return paths


def cmd_eval(cfg: RunConfig) -> Path:
    frames = load_frames(cfg)
    ric, stage3 = load_models(cfg)
    settings = pipeline_settings(cfg, ric)
    out = Path(cfg.out)
    if cfg.ablate:
        return run_ablation_cmd(cfg, frames, ric, stage3, settings)
    report, results = evalkit.evaluate(frames, ric, stage3, settings, with_distributions=cfg.distributions)
    write_rows(out / "report.csv", report.rows())
    write_rows(out / "detections.csv", detection_rows(results))
    evalkit.write_json(out / "report.json", asdict(report))
    if cfg.plots > 0:
        write_plots(out, results, cfg.plots, settings.bin_table)
    cm = report.range_errors.get("class_mean")
    if cm:
        print("method,mean,median,count")
        for m in evalkit.METHODS:
            print(f"{m},{cm[m]['mean']:.4f},{cm[m]['median']:.4f},{cm[m]['count']}")
    return out / "report.csv"


def run_ablation_cmd(cfg, frames, ric, stage3, settings) -> Path:
    kind, values = parse_ablation(cfg.ablate)
    rows = evalkit.run_ablation(kind, values, frames, ric, stage3, settings)
    path = Path(cfg.out) / f"ablation_{kind}.csv"
    write_rows(path, rows)
    evalkit.write_json(path.with_suffix(".json"), rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["value", "monocular_mean", "stage2_mean", "stage3_mean"])
    for r in rows:
        w.writerow([r["value"]] + [f"{r[m + '_mean']:.4f}" for m in evalkit.METHODS])
    return path


COMMANDS = {
    "simulate": cmd_simulate,
    "train-ric": cmd_train_ric,
    "train-fusion": cmd_train_fusion,
    "eval": cmd_eval,
    "ablate": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / f"{cfg.command}.config.yaml")
        COMMANDS[cfg.command](cfg)
    except (ConfigError, DataError) as exc:
        print(f"ric-fusion {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"ric-fusion {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except nn.NumericalError as exc:
        print(f"ric-fusion {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
