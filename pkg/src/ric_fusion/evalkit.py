"""Desk-scale evaluation: distribution-model comparison, range refinement and ablations."""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .fusion import DEFAULT_ALPHA, Stage3Input, Stage3Model, associate_gt, monocular_record, refine
from .geometry import BevGrid, in_footprint, to_object_frame
from .matcher import DEFAULT_SWEEPS, MatchProfile, VelocityMode, accumulate_sweeps, argmax_offset, parse_mode, stage2_profile
from .objects import CATEGORIES, STAGE3_BIN, ObjectBox, bin_size, default_bin_table
from .radar_sim import Frame
from .ric_model import RicModel, baseline_lshape, baseline_uniform

log = logging.getLogger(__name__)

METHODS = ("monocular", "stage2", "stage3")
ABLATION_KINDS = ("sweeps", "alpha", "velocity_mode", "heading_error", "size_error")


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("RIC_FUSION_THREADS", "1")))
    except ValueError:
        return 1


def _map_frames(fn, frames):
    """Apply ``fn`` per frame, results in frame order."""
    n = max_workers()
    if n == 1 or len(frames) < 2:
        return [fn(f) for f in frames]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, frames))


@dataclass
class PipelineSettings:
    n_sweeps: int = DEFAULT_SWEEPS
    velocity_mode: str = VelocityMode.DOPPLER_TAN.value
    alpha: float = DEFAULT_ALPHA
    heading_error: float = 0.0
    size_error: float = 0.0
    bin_table: dict = field(default_factory=default_bin_table)

    def __post_init__(self):
        parse_mode(self.velocity_mode)


def kernel_box(box: ObjectBox, settings: PipelineSettings) -> ObjectBox:
    """The box used to condition the hit kernel, with any injected heading/size error."""
    if settings.heading_error == 0.0 and settings.size_error == 0.0:
        return box
    s = 1.0 + settings.size_error
    return box.moved(yaw=box.yaw + settings.heading_error, length=box.length * s, width=box.width * s)


# ---------------------------------------------------------------------------
# Distribution models


def kernel_models(ric: RicModel | None, bin_table=None) -> dict[str, Callable[[list[ObjectBox]], list[BevGrid]]]:
    models = {
        "lshape": lambda boxes: [baseline_lshape(b, bin_table=bin_table) for b in boxes],
        "uniform": lambda boxes: [baseline_uniform(b, bin_table) for b in boxes],
    }
    if ric is not None:
        def learned(boxes):
            maps = ric.predict_maps(boxes)
            return [BevGrid(m, bin_size(b.category, ric.bin_table), b.center) for m, b in zip(maps, boxes)]
        models["learned"] = learned
    return models


def has_in_box_hits(points: np.ndarray, box: ObjectBox) -> bool:
    local = to_object_frame(points, box)
    return bool(in_footprint(local, box.length, box.width).any())


def eval_distributions(frames: list[Frame], models: dict, settings: PipelineSettings | None = None) -> dict:
    """Range MAE and mean matching score per kernel model, with kernels and
    measurement maps conditioned on ground-truth boxes.

    Objects without any compensated hit inside their footprint are skipped for
    every model alike.
    """
    if not frames:
        raise ValueError("empty frame set")
    settings = settings or PipelineSettings()

    def per_frame(frame: Frame):
        sweeps = [s for s in frame.sweeps if s.dt >= 0]
        boxes, clouds = [], []
        for gt in frame.gt:
            b_p = bin_size(gt.category, settings.bin_table)
            pts = accumulate_sweeps(sweeps, gt, settings.velocity_mode, b_p, settings.n_sweeps)
            if has_in_box_hits(pts, gt):
                boxes.append(gt)
                clouds.append(pts)
        rows = []
        if not boxes:
            return rows
        kernels = {name: fn(boxes) for name, fn in models.items()}
        for k, (gt, pts) in enumerate(zip(boxes, clouds)):
            row = {"category": gt.category}
            for name in models:
                prof = stage2_profile(kernels[name][k], pts, gt)
                row[f"{name}_err"] = abs(argmax_offset(prof.scores) * prof.pixel)
                row[f"{name}_peak"] = float(prof.scores.max())
                row[f"{name}_at_gt"] = prof.score_at(0)
            rows.append(row)
        return rows

    rows = [r for fr in _map_frames(per_frame, frames) for r in fr]
    if not rows:
        raise ValueError("no object with radar hits in the frame set")
    out = {"count": len(rows), "models": {}}
    for name in models:
        err = np.array([r[f"{name}_err"] for r in rows])
        peak = np.array([r[f"{name}_peak"] for r in rows])
        at_gt = np.array([r[f"{name}_at_gt"] for r in rows])
        out["models"][name] = {"mae": float(err.mean()), "mms": float(at_gt.mean()), "peak": float(peak.mean())}
    return out


# ---------------------------------------------------------------------------
# Full pipeline


@dataclass
class DetectionResult:
    frame_id: int
    index: int
    category: str
    range_gt: float | None
    range_mono: float
    range_stage2: float
    range_stage3: float
    score_mono: float
    score_fused: float
    source: str
    profile: np.ndarray = field(repr=False, default=None)
    stage3_scores: np.ndarray = field(repr=False, default=None)
    label: int | None = None


def stage2_profiles(frame: Frame, ric: RicModel, settings: PipelineSettings) -> list[MatchProfile]:
    """Stage-2 profile for every monocular detection in the frame."""
    if not frame.monocular:
        return []
    sweeps = [s for s in frame.sweeps if s.dt >= 0]
    kboxes = [kernel_box(b, settings) for b in frame.monocular]
    maps = ric.predict_maps(kboxes)
    out = []
    for det, kb, m in zip(frame.monocular, kboxes, maps):
        b_p = bin_size(det.category, settings.bin_table)
        pts = accumulate_sweeps(sweeps, det, settings.velocity_mode, b_p, settings.n_sweeps)
        out.append(stage2_profile(BevGrid(m, b_p, kb.center), pts, det))
    return out


def run_frame(frame: Frame, ric: RicModel, stage3: Stage3Model | None, settings: PipelineSettings) -> list[DetectionResult]:
    profiles = stage2_profiles(frame, ric, settings)
    labels = {di: (gi, lab) for di, gi, lab in associate_gt(frame.monocular, frame.gt, STAGE3_BIN)}
    results = []
    usable = [k for k, p in enumerate(profiles) if p.scores.max() > 0]
    s3 = {}
    if stage3 is not None and usable:
        scores = stage3.predict([Stage3Input.from_detection(frame.monocular[k], profiles[k]) for k in usable])
        s3 = dict(zip(usable, scores))
    for k, (det, prof) in enumerate(zip(frame.monocular, profiles)):
        r2 = det.range + argmax_offset(prof.scores) * prof.pixel
        rec = refine(det, s3[k], settings.alpha, prof.scores) if k in s3 else monocular_record(det, prof.scores)
        gi, lab = labels.get(k, (None, None))
        results.append(DetectionResult(
            frame.frame_id, k, det.category, None if gi is None else frame.gt[gi].range, det.range, r2,
            rec.range_fused, det.score, rec.score_fused, rec.source, prof.scores, rec.stage3_scores, lab))
    return results


def run_pipeline(frames: list[Frame], ric: RicModel, stage3: Stage3Model | None,
                 settings: PipelineSettings | None = None) -> list[DetectionResult]:
    settings = settings or PipelineSettings()
    return [r for fr in _map_frames(lambda f: run_frame(f, ric, stage3, settings), frames) for r in fr]


def stage3_dataset(frames: list[Frame], ric: RicModel, settings: PipelineSettings | None = None
                   ) -> tuple[list[Stage3Input], np.ndarray]:
    """Training pairs from associated detections with non-zero Stage-2 profiles."""
    settings = settings or PipelineSettings()

    def per_frame(frame):
        profiles = stage2_profiles(frame, ric, settings)
        out = []
        for di, _gi, lab in associate_gt(frame.monocular, frame.gt, STAGE3_BIN):
            if profiles[di].scores.max() > 0:
                out.append((Stage3Input.from_detection(frame.monocular[di], profiles[di]), lab))
        return out

    pairs = [p for fr in _map_frames(per_frame, frames) for p in fr]
    return [p[0] for p in pairs], np.array([p[1] for p in pairs], dtype=int)


@dataclass
class EvalReport:
    range_errors: dict
    mms: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for cat, per in self.range_errors.items():
            for method, v in per.items():
                out.append({"category": cat, "method": method, "mean": v["mean"], "median": v["median"],
                            "count": v["count"]})
        return out


def summarize(results: list[DetectionResult], categories=None) -> dict:
    """Per-category (and class-mean) mean/median absolute range error for each method."""
    matched = [r for r in results if r.range_gt is not None]
    cats = categories or [c for c in CATEGORIES if any(r.category == c for r in matched)]
    out = {}
    for cat in cats:
        rs = [r for r in matched if r.category == cat]
        if not rs:
            continue
        gt = np.array([r.range_gt for r in rs])
        per = {}
        for method, attr in zip(METHODS, ("range_mono", "range_stage2", "range_stage3")):
            e = np.abs(np.array([getattr(r, attr) for r in rs]) - gt)
            per[method] = {"mean": float(e.mean()), "median": float(np.median(e)), "count": len(rs)}
        out[cat] = per
    if out:
        out["class_mean"] = {
            m: {"mean": float(np.mean([out[c][m]["mean"] for c in out])),
                "median": float(np.mean([out[c][m]["median"] for c in out])),
                "count": int(sum(out[c][m]["count"] for c in out))}
            for m in METHODS}
    return out


def evaluate(frames: list[Frame], ric: RicModel, stage3: Stage3Model | None, settings: PipelineSettings | None = None,
             with_distributions: bool = False) -> tuple[EvalReport, list[DetectionResult]]:
    if not frames:
        raise ValueError("empty frame set")
    settings = settings or PipelineSettings()
    results = run_pipeline(frames, ric, stage3, settings)
    report = EvalReport(summarize(results), config=asdict(settings))
    report.counts = {
        "frames": len(frames),
        "detections": len(results),
        "matched": sum(r.range_gt is not None for r in results),
        "fused": sum(r.source == "fused" for r in results),
    }
    if with_distributions:
        d = eval_distributions(frames, kernel_models(ric, settings.bin_table), settings)
        report.mms = d["models"]
        report.counts["distribution_objects"] = d["count"]
    return report, results


# ---------------------------------------------------------------------------
# Ablations


def _settings_for(kind: str, value, base: PipelineSettings) -> PipelineSettings:
    if kind == "sweeps":
        return replace(base, n_sweeps=int(value))
    if kind == "alpha":
        return replace(base, alpha=float(value))
    if kind == "velocity_mode":
        return replace(base, velocity_mode=parse_mode(value).value)
    if kind == "heading_error":
        return replace(base, heading_error=float(value))
    if kind == "size_error":
        return replace(base, size_error=float(value))
    raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")


def run_ablation(kind: str, values, frames: list[Frame], ric: RicModel, stage3: Stage3Model | None,
                 base: PipelineSettings | None = None, category: str | None = None) -> list[dict]:
    """One row per value: MAE/median per method (all matched detections or one category)."""
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")
    base = base or PipelineSettings()
    rows = []
    for v in values:
        settings = _settings_for(kind, v, base)
        results = run_pipeline(frames, ric, stage3, settings)
        matched = [r for r in results if r.range_gt is not None and (category is None or r.category == category)]
        row = {"kind": kind, "value": v, "count": len(matched)}
        gt = np.array([r.range_gt for r in matched])
        for method, attr in zip(METHODS, ("range_mono", "range_stage2", "range_stage3")):
            e = np.abs(np.array([getattr(r, attr) for r in matched]) - gt) if matched else np.array([np.nan])
            row[f"{method}_mean"] = float(e.mean())
            row[f"{method}_median"] = float(np.median(e))
        row["mean_score"] = float(np.mean([r.score_fused for r in results])) if results else float("nan")
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Output files


def write_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
