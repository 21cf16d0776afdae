"""Parametric BEV scene and radar simulator with known ground truth.

Each object emits hits from a mixture of its sensor-facing edges and a
centre-weighted interior blob; hits are then blurred along the ray and, in
proportion to range, across it. The ego sensor sits still at the origin, so the
radial speed of a hit is the object velocity projected on the hit's ray.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fusion import DetectionRecord, associate_gt
from .geometry import from_object_frame, relative_yaw
from .objects import CATEGORIES, ObjectBox, RadarSweep, wrap_angle
from .ric_model import facing_edges

SCENE_SCHEMA = "ric-fusion-scene/1"

# (length, width, height) means and the bottom height, roughly nuScenes-like.
CATEGORY_SIZES = {
    "car": ((4.6, 1.95, 1.7), 0.0),
    "truck": ((6.9, 2.5, 2.8), 0.0),
    "bus": ((11.0, 2.9, 3.5), 0.0),
    "trailer": ((12.0, 2.9, 3.9), 0.3),
    "construction_vehicle": ((6.5, 2.8, 3.2), 0.0),
    "pedestrian": ((0.7, 0.7, 1.75), 0.0),
    "motorcycle": ((2.1, 0.8, 1.5), 0.0),
    "bicycle": ((1.7, 0.6, 1.3), 0.0),
    "traffic_cone": ((0.4, 0.4, 1.0), 0.0),
    "barrier": ((0.5, 2.5, 1.0), 0.0),
}
CATEGORY_MAX_SPEED = {"pedestrian": 2.0, "bicycle": 6.0, "traffic_cone": 0.0, "barrier": 0.0}
DEFAULT_MIX = {
    "car": 0.45, "truck": 0.08, "bus": 0.04, "trailer": 0.03, "construction_vehicle": 0.03,
    "pedestrian": 0.12, "motorcycle": 0.05, "bicycle": 0.05, "traffic_cone": 0.07, "barrier": 0.08,
}


class PlacementError(RuntimeError):
    pass


@dataclass
class MonoNoise:
    range_bias: float = 0.0
    range_sigma: float = 1.0
    tangential_sigma: float = 0.1
    yaw_sigma: float = 0.05
    size_sigma: float = 0.05
    velocity_sigma: float = 0.3
    score_base: float = 0.9
    score_range_slope: float = 0.008
    score_sigma: float = 0.05


@dataclass
class RadarModel:
    hits_per_sweep: float = 6.0
    hits_ref_range: float = 15.0
    edge_weight: float = 0.3
    interior_sigma: float = 1.0 / 6.0
    range_sigma: float = 0.15
    angular_sigma: float = 0.0175
    doppler_sigma: float = 0.1
    clutter_per_sweep: float = 20.0

    def expected_hits(self, r):
        """Mean hits per object per sweep; flat up to the reference range, then ~1/r."""
        return self.hits_per_sweep * np.minimum(1.0, self.hits_ref_range / np.maximum(r, 1e-9))


@dataclass
class SceneConfig:
    seed: int = 0
    num_frames: int = 1
    objects_per_frame: int = 10
    category_mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    range_min: float = 5.0
    range_max: float = 50.0
    speed_min: float = 0.0
    speed_max: float = 10.0
    size_jitter: float = 0.08
    mono: MonoNoise = field(default_factory=MonoNoise)
    radar: RadarModel = field(default_factory=RadarModel)
    sweep_period: float = 0.077
    sweeps_past: int = 6
    sweeps_future: int = 6
    max_retries: int = 1000

    def __post_init__(self):
        if isinstance(self.mono, dict):
            self.mono = MonoNoise(**self.mono)
        if isinstance(self.radar, dict):
            self.radar = RadarModel(**self.radar)
        self.validate()

    def validate(self) -> None:
        sigmas = [self.mono.range_sigma, self.mono.tangential_sigma, self.mono.yaw_sigma, self.mono.size_sigma,
                  self.mono.velocity_sigma, self.mono.score_sigma, self.radar.range_sigma,
                  self.radar.angular_sigma, self.radar.doppler_sigma, self.radar.interior_sigma]
        if any(s < 0 for s in sigmas):
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 <= self.radar.edge_weight <= 1.0:
            raise ValueError("edge_weight must lie in [0, 1]")
        if not 0 < self.range_min < self.range_max:
            raise ValueError("need 0 < range_min < range_max")
        if self.speed_min < 0 or self.speed_max < self.speed_min:
            raise ValueError("need 0 <= speed_min <= speed_max")
        if self.num_frames < 0 or self.objects_per_frame < 0:
            raise ValueError("frame and object counts must be non-negative")
        if self.sweep_period <= 0 or self.sweeps_past < 0 or self.sweeps_future < 0:
            raise ValueError("invalid sweep timing")
        unknown = set(self.category_mix) - set(CATEGORIES)
        if unknown:
            raise ValueError(f"unknown categories in mix: {sorted(unknown)}")
        if not self.category_mix or sum(self.category_mix.values()) <= 0:
            raise ValueError("category mix must have positive total weight")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class Frame:
    frame_id: int
    seed: int
    timestamp: float
    gt: list[ObjectBox]
    monocular: list[ObjectBox]
    sweeps: list[RadarSweep]

    def to_dict(self) -> dict:
        return {
            "schema": SCENE_SCHEMA,
            "frame_id": self.frame_id,
            "seed": self.seed,
            "timestamp": self.timestamp,
            "gt": [b.to_dict() for b in self.gt],
            "monocular": [b.to_dict() for b in self.monocular],
            "sweeps": [s.to_dict() for s in self.sweeps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Frame":
        if d.get("schema") != SCENE_SCHEMA:
            raise ValueError(f"unsupported scene schema {d.get('schema')!r}")
        return cls(d["frame_id"], d["seed"], d["timestamp"],
                   [ObjectBox.from_dict(b) for b in d["gt"]],
                   [ObjectBox.from_dict(b) for b in d["monocular"]],
                   [RadarSweep.from_dict(s) for s in d["sweeps"]])


# ---------------------------------------------------------------------------
# Objects


def _sample_objects(cfg: SceneConfig, rng: np.random.Generator) -> list[ObjectBox]:
    # Canonical order, so a mix read back from a key-sorted file draws the same objects.
    cats = [c for c in CATEGORIES if c in cfg.category_mix]
    weights = np.array([cfg.category_mix[c] for c in cats], dtype=float)
    weights /= weights.sum()
    boxes: list[ObjectBox] = []
    radii: list[float] = []
    for _ in range(cfg.objects_per_frame):
        for _attempt in range(cfg.max_retries):
            cat = cats[rng.choice(len(cats), p=weights)]
            (l, w, h), z = CATEGORY_SIZES[cat]
            jit = np.exp(rng.normal(0.0, cfg.size_jitter, 3))
            l, w, h = l * jit[0], w * jit[1], h * jit[2]
            r = rng.uniform(cfg.range_min, cfg.range_max)
            az = rng.uniform(-math.pi, math.pi)
            yaw = wrap_angle(rng.uniform(-math.pi, math.pi))
            center = np.array([r * math.cos(az), r * math.sin(az)])
            rad = 0.5 * math.hypot(l, w) + 0.5
            if all(np.hypot(*(center - np.array(b.center))) > rad + rb for b, rb in zip(boxes, radii)):
                break
        else:
            raise PlacementError(f"could not place object {len(boxes)} after {cfg.max_retries} retries")
        vmax = min(cfg.speed_max, CATEGORY_MAX_SPEED.get(cat, cfg.speed_max))
        vmin = min(cfg.speed_min, vmax)
        speed = rng.uniform(vmin, vmax)
        vel = (speed * math.cos(yaw), speed * math.sin(yaw))
        boxes.append(ObjectBox(cat, tuple(center), l, w, h, yaw, z, vel, 1.0))
        radii.append(rad)
    return boxes


def _monocular(gt: ObjectBox, noise: MonoNoise, rng: np.random.Generator) -> ObjectBox:
    ray = gt.ray
    normal = np.array([-ray[1], ray[0]])
    r = gt.range
    dr = noise.range_bias + rng.normal(0.0, noise.range_sigma)
    dt = rng.normal(0.0, noise.tangential_sigma)
    r_new = max(r + dr, 0.5)
    center = ray * r_new + normal * dt
    scale = np.exp(rng.normal(0.0, noise.size_sigma, 3))
    vel = np.asarray(gt.velocity) + rng.normal(0.0, noise.velocity_sigma, 2)
    score = noise.score_base - noise.score_range_slope * r + rng.normal(0.0, noise.score_sigma)
    return ObjectBox(gt.category, tuple(center), gt.length * scale[0], gt.width * scale[1], gt.height * scale[2],
                     wrap_angle(gt.yaw + rng.normal(0.0, noise.yaw_sigma)), gt.bottom_z, tuple(vel),
                     float(np.clip(score, 0.05, 1.0)))


# ---------------------------------------------------------------------------
# Radar


def _edge_points(box: ObjectBox, edges: list[str], n: int, rng: np.random.Generator) -> np.ndarray:
    hl, hw = box.length / 2, box.width / 2
    lengths = np.array([box.width if e in ("front", "rear") else box.length for e in edges])
    pick = rng.choice(len(edges), size=n, p=lengths / lengths.sum())
    u = rng.uniform(-1.0, 1.0, n)
    out = np.empty((n, 2))
    for k, e in enumerate(edges):
        m = pick == k
        if e == "front":
            out[m] = np.stack([np.full(m.sum(), hl), u[m] * hw], axis=1)
        elif e == "rear":
            out[m] = np.stack([np.full(m.sum(), -hl), u[m] * hw], axis=1)
        elif e == "left":
            out[m] = np.stack([u[m] * hl, np.full(m.sum(), hw)], axis=1)
        else:
            out[m] = np.stack([u[m] * hl, np.full(m.sum(), -hw)], axis=1)
    return out


def _interior_points(box: ObjectBox, n: int, frac: float, rng: np.random.Generator) -> np.ndarray:
    hl, hw = box.length / 2, box.width / 2
    if frac == 0:
        return np.zeros((n, 2))
    out = np.empty((0, 2))
    while len(out) < n:
        cand = rng.normal(0.0, 1.0, (2 * (n - len(out)) + 4, 2)) * np.array([box.length * frac, box.width * frac])
        cand = cand[(np.abs(cand[:, 0]) <= hl) & (np.abs(cand[:, 1]) <= hw)]
        out = np.concatenate([out, cand])
    return out[:n]


def emit_hits(box: ObjectBox, radar: RadarModel, rng: np.random.Generator) -> np.ndarray:
    """Emission points in the box frame (before sensor blur)."""
    n = int(rng.poisson(radar.expected_hits(box.range)))
    if n == 0:
        return np.zeros((0, 2))
    n_edge = int(rng.binomial(n, radar.edge_weight))
    edges = facing_edges(relative_yaw(box))
    parts = []
    if n_edge:
        parts.append(_edge_points(box, edges, n_edge, rng))
    if n - n_edge:
        parts.append(_interior_points(box, n - n_edge, radar.interior_sigma, rng))
    body = np.concatenate(parts)
    return body[rng.permutation(n)]


BLUR_CLIP = 5.0


def _clipped_normal(rng: np.random.Generator, n: int, clip: float = BLUR_CLIP) -> np.ndarray:
    """Standard normal draws with |z| < clip (rare tail draws are redrawn)."""
    z = rng.normal(0.0, 1.0, n)
    bad = np.abs(z) >= clip
    while bad.any():
        z[bad] = rng.normal(0.0, 1.0, int(bad.sum()))
        bad = np.abs(z) >= clip
    return z


def _blur(points: np.ndarray, radar: RadarModel, rng: np.random.Generator) -> np.ndarray:
    r = np.hypot(points[:, 0], points[:, 1])
    ray = points / np.maximum(r, 1e-9)[:, None]
    normal = np.stack([-ray[:, 1], ray[:, 0]], axis=1)
    dr = _clipped_normal(rng, len(points)) * radar.range_sigma
    dt = _clipped_normal(rng, len(points)) * radar.angular_sigma * r
    return points + ray * dr[:, None] + normal * dt[:, None]


def simulate_sweep(gt: list[ObjectBox], cfg: SceneConfig, dt: float, timestamp: float,
                   rng: np.random.Generator) -> RadarSweep:
    radar = cfg.radar
    pos, vr, oid, body = [], [], [], []
    for k, box in enumerate(gt):
        v = np.asarray(box.velocity)
        at_t = box.moved(center=tuple(np.asarray(box.center) - v * dt))
        b = emit_hits(at_t, radar, rng)
        if not len(b):
            continue
        p = from_object_frame(b, at_t)
        ray = p / np.maximum(np.hypot(p[:, 0], p[:, 1]), 1e-9)[:, None]
        pos.append(_blur(p, radar, rng))
        vr.append(ray @ v + rng.normal(0.0, radar.doppler_sigma, len(p)))
        oid.append(np.full(len(p), k))
        body.append(b)
    n_clutter = int(rng.poisson(radar.clutter_per_sweep))
    if n_clutter:
        rr = (cfg.range_max + 10.0) * np.sqrt(rng.uniform(0.0, 1.0, n_clutter))
        aa = rng.uniform(-math.pi, math.pi, n_clutter)
        pos.append(np.stack([rr * np.cos(aa), rr * np.sin(aa)], axis=1))
        vr.append(rng.normal(0.0, radar.doppler_sigma, n_clutter))
        oid.append(np.full(n_clutter, -1))
        body.append(np.zeros((n_clutter, 2)))
    if not pos:
        return RadarSweep(timestamp, dt, np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=int), np.zeros((0, 2)))
    return RadarSweep(timestamp, dt, np.concatenate(pos), np.concatenate(vr), np.concatenate(oid),
                      np.concatenate(body))


def sample_frame(cfg: SceneConfig, frame_id: int = 0) -> Frame:
    """Deterministic in ``(cfg.seed, frame_id)``; each sweep draws from its own sub-seed."""
    rng = np.random.default_rng([cfg.seed, frame_id])
    gt = _sample_objects(cfg, rng)
    mono = [_monocular(b, cfg.mono, rng) for b in gt]
    timestamp = float(frame_id)
    sweeps = []
    for k in range(cfg.sweeps_future, -cfg.sweeps_past - 1, -1):
        dt = -k * cfg.sweep_period
        srng = np.random.default_rng([cfg.seed, frame_id, k + cfg.sweeps_past + 1000])
        sweeps.append(simulate_sweep(gt, cfg, dt, timestamp - dt, srng))
    sweeps.sort(key=lambda s: s.timestamp)
    return Frame(frame_id, cfg.seed, timestamp, gt, mono, sweeps)


def sample_scene(cfg: SceneConfig) -> Frame:
    return sample_frame(cfg, 0)


def sample_frames(cfg: SceneConfig, start: int = 0) -> list[Frame]:
    return [sample_frame(cfg, start + i) for i in range(cfg.num_frames)]


# ---------------------------------------------------------------------------
# Scene files


def write_scenes(path, frames: list[Frame]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for f in frames:
            fh.write(json.dumps(f.to_dict(), sort_keys=True) + "\n")


def read_scenes(path) -> list[Frame]:
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                frames.append(Frame.from_dict(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed scene record ({exc})") from exc
    return frames


# ---------------------------------------------------------------------------
# Oracle metric


def oracle_range_error(frame: Frame, records: list[DetectionRecord]) -> dict:
    """Per-category mean/median |fused range - GT range| over associated pairs."""
    pairs = associate_gt([r.box for r in records], frame.gt)
    errs: dict[str, list[float]] = {}
    for di, gi, _ in pairs:
        errs.setdefault(records[di].box.category, []).append(abs(records[di].range_fused - frame.gt[gi].range))
    out = {c: {"mean": float(np.mean(e)), "median": float(np.median(e)), "count": len(e)} for c, e in errs.items()}
    out["unmatched"] = len(records) - len(pairs)
    return out
