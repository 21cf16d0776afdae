"""Stage 1: radar-hit distribution maps in the object frame.

Maps are 129 x 129 probability grids centred on the object with X along its length
and Y along its width. They come from three sources: ground truth built from
accumulated radar sweeps, the learned network, and two analytic baselines.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .geometry import Axes, BevGrid, bin_points, in_footprint, left_normal, relative_yaw, round_half_away, to_object_frame
from .objects import NUM_CATEGORIES, RIC_SIZE, ObjectBox, RadarSweep, bin_size, default_bin_table, one_hot

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
RIC_CELLS = RIC_SIZE * RIC_SIZE

INPUT_GROUPS = {
    "category": NUM_CATEGORIES,
    "size": 3,
    "range": 1,
    "bottom_z": 1,
    "azimuth": 2,
    "yaw": 2,
    "relative_yaw": 2,
}
DEFAULT_PROJ = 32
DEFAULT_HIDDEN = (256, 256, 640)


class EmptyAccumulation(ValueError):
    """No motion-compensated radar point fell inside the ground-truth footprint."""


@dataclass(frozen=True)
class RicInput:
    category_onehot: np.ndarray
    length: float
    width: float
    height: float
    range: float
    bottom_z: float
    azimuth: float
    yaw: float
    relative_yaw: float

    def __post_init__(self):
        oh = np.asarray(self.category_onehot, dtype=float)
        if oh.shape != (NUM_CATEGORIES,) or oh.sum() != 1.0 or np.count_nonzero(oh) != 1:
            raise ValueError("category_onehot must have exactly one component equal to 1")
        if not self.range > 0:
            raise ValueError("range must be positive")

    @classmethod
    def from_box(cls, box: ObjectBox) -> "RicInput":
        return cls(one_hot(box.category), box.length, box.width, box.height, box.range,
                   box.bottom_z, box.azimuth, box.yaw, relative_yaw(box))

    def features(self) -> dict[str, np.ndarray]:
        # Angles enter as (sin, cos) so the wrap at +-pi is continuous.
        return {
            "category": np.asarray(self.category_onehot, dtype=float),
            "size": np.array([self.length, self.width, self.height]) / 5.0,
            "range": np.array([self.range / 50.0]),
            "bottom_z": np.array([self.bottom_z]),
            "azimuth": np.array([math.sin(self.azimuth), math.cos(self.azimuth)]),
            "yaw": np.array([math.sin(self.yaw), math.cos(self.yaw)]),
            "relative_yaw": np.array([math.sin(self.relative_yaw), math.cos(self.relative_yaw)]),
        }


def encode(inputs: list[RicInput]) -> dict[str, np.ndarray]:
    feats = [x.features() for x in inputs]
    return {k: np.stack([f[k] for f in feats]) for k in INPUT_GROUPS}


class RicModel:
    """The Stage-1 network plus the category pixel-size table it was trained with."""

    def __init__(self, net: nn.BranchMLP | None = None, bin_table: dict[str, float] | None = None,
                 hidden=DEFAULT_HIDDEN, proj=DEFAULT_PROJ, seed: int = 0):
        self.net = net or nn.BranchMLP(INPUT_GROUPS, proj, hidden, RIC_CELLS, seed=seed)
        if self.net.out_dim != RIC_CELLS:
            raise ValueError(f"network output {self.net.out_dim} != {RIC_CELLS}")
        self.bin_table = dict(bin_table or default_bin_table())

    def logits(self, inputs: list[RicInput]) -> np.ndarray:
        z, _ = self.net.forward(encode(inputs))
        return z

    def predict_maps(self, boxes: list[ObjectBox], batch: int = 256) -> np.ndarray:
        """Probability maps, shape (len(boxes), 129, 129)."""
        out = np.empty((len(boxes), RIC_SIZE, RIC_SIZE))
        for s in range(0, len(boxes), batch):
            chunk = [RicInput.from_box(b) for b in boxes[s:s + batch]]
            out[s:s + len(chunk)] = nn.softmax(self.logits(chunk)).reshape(-1, RIC_SIZE, RIC_SIZE)
        return out

    def predict_box(self, box: ObjectBox) -> BevGrid:
        return BevGrid(self.predict_maps([box])[0], bin_size(box.category, self.bin_table), box.center)


def predict_ric(model: RicModel, inp: RicInput, pixel: float = 0.1) -> BevGrid:
    p = nn.softmax(model.logits([inp]))[0].reshape(RIC_SIZE, RIC_SIZE)
    return BevGrid(p, pixel, (0.0, 0.0), Axes.OBJECT_ALIGNED)


# ---------------------------------------------------------------------------
# Motion compensation and ground truth


def motion_offset(v_obj, v_doppler, n_t, dt: float) -> np.ndarray:
    """Displacement ``((v_obj . n_t) n_t + v_doppler) dt`` moving a hit to the reference time."""
    n_t = np.asarray(n_t, dtype=float)
    if abs(float(np.hypot(*n_t)) - 1.0) > 1e-9:
        raise ValueError("n_t must be a unit vector")
    v_obj = np.asarray(v_obj, dtype=float)
    v_doppler = np.asarray(v_doppler, dtype=float)
    return ((v_obj @ n_t) * n_t + v_doppler) * dt


def _unit_rays(positions: np.ndarray) -> np.ndarray:
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    r = np.hypot(positions[:, 0], positions[:, 1])
    return positions / np.where(r > 0, r, 1.0)[:, None]


def doppler_vectors(positions: np.ndarray, radial_speed: np.ndarray) -> np.ndarray:
    """Radial speed as a vector along each point's ego-to-point ray."""
    return _unit_rays(positions) * np.asarray(radial_speed, dtype=float)[:, None]


def tangent_normals(positions: np.ndarray, ray=None) -> np.ndarray:
    """Unit normals to each point's own ray, or to ``ray`` for every point when given."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    if ray is not None:
        return np.broadcast_to(left_normal(ray), positions.shape)
    u = _unit_rays(positions)
    return np.stack([-u[:, 1], u[:, 0]], axis=1)


def doppler_tangential_velocity(positions, radial_speed, v_obj, ray=None) -> np.ndarray:
    """Per-point velocity ``(v_obj . n_T) n_T + v_D``.

    ``n_T`` is perpendicular to each point's ray unless a shared ``ray`` is given.
    Per-point normals make the split exact: with the true velocity and noiseless
    Doppler the sum equals ``v_obj``.
    """
    n_t = tangent_normals(positions, ray)
    v_obj = np.asarray(v_obj, dtype=float)
    return (n_t @ v_obj)[:, None] * n_t + doppler_vectors(positions, radial_speed)


def compensate_doppler_tangential(sweeps: list[RadarSweep], v_obj, ray=None) -> np.ndarray:
    """Move every hit to the reference time using Doppler plus the object's tangential velocity."""
    out = [s.positions + doppler_tangential_velocity(s.positions, s.radial_speed, v_obj, ray) * s.dt for s in sweeps]
    return np.concatenate(out) if out else np.zeros((0, 2))


def gt_counts(sweeps: list[RadarSweep], gt_box: ObjectBox, gt_velocity=None,
              bin_table: dict[str, float] | None = None) -> BevGrid:
    """Per-cell counts of compensated hits inside the box footprint, object frame."""
    v = gt_box.velocity if gt_velocity is None else gt_velocity
    pts = compensate_doppler_tangential(sweeps, v)
    local = to_object_frame(pts, gt_box)
    local = local[in_footprint(local, gt_box.length, gt_box.width)]
    grid, _ = bin_points(local, (0.0, 0.0), RIC_SIZE, bin_size(gt_box.category, bin_table))
    grid.anchor = gt_box.center
    return grid


def build_gt_distribution(sweeps: list[RadarSweep], gt_box: ObjectBox, gt_velocity=None,
                          bin_table: dict[str, float] | None = None) -> BevGrid:
    counts = gt_counts(sweeps, gt_box, gt_velocity, bin_table)
    total = counts.total()
    if total == 0:
        raise EmptyAccumulation("empty accumulation: no radar hits inside the ground-truth box")
    counts.values = counts.values / total
    return counts


# ---------------------------------------------------------------------------
# Loss


def smoothness(P: np.ndarray) -> float:
    P = np.asarray(P, dtype=float)
    nr, nc = P.shape
    rows = np.abs(np.diff(P, axis=0)).sum() / (nc * (nr - 1)) if nr > 1 else 0.0
    cols = np.abs(np.diff(P, axis=1)).sum() / (nr * (nc - 1)) if nc > 1 else 0.0
    return float(rows + cols)


def smoothness_grad(P: np.ndarray) -> np.ndarray:
    """Subgradient of the smoothness term for a batch of maps (B, Nr, Nc); sign(0) = 0."""
    P = np.asarray(P, dtype=float)
    nr, nc = P.shape[-2:]
    g = np.zeros_like(P)
    if nr > 1:
        s = np.sign(P[..., :-1, :] - P[..., 1:, :]) / (nc * (nr - 1))
        g[..., :-1, :] += s
        g[..., 1:, :] -= s
    if nc > 1:
        s = np.sign(P[..., :, :-1] - P[..., :, 1:]) / (nr * (nc - 1))
        g[..., :, :-1] += s
        g[..., :, 1:] -= s
    return g


def cross_entropy(P: np.ndarray, target: np.ndarray) -> float:
    P = np.asarray(P, dtype=float)
    target = np.asarray(target, dtype=float)
    mask = target > 0
    return float(-(target[mask] * np.log(np.maximum(P[mask], LOG_FLOOR))).sum())


def loss(P, target) -> tuple[float, float]:
    """(cross-entropy, smoothness) for a predicted map against a target map."""
    P = P.values if isinstance(P, BevGrid) else np.asarray(P, dtype=float)
    target = target.values if isinstance(target, BevGrid) else np.asarray(target, dtype=float)
    if P.shape != target.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {target.shape}")
    return cross_entropy(P, target), smoothness(P)


def batch_loss_and_grad(logits: np.ndarray, targets: np.ndarray, shape: tuple[int, int]) -> tuple[float, float, np.ndarray]:
    """Batch-mean CE and smoothness, and the gradient of their sum w.r.t. the logits."""
    b = logits.shape[0]
    logp = nn.log_softmax(logits)
    P = np.exp(logp)
    active = logp > math.log(LOG_FLOOR)
    ce = -(targets * np.maximum(logp, math.log(LOG_FLOOR))).sum() / b
    P3 = P.reshape(b, *shape)
    ls = (np.abs(np.diff(P3, axis=1)).sum() / (shape[1] * (shape[0] - 1))
          + np.abs(np.diff(P3, axis=2)).sum() / (shape[0] * (shape[1] - 1))) / b
    # d(-sum t log p)/dz = G - p sum(G) with G = -t on unfloored cells.
    G = -targets * active
    dz = G - P * G.sum(axis=1, keepdims=True)
    gs = smoothness_grad(P3).reshape(b, -1)
    dz += P * (gs - (P * gs).sum(axis=1, keepdims=True))
    return float(ce), float(ls), dz / b


# ---------------------------------------------------------------------------
# Training


def _check_finite(value: float, grads: dict[str, np.ndarray]) -> None:
    if not math.isfinite(value):
        raise nn.NumericalError(f"non-finite loss {value}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise nn.NumericalError(f"non-finite gradient in {k}")


def train_step(model: RicModel, inputs: list[RicInput], targets: np.ndarray, opt: nn.RMSProp) -> tuple[float, float]:
    """One RMSProp update on the batch-mean total loss; returns (CE, smoothness) before the update.

    Parameters are left untouched when the loss or any gradient is not finite.
    """
    if len(inputs) == 0:
        raise ValueError("empty batch")
    targets = np.asarray(targets, dtype=float).reshape(len(inputs), -1)
    logits, cache = model.net.forward(encode(inputs))
    ce, ls, dz = batch_loss_and_grad(logits, targets, (RIC_SIZE, RIC_SIZE))
    grads = model.net.backward(cache, dz)
    _check_finite(ce + ls, grads)
    opt.step(model.net.params, grads)
    return ce, ls


@dataclass
class GtSample:
    """A training example: the box the map is conditioned on and its sparse target map."""

    box: ObjectBox
    cells: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_grid(cls, box: ObjectBox, grid: BevGrid) -> "GtSample":
        flat = grid.values.reshape(-1)
        idx = np.flatnonzero(flat)
        return cls(box, idx, flat[idx])

    def dense(self) -> np.ndarray:
        t = np.zeros(RIC_CELLS)
        t[self.cells] = self.probs
        return t


def train_ric(model: RicModel, samples: list[GtSample], epochs: int, lr: float, halve_at: int | None = None,
              batch_size: int = 32, seed: int = 0, opt: nn.RMSProp | None = None, start_epoch: int = 0,
              on_epoch=None) -> tuple[nn.RMSProp, list[dict]]:
    if not samples:
        raise ValueError("no training samples")
    opt = opt or nn.RMSProp(lr=lr)
    inputs = [RicInput.from_box(s.box) for s in samples]
    history = []
    for epoch in range(start_epoch, start_epoch + epochs):
        opt.lr = nn.step_schedule(lr, epoch, halve_at)
        order = np.random.default_rng([seed, epoch]).permutation(len(samples))
        tot_ce = tot_ls = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            targets = np.stack([samples[i].dense() for i in idx])
            ce, ls = train_step(model, [inputs[i] for i in idx], targets, opt)
            tot_ce += ce * len(idx)
            tot_ls += ls * len(idx)
        row = {"epoch": epoch, "lr": opt.lr, "ce": tot_ce / len(order), "smooth": tot_ls / len(order)}
        row["loss"] = row["ce"] + row["smooth"]
        history.append(row)
        log.info("ric epoch %d lr %.3g loss %.5f", epoch, opt.lr, row["loss"])
        if on_epoch is not None:
            on_epoch(row)
    return opt, history


# ---------------------------------------------------------------------------
# Analytic baselines


def _cell_range(lo: float, hi: float, b_p: float) -> np.ndarray:
    """Integer cell indices whose centres k * b_p lie in [lo, hi] (boundary inclusive)."""
    eps = 1e-9 * max(1.0, abs(lo), abs(hi))
    return np.arange(math.ceil((lo - eps) / b_p), math.floor((hi + eps) / b_p) + 1)


def baseline_uniform(box: ObjectBox, bin_table: dict[str, float] | None = None) -> BevGrid:
    """Equal mass on every cell whose centre lies inside the footprint."""
    b_p = bin_size(box.category, bin_table)
    half = RIC_SIZE // 2
    xs = np.clip(_cell_range(-box.length / 2, box.length / 2, b_p), -half, half) + half
    ys = np.clip(_cell_range(-box.width / 2, box.width / 2, b_p), -half, half) + half
    v = np.zeros((RIC_SIZE, RIC_SIZE))
    v[np.ix_(np.unique(ys), np.unique(xs))] = 1.0
    if v.sum() == 0:
        v[half, half] = 1.0
    return BevGrid(v / v.sum(), b_p, box.center)


def facing_edges(rel_yaw: float) -> list[str]:
    """Footprint edges whose outward normal points against the sensor ray."""
    # Ray direction in the object frame.
    dx, dy = math.cos(-rel_yaw), math.sin(-rel_yaw)
    comps = {"front": dx, "rear": -dx, "left": dy, "right": -dy}
    return [e for e, c in comps.items() if c < -1e-9]


def baseline_lshape(box: ObjectBox, rel_yaw: float | None = None, bin_table: dict[str, float] | None = None) -> BevGrid:
    """Equal mass on the cells along the one or two sensor-facing edges."""
    rel_yaw = relative_yaw(box) if rel_yaw is None else rel_yaw
    b_p = bin_size(box.category, bin_table)
    half = RIC_SIZE // 2
    ex = int(round_half_away(box.length / 2 / b_p))
    ey = int(round_half_away(box.width / 2 / b_p))
    cells = set()
    for edge in facing_edges(rel_yaw):
        if edge in ("front", "rear"):
            col = ex if edge == "front" else -ex
            cells.update((r, col) for r in range(-ey, ey + 1))
        else:
            row = ey if edge == "left" else -ey
            cells.update((row, c) for c in range(-ex, ex + 1))
    v = np.zeros((RIC_SIZE, RIC_SIZE))
    for r, c in cells:
        if -half <= r <= half and -half <= c <= half:
            v[r + half, c + half] = 1.0
    if v.sum() == 0:
        v[half, half] = 1.0
    return BevGrid(v / v.sum(), b_p, box.center)
