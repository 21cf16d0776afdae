"""Stage 3: rescore range candidates, pick the refined range and update the detection score."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import left_normal, round_half_away
from .matcher import MatchProfile, argmax_offset
from .objects import (NUM_CATEGORIES, SEARCH_RANGE, STAGE3_BIN, STAGE3_HALF, STAGE3_LEN, ObjectBox, bin_size,
                      one_hot, search_half)

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.5
INPUT_GROUPS = {
    "category": NUM_CATEGORIES,
    "range": 1,
    "size": 3,
    "velocity": 4,
    "score": 1,
    "profile": STAGE3_LEN,
}
DEFAULT_PROJ = {"category": 16, "range": 16, "size": 16, "velocity": 16, "score": 16, "profile": 128}
DEFAULT_HIDDEN = (256, 256, 256)


def normalize_profile(profile) -> np.ndarray:
    """Map a 65- or 33-bin profile onto the fixed 65-bin grid, scaled to max 1.

    33-bin profiles (0.2 m bins) are replicated so 65-index ``k`` reads bin ``(k + 1) // 2``;
    index 32 stays at offset zero.
    """
    s = np.asarray(profile.scores if isinstance(profile, MatchProfile) else profile, dtype=float)
    if len(s) == STAGE3_LEN:
        out = s.copy()
    elif len(s) == STAGE3_HALF + 1:
        out = np.repeat(s, 2)[1:]
    else:
        raise ValueError(f"unexpected profile length {len(s)}; expected {STAGE3_LEN} or {STAGE3_HALF + 1}")
    m = out.max()
    return out / m if m > 0 else np.zeros(STAGE3_LEN)


@dataclass(frozen=True)
class Stage3Input:
    category_onehot: np.ndarray
    range: float
    size: tuple[float, float, float]
    velocity: tuple[float, float, float, float]
    score: float
    profile: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.profile, dtype=float)
        if p.shape != (STAGE3_LEN,):
            raise ValueError(f"profile must have {STAGE3_LEN} entries")
        if np.any(p < 0):
            raise ValueError("profile must be non-negative")

    @classmethod
    def from_detection(cls, box: ObjectBox, profile) -> "Stage3Input":
        v = np.asarray(box.velocity)
        ray = box.ray
        vel = (v[0], v[1], float(v @ ray), float(v @ left_normal(ray)))
        return cls(one_hot(box.category), box.range, (box.length, box.width, box.height), vel, box.score,
                   normalize_profile(profile))

    def features(self) -> dict[str, np.ndarray]:
        return {
            "category": np.asarray(self.category_onehot, dtype=float),
            "range": np.array([self.range / 50.0]),
            "size": np.asarray(self.size, dtype=float) / 5.0,
            "velocity": np.asarray(self.velocity, dtype=float) / 10.0,
            "score": np.array([self.score]),
            "profile": np.asarray(self.profile, dtype=float),
        }


def encode(inputs: list[Stage3Input]) -> dict[str, np.ndarray]:
    feats = [x.features() for x in inputs]
    return {k: np.stack([f[k] for f in feats]) for k in INPUT_GROUPS}


class Stage3Model:
    def __init__(self, net: nn.BranchMLP | None = None, hidden=DEFAULT_HIDDEN, proj=None, seed: int = 0):
        self.net = net or nn.BranchMLP(INPUT_GROUPS, proj or DEFAULT_PROJ, hidden, STAGE3_LEN, seed=seed)
        if self.net.out_dim != STAGE3_LEN:
            raise ValueError(f"network output {self.net.out_dim} != {STAGE3_LEN}")

    def predict(self, inputs: list[Stage3Input]) -> np.ndarray:
        if not inputs:
            return np.zeros((0, STAGE3_LEN))
        z, _ = self.net.forward(encode(inputs))
        return nn.softmax(z)


def predict_stage3(model: Stage3Model, inp: Stage3Input) -> np.ndarray:
    return model.predict([inp])[0]


def select_range(scores, r_cam: float, b_p: float = STAGE3_BIN) -> tuple[int, float, float]:
    """(offset, refined range, score at offset) at the peak of ``scores``."""
    scores = np.asarray(scores, dtype=float)
    dn = argmax_offset(scores)
    return dn, r_cam + dn * b_p, float(scores[dn + len(scores) // 2])


def fuse_score(s_cam: float, s_peak: float, alpha: float = DEFAULT_ALPHA) -> float:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return s_cam + alpha * s_peak


@dataclass
class DetectionRecord:
    box: ObjectBox
    delta_n: int
    range_fused: float
    score_fused: float
    source: str
    bin: float = STAGE3_BIN
    profile: np.ndarray | None = None
    stage3_scores: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def range_monocular(self) -> float:
        return self.box.range

    def fused_box(self) -> ObjectBox:
        scale = self.range_fused / self.box.range
        return self.box.moved(center=(self.box.center[0] * scale, self.box.center[1] * scale))


def monocular_record(box: ObjectBox, profile=None) -> DetectionRecord:
    return DetectionRecord(box, 0, box.range, box.score, "monocular", profile=profile)


def refine(box: ObjectBox, scores, alpha: float = DEFAULT_ALPHA, profile=None) -> DetectionRecord:
    dn, r_f, s_peak = select_range(scores, box.range)
    return DetectionRecord(box, dn, r_f, fuse_score(box.score, s_peak, alpha), "fused",
                           profile=profile, stage3_scores=np.asarray(scores))


def associate_gt(detections: list[ObjectBox], gts: list[ObjectBox], b_p: float | None = None,
                 ) -> list[tuple[int, int, int]]:
    """Greedy one-to-one matching of detections to ground truth along each detection's ray.

    A pair qualifies when categories agree, the radial gap is at most 3.2 m and the
    tangential gap at most ``min(0.5, gt.length)``. Pairs are taken in order of
    increasing radial gap (ties: lower detection, then lower ground-truth index).
    Returns ``(det_index, gt_index, label)`` with ``label`` the range difference in
    bins of ``b_p`` (category bin size when ``None``), clamped to the search window.
    """
    cands = []
    for di, det in enumerate(detections):
        ray = det.ray
        normal = left_normal(ray)
        for gi, gt in enumerate(gts):
            if gt.category != det.category:
                continue
            d = np.asarray(gt.center) - np.asarray(det.center)
            radial, tangential = float(d @ ray), float(d @ normal)
            if abs(radial) <= SEARCH_RANGE and abs(tangential) <= min(0.5, gt.length):
                cands.append((abs(radial), di, gi))
    cands.sort()
    used_d, used_g = set(), set()
    out = []
    for _, di, gi in cands:
        if di in used_d or gi in used_g:
            continue
        used_d.add(di)
        used_g.add(gi)
        det, gt = detections[di], gts[gi]
        bp = b_p if b_p is not None else bin_size(det.category)
        n_max = search_half(bp)
        label = int(np.clip(round_half_away((gt.range - det.range) / bp), -n_max, n_max))
        out.append((di, gi, label))
    out.sort(key=lambda t: t[0])
    return out


def batch_loss_and_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean one-hot cross-entropy over offsets and its gradient w.r.t. the logits."""
    b = len(labels)
    idx = np.asarray(labels) + STAGE3_HALF
    logp = nn.log_softmax(logits)
    loss = -logp[np.arange(b), idx].sum() / b
    dz = np.exp(logp)
    dz[np.arange(b), idx] -= 1.0
    return float(loss), dz / b


def train_step(model: Stage3Model, inputs: list[Stage3Input], labels, opt: nn.RMSProp) -> float:
    labels = np.asarray(labels, dtype=int)
    if len(inputs) == 0:
        raise ValueError("empty batch")
    if np.any(np.abs(labels) > STAGE3_HALF):
        raise ValueError(f"labels must lie in [-{STAGE3_HALF}, {STAGE3_HALF}]")
    logits, cache = model.net.forward(encode(inputs))
    loss, dz = batch_loss_and_grad(logits, labels)
    grads = model.net.backward(cache, dz)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise nn.NumericalError(f"non-finite stage-3 loss {loss}")
    opt.step(model.net.params, grads)
    return loss


def train_stage3(model: Stage3Model, inputs: list[Stage3Input], labels, epochs: int, lr: float,
                 halve_at: int | None = None, batch_size: int = 64, seed: int = 0, opt: nn.RMSProp | None = None,
                 start_epoch: int = 0, on_epoch=None) -> tuple[nn.RMSProp, list[dict]]:
    if not inputs:
        raise ValueError("no training samples")
    labels = np.asarray(labels, dtype=int)
    opt = opt or nn.RMSProp(lr=lr)
    history = []
    for epoch in range(start_epoch, start_epoch + epochs):
        opt.lr = nn.step_schedule(lr, epoch, halve_at)
        order = np.random.default_rng([seed, epoch]).permutation(len(inputs))
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            total += train_step(model, [inputs[i] for i in idx], labels[idx], opt) * len(idx)
        row = {"epoch": epoch, "lr": opt.lr, "loss": total / len(order)}
        history.append(row)
        log.info("stage3 epoch %d lr %.3g loss %.5f", epoch, opt.lr, row["loss"])
        if on_epoch is not None:
            on_epoch(row)
    return opt, history
