"""Stage 2: accumulate radar sweeps around a detection and slide the hit kernel along the ray."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import Axes, BevGrid, bin_points, ego_to_radial_tangential, relative_yaw, rotate_resample
from .objects import MEAS_SIZE, ObjectBox, RadarSweep, search_half
from .ric_model import doppler_tangential_velocity, doppler_vectors

DEFAULT_SWEEPS = 7
MAX_SWEEPS = 13
# Below this |heading . ray| a Doppler reading says too little about the speed along the heading.
BACKPROJ_MIN_COS = 0.2


class VelocityMode(str, Enum):
    NONE = "none"
    DOPPLER = "doppler"
    BACKPROJ = "backproj"
    DOPPLER_TAN = "doppler+tan"
    MONO = "mono"


def parse_mode(mode) -> VelocityMode:
    try:
        return VelocityMode(mode)
    except ValueError:
        raise ValueError(f"unknown velocity mode {mode!r}; expected one of {[m.value for m in VelocityMode]}") from None


def inference_sweeps(sweeps: list[RadarSweep], n: int = DEFAULT_SWEEPS) -> list[RadarSweep]:
    """The current sweep plus the ``n - 1`` most recent past ones."""
    if not 0 <= n <= MAX_SWEEPS:
        raise ValueError(f"sweep count {n} outside [0, {MAX_SWEEPS}]")
    past = sorted((s for s in sweeps if s.dt >= 0), key=lambda s: s.dt)
    return past[:n]


def point_velocities(sweep: RadarSweep, box: ObjectBox, mode: VelocityMode) -> np.ndarray:
    pos, vr = sweep.positions, sweep.radial_speed
    if mode is VelocityMode.NONE:
        return np.zeros_like(pos)
    if mode is VelocityMode.MONO:
        return np.broadcast_to(np.asarray(box.velocity), pos.shape)
    if mode is VelocityMode.DOPPLER_TAN:
        return doppler_tangential_velocity(pos, vr, box.velocity)
    vd = doppler_vectors(pos, vr)
    if mode is VelocityMode.DOPPLER:
        return vd
    if mode is VelocityMode.BACKPROJ:
        h = box.heading
        r = np.hypot(pos[:, 0], pos[:, 1])
        cos = (pos @ h) / np.where(r > 0, r, 1.0)
        ok = np.abs(cos) >= BACKPROJ_MIN_COS
        speed = np.where(ok, vr / np.where(ok, cos, 1.0), 0.0)
        return np.where(ok[:, None], speed[:, None] * h, vd)
    raise ValueError(f"unknown velocity mode {mode!r}")


def accumulate_sweeps(sweeps: list[RadarSweep], box: ObjectBox, mode=VelocityMode.DOPPLER_TAN,
                      b_p: float = 0.1, n_sweeps: int | None = None) -> np.ndarray:
    """Motion-compensated hits (ego frame) inside the measurement map around ``box``.

    ``sweeps`` are used as given unless ``n_sweeps`` selects the most recent ones.
    """
    mode = parse_mode(mode)
    if n_sweeps is not None:
        sweeps = inference_sweeps(sweeps, n_sweeps)
    if not sweeps:
        return np.zeros((0, 2))
    pts = np.concatenate([s.positions + point_velocities(s, box, mode) * s.dt for s in sweeps])
    rt = ego_to_radial_tangential(pts - np.asarray(box.center), box.ray)
    lim = (MEAS_SIZE // 2 + 0.5) * b_p
    keep = (np.abs(rt[:, 0]) < lim) & (np.abs(rt[:, 1]) < lim)
    return pts[keep]


def measurement_map(points: np.ndarray, box: ObjectBox, b_p: float, size: int = MEAS_SIZE) -> BevGrid:
    """Counts in radial-tangential cells anchored exactly at the detection center."""
    rt = ego_to_radial_tangential(np.asarray(points, dtype=float).reshape(-1, 2) - np.asarray(box.center), box.ray)
    grid, _ = bin_points(rt, (0.0, 0.0), size, b_p, Axes.RADIAL_TANGENTIAL)
    grid.anchor = box.center
    return grid


def kernel_to_radial(ric: BevGrid, box: ObjectBox) -> BevGrid:
    """Rotate an object-frame map into the detection's radial-tangential frame."""
    return rotate_resample(ric, relative_yaw(box), Axes.RADIAL_TANGENTIAL)


@dataclass
class MatchProfile:
    scores: np.ndarray
    pixel: float
    monocular_range: float = 0.0

    @property
    def half(self) -> int:
        return len(self.scores) // 2

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.half, self.half + 1)

    def score_at(self, n: int) -> float:
        return float(self.scores[n + self.half])


def convolve_radial(P, C, n_max: int | None = None, monocular_range: float = 0.0) -> MatchProfile:
    """Matching score for each radial shift ``n`` of kernel ``P`` over counts ``C``.

    ``S(n) = sum_ij P[Lp + i, Lp + j] * C[Lc + i, Lc + j + n]`` with cells outside ``C``
    treated as empty. Each score is the correctly rounded sum of its terms, so the
    result does not depend on summation order.
    """
    pix = None
    if isinstance(P, BevGrid) and isinstance(C, BevGrid):
        if abs(P.pixel - C.pixel) > 1e-12:
            raise ValueError(f"pixel size mismatch: kernel {P.pixel} vs measurement {C.pixel}")
        pix = P.pixel
    Pv = P.values if isinstance(P, BevGrid) else np.asarray(P, dtype=float)
    Cv = C.values if isinstance(C, BevGrid) else np.asarray(C, dtype=float)
    if Pv.ndim != 2 or Pv.shape[0] != Pv.shape[1] or Pv.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be odd and square, got {Pv.shape}")
    if Cv.ndim != 2 or Cv.shape[0] != Cv.shape[1] or Cv.shape[0] % 2 == 0:
        raise ValueError(f"measurement map must be odd and square, got {Cv.shape}")
    if n_max is None:
        if pix is None:
            raise ValueError("n_max is required when pixel size is unknown")
        n_max = search_half(pix)
    lp, lc = Pv.shape[0] // 2, Cv.shape[0] // 2
    offsets = np.arange(-n_max, n_max + 1)
    rows, cols = np.nonzero(Cv)
    counts = Cv[rows, cols]
    i = rows - lc
    keep = np.abs(i) <= lp
    rows, cols, counts, i = rows[keep], cols[keep], counts[keep], i[keep]
    kcol = lp + (cols - lc)[:, None] - offsets[None, :]
    valid = (kcol >= 0) & (kcol <= 2 * lp)
    terms = np.where(valid, Pv[(lp + i)[:, None], np.clip(kcol, 0, 2 * lp)] * counts[:, None], 0.0)
    scores = np.array([math.fsum(terms[:, k]) for k in range(len(offsets))])
    return MatchProfile(scores, pix if pix is not None else 0.0, monocular_range)


def _center_first_order(offsets: np.ndarray) -> np.ndarray:
    return np.lexsort((offsets, np.abs(offsets)))


def argmax_offset(scores: np.ndarray) -> int:
    """Index offset of the maximum; ties go to the smaller |offset|, then the negative one."""
    scores = np.asarray(scores, dtype=float)
    half = len(scores) // 2
    offsets = np.arange(-half, half + 1)
    order = _center_first_order(offsets)
    best = order[np.argmax(scores[order])]
    return int(offsets[best])


def peak_candidates(profile: MatchProfile, k: int = 3) -> list[tuple[int, float]]:
    """Top-``k`` local maxima as (offset, score); plateaus report their most central member."""
    if k < 1:
        raise ValueError("k must be >= 1")
    s = np.asarray(profile.scores, dtype=float)
    offsets = profile.offsets
    peaks = []
    start = 0
    while start < len(s):
        end = start
        while end + 1 < len(s) and s[end + 1] == s[start]:
            end += 1
        left = s[start - 1] if start > 0 else -np.inf
        right = s[end + 1] if end + 1 < len(s) else -np.inf
        if s[start] > 0 and s[start] > left and s[start] > right:
            run = offsets[start:end + 1]
            n = int(run[_center_first_order(run)[0]])
            peaks.append((n, float(s[start])))
        start = end + 1
    peaks.sort(key=lambda p: (-p[1], abs(p[0]), p[0]))
    return peaks[:k]


def stage2_profile(ric_object_frame: BevGrid, points: np.ndarray, box: ObjectBox) -> MatchProfile:
    """Rotate the kernel, bin the compensated points and return the matching profile."""
    kernel = kernel_to_radial(ric_object_frame, box)
    meas = measurement_map(points, box, ric_object_frame.pixel)
    return convolve_radial(kernel, meas, monocular_range=box.range)
