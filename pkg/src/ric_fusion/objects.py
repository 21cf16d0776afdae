"""Object hypotheses, radar sweeps and the per-category constants shared by every stage."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

CATEGORIES = (
    "car",
    "truck",
    "bus",
    "trailer",
    "construction_vehicle",
    "pedestrian",
    "motorcycle",
    "bicycle",
    "traffic_cone",
    "barrier",
)
NUM_CATEGORIES = len(CATEGORIES)

LARGE_CATEGORIES = frozenset({"bus", "trailer", "truck", "construction_vehicle"})

SMALL_BIN = 0.1
LARGE_BIN = 0.2

# Maps are (2L+1) square; L_P = 64 for the hit model, L_C = 96 for measurements.
RIC_HALF = 64
MEAS_HALF = 96
RIC_SIZE = 2 * RIC_HALF + 1
MEAS_SIZE = 2 * MEAS_HALF + 1

SEARCH_RANGE = 3.2
# Stage-3 operates on one fixed offset grid regardless of category bin size.
STAGE3_BIN = SMALL_BIN
STAGE3_HALF = 32
STAGE3_LEN = 2 * STAGE3_HALF + 1


def default_bin_table() -> dict[str, float]:
    return {c: (LARGE_BIN if c in LARGE_CATEGORIES else SMALL_BIN) for c in CATEGORIES}


def bin_size(category: str, table: dict[str, float] | None = None) -> float:
    table = table or default_bin_table()
    try:
        return table[category]
    except KeyError:
        raise ValueError(f"unknown category {category!r}") from None


def search_half(b_p: float) -> int:
    """Number of bins either side of the monocular center covered by the search window."""
    return int(round(SEARCH_RANGE / b_p))


def one_hot(category: str) -> np.ndarray:
    v = np.zeros(NUM_CATEGORIES)
    v[CATEGORIES.index(category)] = 1.0
    return v


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True)
class ObjectBox:
    """A BEV box hypothesis in the ego frame.

    ``length`` runs along the heading ``yaw``; ``width`` is perpendicular to it.
    """

    category: str
    center: tuple[float, float]
    length: float
    width: float
    height: float
    yaw: float
    bottom_z: float = 0.0
    velocity: tuple[float, float] = (0.0, 0.0)
    score: float = 1.0

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if not (self.length > 0 and self.width > 0 and self.height > 0):
            raise ValueError("box dimensions must be positive")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "velocity", (float(self.velocity[0]), float(self.velocity[1])))

    @property
    def range(self) -> float:
        return math.hypot(*self.center)

    @property
    def azimuth(self) -> float:
        return math.atan2(self.center[1], self.center[0])

    @property
    def heading(self) -> np.ndarray:
        return np.array([math.cos(self.yaw), math.sin(self.yaw)])

    @property
    def ray(self) -> np.ndarray:
        """Unit vector from the ego origin to the box center."""
        r = self.range
        if r == 0.0:
            raise ValueError("undefined azimuth: box center at origin")
        return np.array(self.center) / r

    def moved(self, **changes) -> "ObjectBox":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "center": list(self.center),
            "length": self.length,
            "width": self.width,
            "height": self.height,
            "yaw": self.yaw,
            "bottom_z": self.bottom_z,
            "velocity": list(self.velocity),
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectBox":
        return cls(
            category=d["category"],
            center=tuple(d["center"]),
            length=d["length"],
            width=d["width"],
            height=d["height"],
            yaw=d["yaw"],
            bottom_z=d.get("bottom_z", 0.0),
            velocity=tuple(d.get("velocity", (0.0, 0.0))),
            score=d.get("score", 1.0),
        )


@dataclass
class RadarSweep:
    """One radar scan in the ego frame at the reference time.

    ``dt`` is the time elapsed from this sweep to the reference sweep (positive for
    past sweeps, negative for future ones). ``object_id`` and ``body_xy`` are
    simulator ground truth (emitting object index, -1 for clutter, and the
    emission point in that object's frame); they are optional for real data.
    """

    timestamp: float
    dt: float
    positions: np.ndarray
    radial_speed: np.ndarray
    object_id: np.ndarray | None = None
    body_xy: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.radial_speed = np.asarray(self.radial_speed, dtype=float).reshape(-1)
        if len(self.positions) != len(self.radial_speed):
            raise ValueError("positions and radial_speed lengths differ")
        if self.object_id is not None:
            self.object_id = np.asarray(self.object_id, dtype=int).reshape(-1)
        if self.body_xy is not None:
            self.body_xy = np.asarray(self.body_xy, dtype=float).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.positions)

    def to_dict(self) -> dict:
        d = {
            "timestamp": self.timestamp,
            "dt": self.dt,
            "positions": self.positions.tolist(),
            "radial_speed": self.radial_speed.tolist(),
        }
        if self.object_id is not None:
            d["object_id"] = self.object_id.tolist()
        if self.body_xy is not None:
            d["body_xy"] = self.body_xy.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RadarSweep":
        return cls(
            timestamp=d["timestamp"],
            dt=d["dt"],
            positions=np.array(d["positions"], dtype=float).reshape(-1, 2),
            radial_speed=np.array(d["radial_speed"], dtype=float),
            object_id=None if "object_id" not in d else np.array(d["object_id"], dtype=int),
            body_xy=None if "body_xy" not in d else np.array(d["body_xy"], dtype=float).reshape(-1, 2),
        )
