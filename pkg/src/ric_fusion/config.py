"""Run configuration shared by the CLI subcommands, stored as YAML."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .matcher import DEFAULT_SWEEPS, MAX_SWEEPS, parse_mode
from .objects import CATEGORIES, LARGE_BIN, SMALL_BIN, default_bin_table
from .radar_sim import SceneConfig

CONFIG_SCHEMA = "ric-fusion-config/1"


class ConfigError(ValueError):
    """Bad or inconsistent configuration; the CLI maps it to exit code 2."""


@dataclass
class TrainSchedule:
    epochs: int
    lr: float
    halve_at: int | None = None
    batch_size: int = 32

    def validate(self, name: str) -> None:
        if self.epochs < 0:
            raise ConfigError(f"{name}.epochs must be >= 0")
        if not self.lr >= 0:
            raise ConfigError(f"{name}.lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"{name}.batch_size must be >= 1")


def _ric_schedule() -> TrainSchedule:
    return TrainSchedule(epochs=10, lr=1e-3, halve_at=8, batch_size=32)


def _fusion_schedule() -> TrainSchedule:
    return TrainSchedule(epochs=30, lr=1e-3, halve_at=24, batch_size=64)


def _scene_defaults() -> dict:
    d = SceneConfig().to_dict()
    del d["seed"]  # the run seed drives the simulator
    return d


@dataclass
class RunConfig:
    """Everything a subcommand needs to reproduce its outputs."""

    command: str = ""
    seed: int = 0
    scenes: str | None = None
    checkpoint: str | None = None
    out: str = "out"
    sweeps: int = DEFAULT_SWEEPS
    alpha: float = 0.5
    velocity_mode: str = "doppler+tan"
    bin_size_table: str | None = None
    bin_table: dict = field(default_factory=default_bin_table)
    scene: dict = field(default_factory=_scene_defaults)
    ric_hidden: list = field(default_factory=lambda: [256, 256, 640])
    fusion_hidden: list = field(default_factory=lambda: [256, 256, 256])
    train_ric: TrainSchedule = field(default_factory=_ric_schedule)
    train_fusion: TrainSchedule = field(default_factory=_fusion_schedule)
    ablate: str | None = None
    plots: int = 6
    distributions: bool = False

    def __post_init__(self):
        for name in ("train_ric", "train_fusion"):
            v = getattr(self, name)
            if isinstance(v, dict):
                try:
                    setattr(self, name, TrainSchedule(**v))
                except TypeError as exc:
                    raise ConfigError(f"{name}: {exc}") from None

    def validate(self) -> "RunConfig":
        if not 0 <= self.sweeps <= MAX_SWEEPS:
            raise ConfigError(f"sweeps must lie in [0, {MAX_SWEEPS}]")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        try:
            parse_mode(self.velocity_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        check_bin_table(self.bin_table)
        try:
            self.scene_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"scene: {exc}") from None
        self.train_ric.validate("train_ric")
        self.train_fusion.validate("train_fusion")
        for name in ("ric_hidden", "fusion_hidden"):
            h = getattr(self, name)
            if not h or any(int(w) < 1 for w in h):
                raise ConfigError(f"{name} needs positive layer widths")
        return self

    def scene_config(self) -> SceneConfig:
        d = dict(self.scene)
        if "seed" in d:
            raise ConfigError("scene.seed is not allowed; set the top-level seed")
        d["seed"] = self.seed
        return SceneConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = CONFIG_SCHEMA
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        d = dict(d)
        schema = d.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigError(f"unsupported config schema {schema!r}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    def dump(self) -> str:
        # PyYAML writes floats with repr, so values survive a round trip exactly.
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from None
        return cls.from_dict(data or {})

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump())
        return path


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return RunConfig.loads(text)


def check_bin_table(table: dict) -> None:
    missing = [c for c in CATEGORIES if c not in table]
    if missing:
        raise ConfigError(f"bin-size table misses categories {missing}")
    extra = sorted(set(table) - set(CATEGORIES))
    if extra:
        raise ConfigError(f"bin-size table has unknown categories {extra}")
    # Stage 3 takes 65-bin profiles; only these two pixel sizes map onto that grid.
    bad = {c: v for c, v in table.items() if v not in (SMALL_BIN, LARGE_BIN)}
    if bad:
        raise ConfigError(f"pixel sizes must be {SMALL_BIN} or {LARGE_BIN}, got {bad}")


def load_bin_table(path) -> dict:
    """Read a category -> pixel size mapping (YAML or JSON); unlisted categories keep defaults."""
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read bin-size table {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"bin-size table {path} is not valid YAML/JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"bin-size table {path} must map category names to pixel sizes")
    table = default_bin_table()
    for k, v in data.items():
        try:
            table[str(k)] = float(v)
        except (TypeError, ValueError):
            raise ConfigError(f"bin-size table entry {k!r} is not a number") from None
    check_bin_table(table)
    return table
