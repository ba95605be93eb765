"""Run configuration: one YAML file fully determines an experiment.

Unknown keys and bad values are reported with their dotted field path
(``schedule.peak_lr: must be positive``). The run id is a digest of the
canonical config (output directory excluded), so identical configs share
a run directory and completed work can be skipped.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .data import DatasetSpec
from .model import ModelConfig
from .noise import ALL_KINDS, SEEN_KINDS, UNSEEN_KINDS, AugmentPolicy, SeveritySchedule
from .optim import TrainSchedule

METHODS = ("naive", "finetune", "parp", "lth", "lrr", "iter-lth", "iter-lrr")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class GridConfig:
    """Which cells the experiment commands run."""

    sparsities: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    methods: tuple[str, ...] = METHODS
    rounds: int = 10
    round_epochs: int = 12
    iterative_schedule: str = "linear"
    finetune_epochs: int = 10
    finetune_lr: float = 1e-5
    rewind_sparsities: tuple[float, ...] = (0.2, 0.5, 0.8)
    rewind_epochs: tuple[int, ...] | None = None  # None: reference epochs scaled to the schedule
    noise_kinds: tuple[str, ...] = SEEN_KINDS + UNSEEN_KINDS
    noise_levels: tuple[int, ...] = tuple(range(11))

    def __post_init__(self):
        for name in ("sparsities", "methods", "rewind_sparsities", "noise_kinds", "noise_levels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.rewind_epochs is not None:
            object.__setattr__(self, "rewind_epochs", tuple(int(e) for e in self.rewind_epochs))
        for s in self.sparsities + self.rewind_sparsities:
            if not 0 <= s < 1:
                raise ValueError(f"sparsity {s} outside [0, 1)")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; choose from {list(METHODS)}")
        for k in self.noise_kinds:
            if k not in ALL_KINDS:
                raise ValueError(f"unknown noise kind {k!r}")
        for lvl in self.noise_levels:
            if not 0 <= lvl <= 10:
                raise ValueError(f"noise level {lvl} outside [0, 10]")
        if self.rounds < 1 or self.round_epochs < 1 or self.finetune_epochs < 1:
            raise ValueError("rounds, round_epochs and finetune_epochs must be >= 1")
        if self.iterative_schedule not in ("linear", "geometric"):
            raise ValueError("iterative_schedule is 'linear' or 'geometric'")
        if self.finetune_lr <= 0:
            raise ValueError("finetune_lr must be positive")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    test_samples: int = 200
    augment: AugmentPolicy | None = None  # None: no augmentation at all
    severity: SeveritySchedule = field(default_factory=SeveritySchedule)
    grid: GridConfig = field(default_factory=GridConfig)
    snapshot_epochs: tuple[int, ...] | None = None  # None: scaled reference epochs
    seed: int = 0
    out: str = "runs"

    def __post_init__(self):
        if not 0 < self.test_samples < self.data.num_samples:
            raise ConfigError("test_samples", "must lie strictly between 0 and data.num_samples")
        if self.model.feature_dim != self.data.feature_dim:
            raise ConfigError("model.feature_dim", f"must equal data.feature_dim ({self.data.feature_dim})")
        if self.model.alphabet_size != self.data.alphabet_size:
            raise ConfigError("model.alphabet_size", f"must equal data.alphabet_size ({self.data.alphabet_size})")
        if self.snapshot_epochs is not None:
            eps = tuple(sorted({int(e) for e in self.snapshot_epochs}))
            if any(not 0 <= e <= self.schedule.total_epochs for e in eps):
                raise ConfigError("snapshot_epochs", f"epochs must lie in [0, {self.schedule.total_epochs}]")
            object.__setattr__(self, "snapshot_epochs", eps)

    @property
    def train_fraction(self) -> float:
        return (self.data.num_samples - self.test_samples) / self.data.num_samples

    def augment_policy(self) -> AugmentPolicy | None:
        if self.augment is None:
            return None
        return dataclasses.replace(self.augment, severity=self.severity)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed)


_SECTIONS = {
    "model": ModelConfig,
    "schedule": TrainSchedule,
    "data": DatasetSpec,
    "augment": AugmentPolicy,
    "severity": SeveritySchedule,
    "grid": GridConfig,
}


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls) if f.init}
    if cls is AugmentPolicy:
        known.discard("severity")  # lives in its own top-level section
    for key in raw:
        if key not in known:
            raise ConfigError(f"{path}.{key}", f"unknown key (expected one of {sorted(known)})")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        for key in raw:  # find a field that is invalid on its own
            try:
                cls(**{key: raw[key]})
            except (TypeError, ValueError):
                raise ConfigError(f"{path}.{key}", msg) from None
        raise ConfigError(path, msg) from None  # only the combination is invalid


def from_dict(raw: dict) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a mapping at the top level")
    known = {f.name for f in fields(RunConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(key, f"unknown key (expected one of {sorted(known)})")
        if key in _SECTIONS:
            if key == "augment" and value is None:
                kwargs[key] = None
                continue
            kwargs[key] = _build(_SECTIONS[key], value or {}, key)
        else:
            kwargs[key] = value
    for key in ("seed", "test_samples"):
        if key in kwargs and not isinstance(kwargs[key], int):
            raise ConfigError(key, "must be an integer")
    return RunConfig(**kwargs)


def to_dict(cfg: RunConfig) -> dict:
    """Plain-data form (lists instead of tuples) that :func:`from_dict` inverts."""

    def plain(v):
        if dataclasses.is_dataclass(v):
            d = {f.name: plain(getattr(v, f.name)) for f in fields(v) if f.init}
            if isinstance(v, AugmentPolicy):
                d.pop("severity")
            return d
        if isinstance(v, (tuple, list)):
            return [plain(x) for x in v]
        return v

    return plain(cfg)


def load_config(path=None) -> RunConfig:
    """Read a YAML config; ``None`` loads the annotated default shipped with the package."""
    if path is None:
        text = resources.files("prunelab").joinpath("default_config.yaml").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("", f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"invalid YAML: {exc}") from None
    return from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def run_id(cfg: RunConfig) -> str:
    """Digest of everything that influences results (the output directory does not)."""
    d = to_dict(cfg)
    d.pop("out")
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def cell_digest(rid: str, **cell) -> str:
    canon = json.dumps({"run": rid, **cell}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]

