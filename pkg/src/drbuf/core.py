"""Shared domain types, run configuration, RNG streams and capacity arithmetic."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid run configurations."""


class Mode(str, enum.Enum):
    REHEARSAL = "rehearsal"
    INCREMENTAL = "incremental"
    FROM_SCRATCH = "from_scratch"


class Purpose(enum.IntEnum):
    """Independent RNG stream purposes per worker."""

    CANDIDATE_SELECTION = 0
    EVICTION = 1
    GLOBAL_SAMPLING = 2
    DATA_SHUFFLE = 3
    MODEL_INIT = 4
    SUBSTITUTION = 5


@dataclass(frozen=True, eq=False)
class Sample:
    features: np.ndarray
    label: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        feats.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "label", int(self.label))

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.features, other.features)

    def __hash__(self):
        return hash((self.label, self.features.tobytes()))


@dataclass(eq=False)
class MiniBatch:
    """A batch of samples stored column-wise: ``features`` is (n, d) float32."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], feature_dim: int | None = None) -> "MiniBatch":
        if not samples:
            if feature_dim is None:
                raise ValueError("feature_dim required for an empty batch")
            return cls(np.zeros((0, feature_dim), np.float32), np.zeros(0, np.int64))
        return cls(
            np.stack([s.features for s in samples]),
            np.array([s.label for s in samples], dtype=np.int64),
        )

    @classmethod
    def empty(cls, feature_dim: int) -> "MiniBatch":
        return cls.from_samples([], feature_dim)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, idx: int) -> Sample:
        return Sample(self.features[idx], int(self.labels[idx]))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]


def per_class_capacity(s_max: int, n_classes: int) -> int:
    """Slots each class may occupy in one worker's buffer."""
    if n_classes < 1:
        raise ConfigError(f"class count must be >= 1, got {n_classes}")
    if s_max < n_classes:
        raise ConfigError(
            f"per-worker capacity {s_max} leaves no slot for some of {n_classes} classes"
        )
    return s_max // n_classes


def aggregate_class_capacity(n_workers: int, s_max: int, n_classes: int) -> int:
    """Slots one class may occupy across all workers (floor before multiply)."""
    return n_workers * per_class_capacity(s_max, n_classes)


def estimate_buffer_bytes(fraction: float, dataset_size: int, sample_bytes: int) -> int:
    if not 0 < fraction <= 1:
        raise ConfigError(f"buffer fraction must be in (0, 1], got {fraction}")
    return round(fraction * dataset_size) * sample_bytes


class RngStreams:
    """Counter-based (Philox) generators, one per (worker, purpose).

    Streams are derived from ``SeedSequence(seed, spawn_key=(worker, purpose))``
    so they never overlap and replaying the same triple replays the draws.
    """

    def __init__(self, seed: int, worker: int):
        self.seed = int(seed)
        self.worker = int(worker)
        self._cache: dict[Purpose, np.random.Generator] = {}

    @staticmethod
    def make(seed: int, worker: int, purpose: Purpose, *extra: int) -> np.random.Generator:
        ss = np.random.SeedSequence(int(seed), spawn_key=(int(worker), int(purpose), *extra))
        return np.random.Generator(np.random.Philox(ss))

    def get(self, purpose: Purpose) -> np.random.Generator:
        if purpose not in self._cache:
            self._cache[purpose] = self.make(self.seed, self.worker, purpose)
        return self._cache[purpose]


def parse_milestones(text: str | Mapping[int, float]) -> dict[int, float]:
    if isinstance(text, Mapping):
        return {int(k): float(v) for k, v in text.items()}
    out: dict[int, float] = {}
    for item in str(text).replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        epoch, _, mult = item.partition(":")
        if not mult:
            raise ConfigError(f"milestone {item!r} is not of the form epoch:multiplier")
        out[int(epoch)] = float(mult)
    return out


def format_milestones(milestones: Mapping[int, float]) -> str:
    return ",".join(f"{e}:{m:g}" for e, m in sorted(milestones.items()))


@dataclass
class RunConfig:
    """All knobs of a run. Every field is a key of the flat config file."""

    n_workers: int = 1
    n_classes: int = 10
    n_tasks: int = 4
    epochs_per_task: int = 10
    batch_size: int = 56
    rep_count: int = 7
    candidate_count: int = 14
    # 0 means derive from buffer_fraction of the training set, split over workers.
    per_worker_capacity: int = 0
    buffer_fraction: float = 0.30
    feature_dim: int = 32
    hidden_dim: int = 128
    samples_per_class: int = 500
    separation: float = 4.0
    dataset_path: str = ""
    base_lr: float = 0.05
    warmup_epochs: int = 2
    milestones: dict = field(default_factory=lambda: {7: 0.5, 9: 0.1})
    linear_scaling: bool = True
    lr_cap: float = 1.0
    momentum: float = 0.0
    weight_decay: float = 0.0
    rng_seed: int = 0
    roster: list = field(default_factory=list)
    mode: Mode = Mode.REHEARSAL
    top_k: int = 0
    metrics_window: int = 35
    allow_uneven_tasks: bool = True
    check_replicas: bool = False
    rpc_timeout: float = 10.0
    rpc_retries: int = 2
    collective_timeout: float = 120.0

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.milestones = parse_milestones(self.milestones)
        self.roster = list(self.roster)

    def validate(self) -> "RunConfig":
        if self.n_workers < 1:
            raise ConfigError("n_workers must be >= 1")
        if self.n_tasks < 1 or self.n_classes < self.n_tasks:
            raise ConfigError(f"cannot split {self.n_classes} classes into {self.n_tasks} tasks")
        if self.n_classes % self.n_tasks and not self.allow_uneven_tasks:
            raise ConfigError(
                f"{self.n_tasks} tasks do not divide {self.n_classes} classes "
                "(set allow_uneven_tasks to split near-evenly)"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.candidate_count <= self.batch_size:
            raise ConfigError("candidate_count must satisfy 0 <= c <= b")
        if self.rep_count < 0:
            raise ConfigError("rep_count must be >= 0")
        if not 0 < self.buffer_fraction <= 1:
            raise ConfigError("buffer_fraction must be in (0, 1]")
        if self.per_worker_capacity:
            per_class_capacity(self.per_worker_capacity, self.n_classes)
        if self.roster and len(self.roster) != self.n_workers:
            raise ConfigError(
                f"roster lists {len(self.roster)} workers but n_workers={self.n_workers}"
            )
        if self.base_lr <= 0 or self.lr_cap <= 0:
            raise ConfigError("learning rates must be positive")
        if any(m <= 0 for m in self.milestones.values()):
            raise ConfigError("milestone multipliers must be positive")
        return self

    def resolve_capacity(self, train_size: int) -> int:
        """Per-worker sample capacity S_max."""
        if self.per_worker_capacity:
            return self.per_worker_capacity
        total = round(self.buffer_fraction * train_size)
        s_max = max(total // self.n_workers, 0)
        per_class_capacity(s_max, self.n_classes)
        return s_max

    def resolve_top_k(self) -> int:
        if self.top_k:
            return self.top_k
        return 5 if self.n_classes >= 50 else 1

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        cfg = dataclasses.replace(base) if base is not None else cls()
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(getattr(cls(), key), raw, key))
        cfg.__post_init__()
        return cfg

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for name in self.field_names():
            value = getattr(self, name)
            out[name] = _render(value)
        return out


def _coerce(default: Any, raw: Any, key: str) -> Any:
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, Mode):
            return Mode(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, dict):
            return parse_milestones(raw)
        if isinstance(default, list):
            return [r.strip() for r in raw.split(",") if r.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def _render(value: Any) -> str:
    if isinstance(value, Mode):
        return value.value
    if isinstance(value, dict):
        return format_milestones(value)
    if isinstance(value, list):
        return ",".join(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        values[key.strip()] = value.strip()
    return values


def write_config_file(cfg: RunConfig, path: str | Path) -> None:
    lines = [f"{k} = {v}" for k, v in cfg.to_mapping().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_roster(path: str | Path) -> list[str]:
    """Roster file: one ``worker_id host:port`` line per worker, ids 0..N-1."""
    entries: dict[int, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}:{lineno}: expected 'worker_id host:port'")
        wid = int(parts[0])
        if wid in entries:
            raise ConfigError(f"{path}:{lineno}: duplicate worker id {wid}")
        entries[wid] = parts[1]
    if sorted(entries) != list(range(len(entries))):
        raise ConfigError(f"{path}: worker ids must be 0..{len(entries) - 1}")
    return [entries[i] for i in range(len(entries))]


def write_roster(addresses: Sequence[str], path: str | Path) -> None:
    Path(path).write_text("".join(f"{i} {a}\n" for i, a in enumerate(addresses)))


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port:
        raise ConfigError(f"address {address!r} is not host:port")
    return host, int(port)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b) if b else 0


__all__ = [
    "ConfigError",
    "MiniBatch",
    "Mode",
    "Purpose",
    "RngStreams",
    "RunConfig",
    "Sample",
    "aggregate_class_capacity",
    "estimate_buffer_bytes",
    "per_class_capacity",
    "read_config_file",
    "read_roster",
    "write_config_file",
    "write_roster",
]
