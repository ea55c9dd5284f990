"""Run configuration: one TOML file, one section per stage plus a master seed.

Every stage reads its own section and derives its seeds from the master seed
through :func:`stage_seed`, so changing one stage's settings never shifts the
random streams of another.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from peepscope.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

SECTIONS = ("generator", "dataset", "anomaly", "train", "peephole", "eval")
TOP_LEVEL = ("seed", "output_dir", "threads")


@dataclass(frozen=True)
class GeneratorSection:
    burn_in: int = 100
    sample_rate: float = 1.0


@dataclass(frozen=True)
class DatasetSection:
    n_train: int = 50_000
    n_validation: int = 12_500
    n_test: int = 7_000

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_validation + self.n_test


@dataclass(frozen=True)
class AnomalySection:
    kinds: tuple[str, ...] = ("all",)
    # independent corruption draws of the validation split used for peephole fitting
    fit_replicates: int = 3


@dataclass(frozen=True)
class TrainSection:
    architecture: str = "default"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 100
    patience: int = 10
    target_fpr: float = 1e-3


@dataclass(frozen=True)
class PeepholeSection:
    kappa: int = 50
    C: int = 50
    tag_sets: tuple[str, ...] = ("kinds", "wheels")
    restarts: int = 3
    max_iter: int = 500


@dataclass(frozen=True)
class EvalSection:
    stream_samples: int = 2000
    stream_trials: int = 10
    event_length: int = 8
    event_kind: str = "Step"
    stride: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    threads: int = 1
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    anomaly: AnomalySection = field(default_factory=AnomalySection)
    train: TrainSection = field(default_factory=TrainSection)
    peephole: PeepholeSection = field(default_factory=PeepholeSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self) -> None:
        _validate(self)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of the settings that shape results (output location excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)


_SECTION_TYPES = {
    "generator": GeneratorSection,
    "dataset": DatasetSection,
    "anomaly": AnomalySection,
    "train": TrainSection,
    "peephole": PeepholeSection,
    "eval": EvalSection,
}


def _validate(cfg: RunConfig) -> None:
    if not 0 <= cfg.seed < 2**63:
        raise ConfigError("seed must be a non-negative 63-bit integer")
    if cfg.threads < 1:
        raise ConfigError("threads must be at least 1")
    d = cfg.dataset
    if min(d.n_train, d.n_validation, d.n_test) < 1:
        raise ConfigError("[dataset] split sizes must be positive")
    if cfg.anomaly.fit_replicates < 1:
        raise ConfigError("[anomaly] fit_replicates must be at least 1")
    t = cfg.train
    if t.architecture not in ("default", "small"):
        raise ConfigError("[train] architecture must be 'default' or 'small'")
    if not 0 < t.target_fpr < 1:
        raise ConfigError("[train] target_fpr must lie in (0, 1)")
    if d.n_validation * t.target_fpr < 1:
        raise ConfigError(f"[train] target_fpr {t.target_fpr} needs at least {int(np.ceil(1 / t.target_fpr))} "
                          f"validation chunks, [dataset] has {d.n_validation}")
    p = cfg.peephole
    if p.kappa < 1 or p.C < 1 or p.restarts < 1 or p.max_iter < 1:
        raise ConfigError("[peephole] kappa, C, restarts and max_iter must be positive")
    unknown = set(p.tag_sets) - {"kinds", "wheels"}
    if unknown or not p.tag_sets:
        raise ConfigError(f"[peephole] tag_sets must be drawn from kinds, wheels; got {list(p.tag_sets)}")
    e = cfg.eval
    if e.event_kind not in ("Step", "Offset"):
        raise ConfigError("[eval] event_kind must be Step or Offset")
    if e.stride < 1 or e.stream_samples < 16 or e.event_length < 1 or e.event_length > e.stream_samples:
        raise ConfigError("[eval] stride, stream_samples and event_length are out of range")


def _section(name: str, raw: Mapping[str, Any]):
    cls = _SECTION_TYPES[name]
    if not isinstance(raw, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    allowed = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    values = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = (value,)
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"[{name}] {key} must be a list")
            value = tuple(value)
        elif isinstance(default, bool) or not isinstance(value, type(default)):
            # TOML ints are acceptable where floats are expected
            if not (isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool)):
                raise ConfigError(f"[{name}] {key} must be {type(default).__name__}, got {value!r}")
            value = float(value)
        values[key] = value
    return cls(**values)


def from_dict(raw: Mapping[str, Any]) -> RunConfig:
    """Build a config from parsed TOML. All six sections are required (they may be empty)."""
    unknown = sorted(set(raw) - set(SECTIONS) - set(TOP_LEVEL))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    missing = [s for s in SECTIONS if s not in raw]
    if missing:
        raise ConfigError(f"missing config section(s): {', '.join('[' + s + ']' for s in missing)}")
    top = {}
    for key in TOP_LEVEL:
        if key in raw:
            expected = str if key == "output_dir" else int
            if not isinstance(raw[key], expected) or isinstance(raw[key], bool):
                raise ConfigError(f"{key} must be {expected.__name__}")
            top[key] = raw[key]
    sections = {name: _section(name, raw[name]) for name in SECTIONS}
    return RunConfig(**top, **sections)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw)


def default_config_text() -> str:
    """The built-in defaults rendered as TOML (every section present)."""
    cfg = RunConfig()
    lines = [f"seed = {cfg.seed}", f'output_dir = "{cfg.output_dir}"', f"threads = {cfg.threads}"]
    for name in SECTIONS:
        lines += ["", f"[{name}]"]
        for key, value in dataclasses.asdict(getattr(cfg, name)).items():
            lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def _toml_value(value) -> str:
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return repr(value)


def stage_seed(master: int, stage: str, *extra: int) -> int:
    """Deterministic 63-bit seed for ``stage`` (and optional sub-indices) under ``master``."""
    key = [int(master), zlib.crc32(stage.encode("utf-8"))] + [int(e) for e in extra]
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0] >> np.uint64(1))
