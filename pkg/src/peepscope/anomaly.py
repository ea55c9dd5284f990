"""Synthetic anomaly injection at 0 dB SNR.

Five families perturb a single channel column ``w`` (16 time samples):
additive white Gaussian noise, a signed constant offset, a signed single-sample
impulse, a norm-preserving rotation (power spectral alteration, PSA) and a
signed step over the first or last eight samples.

Intensities are calibrated so the expected perturbation energy
``E[||w' - w||^2]`` equals the nominal column energy ``E[||w||^2]`` measured on
the training split.

Scenario I applies one family to all 16 channels of a chunk; scenario II
applies it to the four channels of a single, uniformly drawn reaction wheel.
The sign, the impulse position and the step half are drawn once per chunk and
shared by its corrupted channels; Gaussian noise and PSA rotation directions
are drawn per channel.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from peepscope.errors import ArtifactError, ConfigError
from peepscope.telemetry import (
    N_CHANNELS,
    N_WHEELS,
    WINDOW,
    Dataset,
    TelemetryStream,
    concat_datasets,
    read_csv_rows,
    wheel_channels,
    write_csv,
)

logger = logging.getLogger(__name__)

KINDS = ("GWN", "Offset", "Impulse", "PSA", "Step")
NOMINAL = "Nominal"
SCENARIOS = ("I", "II")
WHEEL_TAGS = tuple(f"RW{k}" for k in range(N_WHEELS))

_CLI_NAMES = {k.lower(): k for k in KINDS}

LABEL_COLUMNS = ("tag_kind", "tag_wheel", "tag_param_json")


def parse_kinds(text: str | Sequence[str]) -> tuple[str, ...]:
    """``"gwn,step"`` or ``"all"`` -> canonical kind names, in canonical order."""
    names = text.split(",") if isinstance(text, str) else list(text)
    names = [n.strip().lower() for n in names if n.strip()]
    if not names:
        raise ConfigError("no anomaly kinds given")
    if "all" in names:
        return KINDS
    unknown = [n for n in names if n not in _CLI_NAMES]
    if unknown:
        raise ConfigError(f"unknown anomaly kind(s) {unknown}; expected gwn|offset|impulse|psa|step|all")
    return tuple(k for k in KINDS if k.lower() in names)


@dataclass(frozen=True)
class AnomalyTag:
    """Ground truth for one chunk.

    ``params`` holds the realized chunk-level draw: ``sign`` (Offset,
    Impulse, Step), ``position`` (Impulse), ``start`` (Step) or ``theta`` (PSA).
    """

    kind: str = NOMINAL
    wheel: int | None = None
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in KINDS and self.kind != NOMINAL:
            raise ConfigError(f"unknown anomaly kind {self.kind!r}")
        if self.kind == NOMINAL and (self.wheel is not None or self.params):
            raise ConfigError("nominal tags carry no wheel or parameters")
        if self.wheel is not None and not 0 <= self.wheel < N_WHEELS:
            raise ConfigError(f"wheel id {self.wheel} out of range")
        if self.kind == "Impulse" and not 0 <= self.params.get("position", 0) < WINDOW:
            raise ConfigError("impulse position out of range")
        if self.kind == "Step" and self.params.get("start", 0) not in (0, 8):
            raise ConfigError("step start must be 0 or 8")
        if self.kind == "PSA" and "theta" in self.params and not 0 <= self.params["theta"] <= math.pi:
            raise ConfigError("PSA angle must lie in [0, pi]")


@dataclass(frozen=True)
class IntensityCalibration:
    nominal_energy: float
    intensity: dict[str, float]

    def __post_init__(self) -> None:
        for kind, a in self.intensity.items():
            if not a > 0:
                raise ConfigError(f"intensity for {kind} must be positive, got {a}")
        if self.intensity.get("PSA", 1.0) > 2.0:
            raise ConfigError("PSA intensity must not exceed 2")

    @property
    def theta(self) -> float:
        """PSA rotation angle; a rotation by theta perturbs w by a^2 ||w||^2."""
        a = self.intensity["PSA"]
        return math.acos(1.0 - a * a / 2.0)


def calibrate(train: Dataset) -> IntensityCalibration:
    """Pick per-kind intensities giving 0 dB perturbation-to-signal energy."""
    if len(train) == 0:
        raise ConfigError("cannot calibrate on an empty dataset")
    if not train.is_nominal:
        raise ConfigError("calibration requires nominal data")
    # mean over chunks and channels of the squared column norm
    energy = float(np.mean(np.sum(train.values**2, axis=1)))
    if energy <= 0:
        raise ConfigError("nominal energy is zero; cannot calibrate intensities")
    intensity = {
        "GWN": math.sqrt(energy / WINDOW),
        "Offset": math.sqrt(energy / WINDOW),
        "Impulse": math.sqrt(energy),
        "PSA": 1.0,
        "Step": math.sqrt(energy / 8),
    }
    return IntensityCalibration(energy, intensity)


# --------------------------------------------------------------------------- injectors


def inject_gwn(w: np.ndarray, a: float, rng: np.random.Generator) -> np.ndarray:
    if a < 0:
        raise ConfigError("intensity must be non-negative")
    w = np.asarray(w, dtype=np.float64)
    return w + a * rng.standard_normal(w.shape)


def inject_offset(w: np.ndarray, a: float, sign: int) -> np.ndarray:
    if a < 0:
        raise ConfigError("intensity must be non-negative")
    return np.asarray(w, dtype=np.float64) + sign * a


def inject_impulse(w: np.ndarray, a: float, sign: int, j: int) -> np.ndarray:
    w = np.array(w, dtype=np.float64)
    if not 0 <= j < len(w):
        raise ConfigError(f"impulse position {j} outside 0..{len(w) - 1}")
    w[j] += sign * a
    return w


def inject_step(w: np.ndarray, a: float, sign: int, i: int) -> np.ndarray:
    w = np.array(w, dtype=np.float64)
    if i not in (0, 8):
        raise ConfigError(f"step start must be 0 or 8, got {i}")
    w[i : i + 8] += sign * a
    return w


def inject_psa(w: np.ndarray, theta: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate ``w`` by ``theta`` inside the plane of ``w`` and a random orthogonal direction.

    The result keeps the norm of ``w`` and makes angle ``theta`` with it.
    A zero column cannot be rotated and is returned unchanged with a warning.
    """
    if not 0 <= theta <= math.pi:
        raise ConfigError(f"rotation angle {theta} outside [0, pi]")
    w = np.asarray(w, dtype=np.float64)
    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        warnings.warn("PSA on a zero column leaves it unchanged", RuntimeWarning, stacklevel=2)
        return w.copy()
    e1 = w / norm
    # Gram-Schmidt twice for a clean orthogonal direction
    u = rng.standard_normal(w.shape)
    u -= (u @ e1) * e1
    u -= (u @ e1) * e1
    u /= np.linalg.norm(u)
    return norm * (math.cos(theta) * e1 + math.sin(theta) * u)


# --------------------------------------------------------------------------- datasets


def chunk_rng(seed: int, origin: int) -> np.random.Generator:
    """Independent stream per chunk, keyed by (seed, origin)."""
    return np.random.default_rng([int(seed), 0xA11, int(origin)])


def corrupt_chunk(x: np.ndarray, kind: str, cal: IntensityCalibration, rng: np.random.Generator,
                  channels: Sequence[int] | None = None) -> tuple[np.ndarray, dict]:
    """Apply ``kind`` to the selected columns of chunk ``x``; returns (x', realized params)."""
    out = np.array(x, dtype=np.float64)
    channels = list(range(N_CHANNELS)) if channels is None else list(channels)
    a = cal.intensity[kind]
    params: dict = {}
    if kind == "GWN":
        for c in channels:
            out[:, c] = inject_gwn(out[:, c], a, rng)
    elif kind == "PSA":
        theta = cal.theta
        params["theta"] = theta
        for c in channels:
            out[:, c] = inject_psa(out[:, c], theta, rng)
    else:
        # one draw per chunk, shared by every corrupted column
        sign = int(rng.choice([-1, 1]))
        params["sign"] = sign
        if kind == "Offset":
            for c in channels:
                out[:, c] = inject_offset(out[:, c], a, sign)
        elif kind == "Impulse":
            j = int(rng.integers(0, WINDOW))
            params["position"] = j
            for c in channels:
                out[:, c] = inject_impulse(out[:, c], a, sign, j)
        elif kind == "Step":
            i = int(rng.choice([0, 8]))
            params["start"] = i
            for c in channels:
                out[:, c] = inject_step(out[:, c], a, sign, i)
        else:
            raise ConfigError(f"unknown anomaly kind {kind!r}")
    return out, params


def balanced_kinds(n: int, kinds: Sequence[str], seed: int) -> list[str]:
    """Exactly balanced (to within one) kind assignment in a seeded random order."""
    kinds = list(kinds)
    assigned = [kinds[i % len(kinds)] for i in range(n)]
    order = np.random.default_rng([int(seed), 0xBA1]).permutation(n)
    return [assigned[i] for i in order]


def corrupt_dataset(ds: Dataset, scenario: str, cal: IntensityCalibration, seed: int,
                    kinds: Sequence[str] = KINDS) -> Dataset:
    """Corrupt every chunk of a nominal dataset, kinds balanced across chunks.

    Each chunk draws its wheel (scenario II), sign, position and noise from
    its own RNG stream keyed by ``(seed, origin)``, so results do not depend
    on processing order.
    """
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be I or II, got {scenario!r}")
    if len(ds) == 0:
        raise ConfigError("cannot corrupt an empty dataset")
    if not ds.is_nominal:
        raise ConfigError("corrupt_dataset expects nominal input")
    kinds = tuple(kinds)
    assignment = balanced_kinds(len(ds), kinds, seed)
    values = np.empty_like(ds.values)
    tags = []
    for n, (x, origin, kind) in enumerate(zip(ds.values, ds.origins, assignment)):
        rng = chunk_rng(seed, origin)
        wheel = None
        channels = None
        if scenario == "II":
            wheel = int(rng.integers(0, N_WHEELS))
            channels = range(N_CHANNELS)[wheel_channels(wheel)]
        values[n], params = corrupt_chunk(x, kind, cal, rng, channels)
        tags.append(AnomalyTag(kind, wheel, params))
    return Dataset(values, ds.origins, ds.split, tuple(tags))


def replicate_seed(seed: int, replicate: int) -> int:
    """Seed of corruption replicate ``replicate``; replicate 0 keeps ``seed`` itself."""
    if replicate == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed), 0x5EED, int(replicate)]).generate_state(1, np.uint64)[0])


def corrupt_replicates(ds: Dataset, scenario: str, cal: IntensityCalibration, seed: int,
                       replicates: int = 1, kinds: Sequence[str] = KINDS) -> Dataset:
    """``replicates`` independent corruptions of ``ds`` stacked into one dataset.

    Every replicate is a full :func:`corrupt_dataset` draw with its own seed,
    so the clean chunks repeat while anomaly draws differ.
    """
    if replicates < 1:
        raise ConfigError("replicates must be at least 1")
    parts = [corrupt_dataset(ds, scenario, cal, replicate_seed(seed, r), kinds) for r in range(replicates)]
    return parts[0] if replicates == 1 else concat_datasets(parts)


def perturbation_energy(clean: Dataset, corrupted: Dataset) -> dict[str, float]:
    """Mean ``||w' - w||^2`` over corrupted columns, per kind."""
    diff = np.sum((corrupted.values - clean.values) ** 2, axis=1)  # (n, channels)
    out: dict[str, list[float]] = {}
    for row, tag in zip(diff, corrupted.labels or ()):
        if tag.kind == NOMINAL:
            continue
        cols = row if tag.wheel is None else row[wheel_channels(tag.wheel)]
        out.setdefault(tag.kind, []).extend(cols.tolist())
    return {k: float(np.mean(v)) for k, v in out.items()}


# --------------------------------------------------------------------------- labeled CSV


def write_labeled_csv(path: str | Path, ds: Dataset) -> None:
    """Telemetry CSV plus ``tag_kind, tag_wheel, tag_param_json`` repeated on every row of a chunk."""
    if ds.labels is None:
        labels = [AnomalyTag()] * len(ds)
    else:
        labels = [t if t is not None else AnomalyTag() for t in ds.labels]
    extra = []
    for tag in labels:
        cells = [tag.kind, "" if tag.wheel is None else str(tag.wheel),
                 json.dumps(tag.params, sort_keys=True, separators=(",", ":"))]
        extra.extend([cells] * WINDOW)
    write_csv(path, ds.to_stream(), extra=extra, extra_header=LABEL_COLUMNS)


def read_labeled_csv(path: str | Path, split: str | None = None) -> Dataset:
    stream, extras = read_csv_rows(path, LABEL_COLUMNS)
    if len(stream) % WINDOW:
        raise ArtifactError(f"{path}: {len(stream)} rows is not a multiple of {WINDOW}")
    n = len(stream) // WINDOW
    tags = []
    for k in range(n):
        block = extras[k * WINDOW : (k + 1) * WINDOW]
        if any(cells != block[0] for cells in block):
            raise ArtifactError(f"{path}: chunk starting at row {k * WINDOW + 2} has inconsistent tags")
        kind, wheel, params = block[0]
        try:
            tags.append(AnomalyTag(kind, int(wheel) if wheel else None, json.loads(params)))
        except (ValueError, ConfigError) as exc:
            raise ArtifactError(f"{path}: bad tag on row {k * WINDOW + 2}: {exc}") from exc
    values = stream.values.reshape(n, WINDOW, N_CHANNELS)
    return Dataset(values, stream.sample_index[::WINDOW], split, tuple(tags))


def inject_event(stream: TelemetryStream, start: int, kind: str, cal: IntensityCalibration,
                 rng: np.random.Generator, length: int = 8) -> TelemetryStream:
    """Add a ``length``-sample signed step (or offset) event on all channels of a stream.

    Used for streaming-explanation demos; the per-channel amplitude is the
    calibrated Step intensity.
    """
    if kind not in ("Step", "Offset"):
        raise ConfigError("stream events support Step or Offset only")
    if not 0 <= start <= len(stream) - length:
        raise ConfigError("event does not fit in the stream")
    values = np.array(stream.values)
    sign = rng.choice([-1, 1])
    values[start : start + length] += sign * cal.intensity[kind]
    return TelemetryStream(stream.sample_index, values)
