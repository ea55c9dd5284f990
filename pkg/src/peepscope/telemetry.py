"""Reaction-wheel telemetry: data model, chunking, splits, CSV I/O, generator.

The mission data the detector was designed for is not public, so a seeded
generator produces 16-channel streams (four reaction wheels, four signal kinds
each) made of sinusoid mixtures, AR(1) noise and an optional linear drift.

Arrays follow one convention throughout: a stream is ``(n_samples, 16)`` and a
chunk is ``(16 time samples, 16 channels)``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from peepscope.errors import ArtifactError, ConfigError, ParseError

logger = logging.getLogger(__name__)

WINDOW = 16
N_CHANNELS = 16
N_WHEELS = 4
SIGNALS_PER_WHEEL = 4
SPLITS = ("train", "validation", "test")
SIGNAL_KINDS = ("motor_current", "wheel_speed", "torque", "temperature")

CSV_HEADER = ["sample_index"] + [f"ch{c:02d}" for c in range(N_CHANNELS)]


def channel_map() -> dict[int, tuple[int, int]]:
    """Channel index -> (wheel id, signal kind); channels 4k..4k+3 belong to wheel k."""
    return {c: divmod(c, SIGNALS_PER_WHEEL) for c in range(N_CHANNELS)}


def wheel_channels(wheel: int) -> slice:
    return slice(SIGNALS_PER_WHEEL * wheel, SIGNALS_PER_WHEEL * (wheel + 1))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TelemetryChunk:
    values: np.ndarray
    origin: int = 0
    channel_map: dict[int, tuple[int, int]] = field(default_factory=channel_map)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (WINDOW, N_CHANNELS):
            raise ConfigError(f"chunk must be {WINDOW}x{N_CHANNELS}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ConfigError(f"chunk at origin {self.origin} has non-finite values")
        if sorted(self.channel_map) != list(range(N_CHANNELS)):
            raise ConfigError("channel_map must cover channels 0..15")
        object.__setattr__(self, "values", _readonly(values))


@dataclass(frozen=True)
class Dataset:
    """An ordered, immutable stack of chunks.

    ``values`` has shape ``(n, 16, 16)``; ``origins`` holds the stream offset of
    each chunk's first sample. ``labels`` is either None (nominal data) or one
    :class:`peepscope.anomaly.AnomalyTag` per chunk.
    """

    values: np.ndarray
    origins: np.ndarray
    split: str | None = None
    labels: tuple[Any, ...] | None = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[1:] != (WINDOW, N_CHANNELS):
            if values.size == 0:
                values = values.reshape(0, WINDOW, N_CHANNELS)
            else:
                raise ConfigError(f"dataset values must be (n, 16, 16), got {values.shape}")
        origins = np.asarray(self.origins, dtype=np.int64).reshape(-1)
        if len(origins) != len(values):
            raise ConfigError("origins and values disagree in length")
        if self.split is not None and self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")
        if self.labels is not None:
            if len(self.labels) != len(values):
                raise ConfigError("labels and values disagree in length")
            object.__setattr__(self, "labels", tuple(self.labels))
        if self.split == "train" and not self.is_nominal:
            raise ConfigError("train split must contain only nominal chunks")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "origins", _readonly(origins))

    @property
    def is_nominal(self) -> bool:
        if self.labels is None:
            return True
        return all(tag is None or getattr(tag, "kind", "Nominal") == "Nominal" for tag in self.labels)

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i: int) -> TelemetryChunk:
        return TelemetryChunk(self.values[i], int(self.origins[i]))

    def __iter__(self) -> Iterator[TelemetryChunk]:
        for i in range(len(self)):
            yield self[i]

    def with_split(self, split: str) -> Dataset:
        return replace(self, split=split)

    def subset(self, index: np.ndarray | slice) -> Dataset:
        labels = None
        if self.labels is not None:
            labels = tuple(self.labels[i] for i in np.arange(len(self))[index])
        return Dataset(self.values[index], self.origins[index], self.split, labels)

    def to_stream(self) -> TelemetryStream:
        """Concatenate chunk rows (meaningful for non-overlapping chunks)."""
        n = len(self)
        values = self.values.reshape(n * WINDOW, N_CHANNELS)
        index = (self.origins[:, None] + np.arange(WINDOW)[None, :]).reshape(-1)
        return TelemetryStream(index, values)


def concat_datasets(parts: Sequence[Dataset], split: str | None = None) -> Dataset:
    """Stack datasets in order; labels are kept only if every part has them."""
    parts = list(parts)
    if not parts:
        raise ConfigError("nothing to concatenate")
    labels = None
    if all(p.labels is not None for p in parts):
        labels = tuple(t for p in parts for t in p.labels)
    values = np.concatenate([p.values for p in parts])
    origins = np.concatenate([p.origins for p in parts])
    return Dataset(values, origins, split if split is not None else parts[0].split, labels)


@dataclass(frozen=True)
class TelemetryStream:
    sample_index: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64).reshape(-1, N_CHANNELS)
        index = np.asarray(self.sample_index, dtype=np.int64).reshape(-1)
        if len(index) != len(values):
            raise ConfigError("sample_index and values disagree in length")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "sample_index", _readonly(index))

    def __len__(self) -> int:
        return len(self.values)


# --------------------------------------------------------------------------- generator


@dataclass(frozen=True)
class ChannelParams:
    amplitudes: tuple[float, ...] = ()
    frequencies: tuple[float, ...] = ()
    phases: tuple[float, ...] = ()
    ar_coef: float = 0.0
    noise_scale: float = 0.0
    drift: float = 0.0
    mean: float = 0.0

    def __post_init__(self) -> None:
        n = len(self.amplitudes)
        if len(self.frequencies) != n or len(self.phases) != n:
            raise ConfigError("amplitudes, frequencies and phases must have equal length")
        if not abs(self.ar_coef) < 1.0:
            raise ConfigError(f"AR(1) coefficient must satisfy |phi| < 1, got {self.ar_coef}")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be non-negative")


def default_channels() -> tuple[ChannelParams, ...]:
    """Four wheels with distinct rotation periods; per wheel: current, speed, torque, temperature.

    Every period (25, 31, 37, 43 samples and their multiples below) is odd, so
    coprime with the 16-sample window: non-overlapping training chunks then see
    every phase offset that a stride-1 sliding window meets at inference.
    """
    channels = []
    for k in range(N_WHEELS):
        f = 1.0 / (25.0 + 6.0 * k)
        channels += [
            ChannelParams((1.0, 0.35), (f, 2 * f), (0.3 * k, 1.1 * k), ar_coef=0.8, noise_scale=0.05),
            ChannelParams((1.0,), (f / 5,), (0.7 * k,), ar_coef=0.95, noise_scale=0.02, mean=1.0),
            ChannelParams((0.8, 0.3), (f, 3 * f), (math.pi / 2 + 0.3 * k, 0.5 * k), ar_coef=0.7, noise_scale=0.05),
            ChannelParams((0.6,), (f / 23,), (1.3 * k,), ar_coef=0.99, noise_scale=0.01, mean=0.8),
        ]
    return tuple(channels)


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n_samples: int = 4096
    channels: tuple[ChannelParams, ...] = field(default_factory=default_channels)
    sample_rate: float = 1.0
    burn_in: int = 100
    start_index: int = 0

    def __post_init__(self) -> None:
        if len(self.channels) != N_CHANNELS:
            raise ConfigError(f"generator needs {N_CHANNELS} channel specs, got {len(self.channels)}")
        if self.n_samples < 0 or self.burn_in < 0:
            raise ConfigError("n_samples and burn_in must be non-negative")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")


def generate_stream(cfg: GeneratorConfig) -> TelemetryStream:
    """Draw ``cfg.n_samples`` samples of 16-channel telemetry, deterministic in ``cfg.seed``.

    AR(1) noise runs for ``burn_in`` extra samples which are discarded, so the
    returned noise is (close to) stationary from the first sample.
    """
    rng = np.random.default_rng(cfg.seed)
    total = cfg.burn_in + cfg.n_samples
    innovations = rng.standard_normal((total, N_CHANNELS))
    index = cfg.start_index + np.arange(cfg.n_samples, dtype=np.int64)
    t = index / cfg.sample_rate
    out = np.empty((cfg.n_samples, N_CHANNELS))
    for c, p in enumerate(cfg.channels):
        noise = lfilter([p.noise_scale], [1.0, -p.ar_coef], innovations[:, c])[cfg.burn_in :]
        signal = np.full(cfg.n_samples, p.mean) + p.drift * t
        for amp, freq, phase in zip(p.amplitudes, p.frequencies, p.phases):
            signal += amp * np.sin(2 * np.pi * freq * t + phase)
        out[:, c] = signal + noise
    return TelemetryStream(index, out)


# --------------------------------------------------------------------------- chunking


def chunk_stream(stream: TelemetryStream | np.ndarray, window: int = WINDOW, stride: int = WINDOW) -> Dataset:
    """Cut a stream into ``window``-sample chunks every ``stride`` samples.

    Chunk t covers rows ``[t*stride, t*stride + window)``; its origin is the
    stream's sample index at that row.
    """
    if not isinstance(stream, TelemetryStream):
        values = np.asarray(stream, dtype=np.float64)
        stream = TelemetryStream(np.arange(len(values)), values)
    if window != WINDOW:
        raise ConfigError(f"only window={WINDOW} is supported")
    if stride < 1:
        raise ConfigError(f"stride must be a positive integer, got {stride}")
    n = len(stream)
    if n < window:
        raise ConfigError(f"stream of {n} samples is shorter than the {window}-sample window")
    windows = sliding_window_view(stream.values, window, axis=0)[::stride]
    values = np.ascontiguousarray(windows.transpose(0, 2, 1))
    origins = stream.sample_index[: n - window + 1 : stride]
    return Dataset(values, origins)


def split_dataset(chunks: Dataset, fractions: Sequence[float] = (0.72, 0.18, 0.10)) -> tuple[Dataset, Dataset, Dataset]:
    """Contiguous train/validation/test split preserving temporal order.

    Train and validation sizes are floored; test takes the remainder.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(chunks)
    n_train = math.floor(n * fractions[0] + 1e-9)
    n_val = math.floor(n * fractions[1] + 1e-9)
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(f"split of {n} chunks by {tuple(fractions)} leaves an empty split")
    bounds = [0, n_train, n_train + n_val, n]
    return tuple(  # type: ignore[return-value]
        chunks.subset(slice(lo, hi)).with_split(name)
        for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:])
    )


# --------------------------------------------------------------------------- CSV


def _format(x: float) -> str:
    return repr(float(x))


def write_csv(path: str | Path, stream: TelemetryStream, extra: Sequence[Sequence[str]] | None = None,
              extra_header: Sequence[str] = ()) -> None:
    """Write ``sample_index,ch00..ch15`` rows, optionally followed by extra string columns."""
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER + list(extra_header))
            for r in range(len(stream)):
                row = [str(int(stream.sample_index[r]))] + [_format(v) for v in stream.values[r]]
                if extra is not None:
                    row += list(extra[r])
                writer.writerow(row)
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc


def read_csv_rows(path: str | Path, extra_columns: Sequence[str] = ()) -> tuple[TelemetryStream, list[list[str]]]:
    """Parse a telemetry CSV; returns the stream and the raw extra-column cells per row."""
    path = Path(path)
    try:
        fh = path.open("r", encoding="utf-8", newline="")
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(path, 1, "missing header row")
        header = [h.strip() for h in header]
        expected = CSV_HEADER + list(extra_columns)
        missing = [name for name in expected if name not in header]
        if missing:
            raise ParseError(path, 1, f"missing column(s): {', '.join(missing)}")
        cols = [header.index(name) for name in CSV_HEADER]
        extra_cols = [header.index(name) for name in extra_columns]
        index: list[int] = []
        rows: list[list[float]] = []
        extras: list[list[str]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(path, lineno, f"expected {len(header)} cells, got {len(row)}")
            try:
                sample = int(row[cols[0]])
            except ValueError:
                raise ParseError(path, lineno, f"non-integer sample_index {row[cols[0]]!r}") from None
            if index and sample <= index[-1]:
                raise ParseError(path, lineno, f"sample_index {sample} is not increasing")
            values = []
            for name, c in zip(CSV_HEADER[1:], cols[1:]):
                try:
                    v = float(row[c])
                except ValueError:
                    raise ParseError(path, lineno, f"non-numeric value {row[c]!r} in column {name}") from None
                if not math.isfinite(v):
                    raise ParseError(path, lineno, f"non-finite value in column {name}")
                values.append(v)
            index.append(sample)
            rows.append(values)
            extras.append([row[c] for c in extra_cols])
    values_arr = np.array(rows, dtype=np.float64).reshape(-1, N_CHANNELS)
    return TelemetryStream(np.array(index, dtype=np.int64), values_arr), extras


def read_csv(path: str | Path) -> TelemetryStream:
    return read_csv_rows(path)[0]


def read_split(path: str | Path, split: str | None = None) -> Dataset:
    """Read a split CSV written by :func:`write_split` back into non-overlapping chunks."""
    stream = read_csv(path)
    if len(stream) % WINDOW:
        raise ArtifactError(f"{path}: {len(stream)} rows is not a multiple of {WINDOW}")
    if len(stream) == 0:
        return Dataset(np.empty((0, WINDOW, N_CHANNELS)), np.empty(0, np.int64), split)
    n = len(stream) // WINDOW
    values = stream.values.reshape(n, WINDOW, N_CHANNELS)
    origins = stream.sample_index[::WINDOW]
    return Dataset(values, origins, split)


def write_split(path: str | Path, ds: Dataset) -> None:
    write_csv(path, ds.to_stream())
