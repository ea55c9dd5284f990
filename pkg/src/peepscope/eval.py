"""Evaluation: AUC, confusion matrices, wheel-bias panels, heatmap export, stream explanation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from peepscope.anomaly import KINDS, WHEEL_TAGS
from peepscope.autoencoder import AutoencoderModel, iter_forward
from peepscope.errors import ArtifactError, ConfigError
from peepscope.peephole import PeepholePipeline
from peepscope.telemetry import WINDOW, TelemetryStream, chunk_stream

logger = logging.getLogger(__name__)

# panel order of the wheel-identification figure
BIAS_PANELS = ("overall", "Offset", "GWN", "Impulse", "PSA", "Step")


@dataclass(frozen=True)
class AucResult:
    value: float
    n_nominal: int
    n_anomalous: int
    scenario: str = ""
    kind: str = ""


def auc(scores_nominal: Sequence[float], scores_anomalous: Sequence[float], scenario: str = "",
        kind: str = "") -> AucResult:
    """Probability that a nominal score is below an anomalous one, ties counted half.

    Computed from the Mann-Whitney rank sum in O(n log n).
    """
    nom = np.asarray(scores_nominal, dtype=np.float64).ravel()
    ano = np.asarray(scores_anomalous, dtype=np.float64).ravel()
    if len(nom) == 0 or len(ano) == 0:
        raise ConfigError("AUC needs non-empty nominal and anomalous score lists")
    ranks = rankdata(np.concatenate([nom, ano]))
    u = ranks[len(nom):].sum() - len(ano) * (len(ano) + 1) / 2.0
    return AucResult(float(u / (len(nom) * len(ano))), len(nom), len(ano), scenario, kind)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true tags, columns predicted tags; ``probs`` is row-normalized."""

    labels: tuple[str, ...]
    counts: np.ndarray
    probs: np.ndarray
    empty_rows: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / max(self.total, 1))

    def mean_diagonal(self) -> float:
        return float(np.mean(np.diag(self.probs)[~self.empty_rows]))

    def bias_index(self) -> float:
        """Largest predicted-column mean minus chance (1/number of labels)."""
        rows = self.probs[~self.empty_rows]
        if len(rows) == 0:
            return 0.0
        return float(rows.mean(axis=0).max() - 1.0 / len(self.labels))


def confusion(true_tags: Sequence, predicted_tags: Sequence, vocabulary: Sequence[str]) -> ConfusionMatrix:
    """Count then row-normalize. Tags may be names from ``vocabulary`` or integer indices."""
    vocab = tuple(vocabulary)
    lookup = {name: i for i, name in enumerate(vocab)}

    def index(tag) -> int:
        if isinstance(tag, (int, np.integer)) and not isinstance(tag, bool):
            if 0 <= tag < len(vocab):
                return int(tag)
        elif tag in lookup:
            return lookup[tag]
        raise ConfigError(f"tag {tag!r} is not in the vocabulary {vocab}")

    if len(true_tags) != len(predicted_tags):
        raise ConfigError("true and predicted tag lists differ in length")
    counts = np.zeros((len(vocab), len(vocab)), dtype=np.int64)
    for t, p in zip(true_tags, predicted_tags):
        counts[index(t), index(p)] += 1
    totals = counts.sum(axis=1, keepdims=True)
    empty = totals[:, 0] == 0
    probs = counts / np.where(totals == 0, 1, totals)
    return ConfusionMatrix(vocab, counts, probs, empty)


@dataclass
class BiasReport:
    panels: dict[str, ConfusionMatrix] = field(default_factory=dict)

    @property
    def bias_index(self) -> dict[str, float]:
        return {k: m.bias_index() for k, m in self.panels.items()}


def bias_report(wheel_true: Sequence[int], wheel_pred: Sequence[int], kinds_true: Sequence[str]) -> BiasReport:
    """Overall wheel confusion plus one panel per anomaly kind present."""
    wheel_true = np.asarray(wheel_true)
    wheel_pred = np.asarray(wheel_pred)
    kinds_true = np.asarray(kinds_true, dtype=object)
    report = BiasReport()
    report.panels["overall"] = confusion(wheel_true.tolist(), wheel_pred.tolist(), WHEEL_TAGS)
    for kind in BIAS_PANELS[1:]:
        mask = kinds_true == kind
        if not mask.any():
            warnings.warn(f"no {kind} reports; panel omitted", RuntimeWarning, stacklevel=2)
            continue
        report.panels[kind] = confusion(wheel_true[mask].tolist(), wheel_pred[mask].tolist(), WHEEL_TAGS)
    return report


# --------------------------------------------------------------------------- heatmaps


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _shade(v: float, vmax: float) -> str:
    level = 0.0 if vmax <= 0 else min(max(v / vmax, 0.0), 1.0)
    g = int(round(255 * (1.0 - level)))
    return f"#{g:02x}{g:02x}{g:02x}"


def heatmap_svg(matrix: np.ndarray, row_labels: Sequence[str] | None = None,
                col_labels: Sequence[str] | None = None, cell: int = 24, title: str = "") -> str:
    """Standalone SVG grid; darker cells hold larger values.

    Values in [0, 1] use a fixed 0..1 scale so probability maps are comparable;
    anything else is scaled by its maximum.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise ConfigError("heatmap needs a finite 2-D matrix")
    vmax = 1.0 if m.size == 0 or (m.min() >= 0 and m.max() <= 1) else float(np.abs(m).max())
    left = 60 if row_labels is not None else 4
    top = (20 if title else 4) + (20 if col_labels is not None else 0)
    rows, cols = m.shape
    width, height = left + cols * cell + 4, top + rows * cell + 4
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if title:
        out.append(f'<text x="{left}" y="14" font-family="sans-serif" font-size="12">{title}</text>')
    if col_labels is not None:
        for j, name in enumerate(col_labels):
            out.append(f'<text x="{left + j * cell + cell // 2}" y="{top - 6}" font-family="sans-serif" '
                       f'font-size="9" text-anchor="middle">{name}</text>')
    for i in range(rows):
        if row_labels is not None:
            out.append(f'<text x="{left - 4}" y="{top + i * cell + cell // 2 + 3}" font-family="sans-serif" '
                       f'font-size="9" text-anchor="end">{row_labels[i]}</text>')
        for j in range(cols):
            out.append(f'<rect class="cell" x="{left + j * cell}" y="{top + i * cell}" width="{cell}" '
                       f'height="{cell}" fill="{_shade(m[i, j], vmax)}" stroke="#cccccc" stroke-width="0.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_heatmap(matrix: np.ndarray, path: str | Path, row_labels: Sequence[str] | None = None,
                   col_labels: Sequence[str] | None = None, title: str = "") -> tuple[Path, Path]:
    """Write ``<path>.csv`` (raw values) and ``<path>.svg``; returns both paths."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".svg", ".csv") else path
    m = np.asarray(matrix, dtype=np.float64)
    svg = heatmap_svg(m, row_labels, col_labels, title=title)
    csv_text = "\n".join(",".join(_fmt(v) for v in row) for row in m) + "\n"
    csv_path, svg_path = base.with_suffix(".csv"), base.with_suffix(".svg")
    try:
        csv_path.write_text(csv_text, encoding="utf-8")
        svg_path.write_text(svg, encoding="utf-8")
    except OSError as exc:
        raise ArtifactError(f"cannot write heatmap to {base}: {exc}") from exc
    return csv_path, svg_path


def read_matrix_csv(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    return np.array([[float(c) for c in line.split(",")] for line in lines])


def confusion_csv(cm: ConfusionMatrix) -> str:
    lines = ["true\\pred," + ",".join(cm.labels)]
    lines += [name + "," + ",".join(_fmt(v) for v in row) for name, row in zip(cm.labels, cm.probs)]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- streaming explanation


@dataclass
class StreamTrace:
    """Per-window detector output; unflagged windows carry an all-zero peephole."""

    origins: np.ndarray
    scores: np.ndarray
    flags: np.ndarray
    peepholes: np.ndarray
    d_argmax: np.ndarray
    vocabulary: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def tag_pred(self) -> list[str]:
        return [self.vocabulary[int(np.argmax(p))] if f else "" for p, f in zip(self.peepholes, self.flags)]

    def to_csv(self) -> str:
        T = len(self.vocabulary)
        header = ["origin", "score", "flag", "tag_pred"] + [f"p_{i}" for i in range(T)] + ["d_argmax"]
        lines = [",".join(header)]
        for o, s, f, tag, p, d in zip(self.origins, self.scores, self.flags, self.tag_pred, self.peepholes,
                                      self.d_argmax):
            lines.append(",".join([str(int(o)), _fmt(s), str(int(f)), tag] + [_fmt(v) for v in p] + [str(int(d))]))
        return "\n".join(lines) + "\n"

    def dominant_tag(self, lo: int, hi: int) -> str | None:
        """Argmax of the mean peephole over flagged windows whose span meets samples [lo, hi)."""
        span = (self.origins + WINDOW > lo) & (self.origins < hi) & self.flags
        if not span.any():
            return None
        return self.vocabulary[int(np.argmax(self.peepholes[span].mean(axis=0)))]


def explain_stream(model: AutoencoderModel, pipeline: PeepholePipeline, stream: TelemetryStream,
                   stride: int = 1) -> StreamTrace:
    """Slide the detector over a stream; peepholes only for flagged windows."""
    if len(stream) < WINDOW:
        raise ConfigError(f"stream needs at least {WINDOW} samples")
    windows = chunk_stream(stream, WINDOW, stride)
    T = len(pipeline.vocabulary)
    scores, peeps, dmax = [], [], []
    for s, _, _, h in iter_forward(model, windows):
        flags = s > model.threshold
        p = np.zeros((len(s), T))
        da = np.full(len(s), -1, dtype=np.int64)
        if flags.any():
            d, pf, _ = pipeline.vectors(h[flags])
            p[flags] = pf
            da[flags] = np.argmax(d, axis=1)
        scores.append(s)
        peeps.append(p)
        dmax.append(da)
    scores_arr = np.concatenate(scores)
    return StreamTrace(np.asarray(windows.origins), scores_arr, scores_arr > model.threshold,
                       np.concatenate(peeps), np.concatenate(dmax), tuple(pipeline.vocabulary))


def export_stream(trace: StreamTrace, out_dir: str | Path, stream: TelemetryStream | None = None,
                  threshold: float | None = None) -> dict[str, Path]:
    """Write ``stream_trace.csv``, the peephole heatmap and (with a stream) the three-band figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"trace": out_dir / "stream_trace.csv"}
    paths["trace"].write_text(trace.to_csv(), encoding="utf-8")
    csv_path, svg_path = export_heatmap(trace.peepholes.T, out_dir / "stream_peepholes",
                                        row_labels=trace.vocabulary)
    paths.update(heatmap_csv=csv_path, heatmap_svg=svg_path)
    if stream is not None:
        from peepscope.plotting import plot_stream_explanation

        fig_dir = out_dir / "figures"
        fig_dir.mkdir(exist_ok=True)
        paths["figure"] = plot_stream_explanation(stream, trace, fig_dir / "stream_explanation.png", threshold)
    return paths
