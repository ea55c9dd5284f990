"""Experiment stages behind the CLI.

Each stage reads its inputs from an output directory, checks them against the
hash registry ``artifacts.json`` and registers what it writes, together with
the hashes of the inputs it consumed. ``run_manifest.json`` collects seeds,
the config digest, artifact hashes and per-stage timestamps; it is the only
file in a run directory that carries wall-clock time.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from peepscope import anomaly as an
from peepscope import autoencoder as ae
from peepscope import eval as ev
from peepscope import peephole as ph
from peepscope import plotting
from peepscope.config import RunConfig, stage_seed
from peepscope.errors import ArtifactError, ConfigError
from peepscope.telemetry import (
    GeneratorConfig,
    chunk_stream,
    concat_datasets,
    generate_stream,
    read_csv,
    read_split,
    split_dataset,
    write_csv,
    write_split,
)

logger = logging.getLogger(__name__)

REGISTRY = "artifacts.json"
MANIFEST = "run_manifest.json"
SPLIT_FILES = {"train": "train.csv", "validation": "val.csv", "test": "test.csv"}
TAG_SCENARIO = {"kinds": "I", "wheels": "II"}


# --------------------------------------------------------------------------- registry


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


class Run:
    """One output directory: file registry, manifest and hash-chain checks."""

    def __init__(self, cfg: RunConfig, out: str | Path | None = None) -> None:
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "figures").mkdir(exist_ok=True)
        torch.set_num_threads(cfg.threads)

    # registry --------------------------------------------------------------

    def registry(self) -> dict:
        path = self.out / REGISTRY
        if not path.exists():
            return {}
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ArtifactError(f"{path}: corrupt artifact registry: {exc}") from exc

    def path(self, name: str) -> Path:
        return self.out / name

    def register(self, stage: str, names: Sequence[str], inputs: Sequence[str] = ()) -> None:
        reg = self.registry()
        consumed = {n: reg[n]["sha256"] for n in inputs}
        for name in names:
            reg[name] = {"sha256": sha256_file(self.out / name), "stage": stage, "inputs": consumed}
        _dump_json(self.out / REGISTRY, reg)

    def require(self, *names: str) -> list[Path]:
        """Paths of registered inputs after verifying their hashes and upstream links."""
        reg = self.registry()
        paths = []
        for name in names:
            entry = reg.get(name)
            path = self.out / name
            if entry is None or not path.exists():
                raise ArtifactError(f"{path} is missing; run the stage that produces it first")
            actual = sha256_file(path)
            if actual != entry["sha256"]:
                raise ArtifactError(f"{path} does not match the registered hash (modified or from another run)")
            for upstream, digest in entry["inputs"].items():
                if upstream not in reg or reg[upstream]["sha256"] != digest:
                    raise ArtifactError(f"{name} was built from a different {upstream}; rerun its stage")
            paths.append(path)
        return paths

    def verify_chain(self) -> None:
        """Check every registered file and link; raises on the first mismatch."""
        self.require(*sorted(self.registry()))

    # manifest --------------------------------------------------------------

    def stamp(self, stage: str, **info) -> None:
        path = self.out / MANIFEST
        manifest = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
        cfg = self.cfg
        manifest.update(
            config_digest=cfg.digest(),
            config=cfg.to_dict(),
            seed=cfg.seed,
            stage_seeds=stage_seeds(cfg),
            artifacts={k: v["sha256"] for k, v in sorted(self.registry().items())},
        )
        stages = manifest.setdefault("stages", {})
        stages[stage] = {"completed_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"), **info}
        _dump_json(path, manifest)


def stage_seeds(cfg: RunConfig) -> dict[str, int]:
    s = cfg.seed
    return {
        "generator": stage_seed(s, "generator"),
        "inject_validation_I": stage_seed(s, "inject-validation", 0),
        "inject_validation_II": stage_seed(s, "inject-validation", 1),
        "inject_test_I": stage_seed(s, "inject-test", 0),
        "inject_test_II": stage_seed(s, "inject-test", 1),
        "init": stage_seed(s, "init"),
        "train": stage_seed(s, "train"),
        "gmm_kinds": stage_seed(s, "gmm", 0),
        "gmm_wheels": stage_seed(s, "gmm", 1),
        "stream": stage_seed(s, "stream"),
    }


def _scenario_index(scenario: str) -> int:
    return an.SCENARIOS.index(scenario)


def fit_files(cfg: RunConfig, scenario: str) -> list[str]:
    return [f"val_{scenario}_r{r}.csv" for r in range(cfg.anomaly.fit_replicates)]


# --------------------------------------------------------------------------- stages


def generate(run: Run) -> dict[str, int]:
    """Nominal telemetry, chunked and split into train/validation/test CSVs."""
    cfg = run.cfg
    d = cfg.dataset
    gen = GeneratorConfig(seed=stage_seed(cfg.seed, "generator"), n_samples=16 * d.n_total,
                          sample_rate=cfg.generator.sample_rate, burn_in=cfg.generator.burn_in)
    chunks = chunk_stream(generate_stream(gen))
    parts = split_dataset(chunks, (d.n_train / d.n_total, d.n_validation / d.n_total, d.n_test / d.n_total))
    sizes = {}
    for ds in parts:
        write_split(run.path(SPLIT_FILES[ds.split]), ds)
        sizes[ds.split] = len(ds)
    run.register("generate", list(SPLIT_FILES.values()))
    run.stamp("generate", sizes=sizes)
    logger.info("generated %s chunks", sizes)
    return sizes


def _load_split(run: Run, split: str):
    (path,) = run.require(SPLIT_FILES[split])
    return read_split(path, split)


def inject(run: Run, scenarios: Sequence[str] = an.SCENARIOS, kinds: Sequence[str] | None = None) -> dict:
    """Corrupted validation replicates and corrupted test set per scenario, plus calibration."""
    cfg = run.cfg
    kinds = an.parse_kinds(kinds if kinds is not None else list(cfg.anomaly.kinds))
    train, val, test = (_load_split(run, s) for s in ("train", "validation", "test"))
    cal = an.calibrate(train)
    summary = {"nominal_energy": cal.nominal_energy, "intensity": dict(cal.intensity), "theta": cal.theta,
               "kinds": list(kinds), "energy_ratio": {}}
    written = []
    for scenario in scenarios:
        i = _scenario_index(scenario)
        vseed = stage_seed(cfg.seed, "inject-validation", i)
        for r, name in enumerate(fit_files(cfg, scenario)):
            corrupted = an.corrupt_dataset(val, scenario, cal, an.replicate_seed(vseed, r), kinds)
            an.write_labeled_csv(run.path(name), corrupted)
            written.append(name)
            if r == 0:
                energy = an.perturbation_energy(val, corrupted)
                summary["energy_ratio"][scenario] = {k: energy[k] / cal.nominal_energy for k in kinds}
        corrupted = an.corrupt_dataset(test, scenario, cal, stage_seed(cfg.seed, "inject-test", i), kinds)
        an.write_labeled_csv(run.path(f"test_{scenario}.csv"), corrupted)
        written.append(f"test_{scenario}.csv")
    cal_name = "calibration.json"
    previous = {}
    if run.path(cal_name).exists():
        previous = json.loads(run.path(cal_name).read_text(encoding="utf-8")).get("energy_ratio", {})
    summary["energy_ratio"] = {**previous, **summary["energy_ratio"]}
    _dump_json(run.path(cal_name), summary)
    run.register("inject", written + [cal_name], inputs=list(SPLIT_FILES.values()))
    run.stamp("inject", scenarios=list(scenarios), kinds=list(kinds))
    return summary


def train(run: Run, small: bool = False) -> ae.TrainHistory:
    cfg = run.cfg
    t = cfg.train
    arch = ae.SMALL_ARCHITECTURE if small or t.architecture == "small" else ae.DEFAULT_ARCHITECTURE
    train_ds, val = _load_split(run, "train"), _load_split(run, "validation")
    model = ae.build_model(arch, seed=stage_seed(cfg.seed, "init"))
    tcfg = ae.TrainConfig(learning_rate=t.learning_rate, beta1=t.beta1, beta2=t.beta2, eps=t.eps,
                          batch_size=t.batch_size, epochs=t.epochs, patience=t.patience,
                          seed=stage_seed(cfg.seed, "train"))
    logger.info("training %s architecture (%d parameters) on %d chunks", "small" if arch is ae.SMALL_ARCHITECTURE
                else "default", model.n_parameters(), len(train_ds))
    history = ae.train(model, train_ds, val, tcfg)
    tau = ae.choose_threshold(model, val, t.target_fpr)
    ae.save_model(model, run.path("model.peep"))
    history.write_csv(run.path("loss_history.csv"))
    names = ["model.peep", "loss_history.csv"]
    if history.epochs:
        plotting.plot_loss_history(history.epochs, history.train_loss, history.val_loss,
                                   run.path("figures/loss_history.png"))
        names.append("figures/loss_history.png")
    run.register("train", names, inputs=["train.csv", "val.csv"])
    run.stamp("train", threshold=tau, epochs_run=len(history.epochs), best_epoch=history.best_epoch,
              n_parameters=model.n_parameters())
    return history


def _read_labeled(run: Run, name: str):
    (path,) = run.require(name)
    return an.read_labeled_csv(path)


def fit_peephole(run: Run, tag_sets: Sequence[str] | None = None) -> dict[str, ph.PeepholePipeline]:
    """Fit one peephole pipeline per tag set on flagged corrupted-validation chunks.

    Anomaly kinds are fitted on scenario I data, wheels on scenario II data.
    """
    cfg = run.cfg
    p = cfg.peephole
    tag_sets = tuple(tag_sets) if tag_sets is not None else p.tag_sets
    (model_path,) = run.require("model.peep")
    model = ae.load_model(model_path)
    model_hash = run.registry()["model.peep"]["sha256"]
    out = {}
    for tag_set in tag_sets:
        if tag_set not in TAG_SCENARIO:
            raise ConfigError(f"unknown tag set {tag_set!r}; expected kinds or wheels")
        scenario = TAG_SCENARIO[tag_set]
        names = fit_files(cfg, scenario)
        ds = concat_datasets([_read_labeled(run, n) for n in names], split="validation")
        seed = stage_seed(cfg.seed, "gmm", ("kinds", "wheels").index(tag_set))
        t0 = time.perf_counter()
        pipeline = ph.fit_pipeline(model, ds, p.kappa, p.C, tag_set, seed=seed, model_hash=model_hash,
                                   restarts=p.restarts, max_iter=p.max_iter)
        logger.info("fitted %s peephole on %d flagged chunks in %.1fs (%d EM iterations)", tag_set,
                    pipeline.meta["n_fit"], time.perf_counter() - t0, pipeline.meta["em_iterations"])
        name = f"pipeline_{tag_set}.pphl"
        ph.save_pipeline(pipeline, run.path(name))
        run.register("fit-peephole", [name], inputs=["model.peep"] + names)
        run.stamp(f"fit-peephole-{tag_set}", **pipeline.meta)
        out[tag_set] = pipeline
    return out


def _load_pipeline(run: Run, tag_set: str, model_hash: str) -> ph.PeepholePipeline:
    (path,) = run.require(f"pipeline_{tag_set}.pphl")
    pipeline = ph.load_pipeline(path)
    if pipeline.model_hash != model_hash:
        raise ArtifactError(f"{path} was fitted on a different detector model")
    return pipeline


def _peepholes(model: ae.AutoencoderModel, pipeline: ph.PeepholePipeline, ds) -> tuple[np.ndarray, np.ndarray,
                                                                                           np.ndarray]:
    """Scores, flags and peepholes of the flagged chunks of ``ds``."""
    scores, peeps = [], []
    for s, _, _, h in ae.iter_forward(model, ds):
        mask = s > model.threshold
        scores.append(s)
        if mask.any():
            peeps.append(pipeline.vectors(h[mask])[1])
    s = np.concatenate(scores)
    p = np.concatenate(peeps) if peeps else np.empty((0, len(pipeline.vocabulary)))
    return s, s > model.threshold, p


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _write_confusion(run: Run, cm: ev.ConfusionMatrix, scope: str, title: str) -> list[str]:
    run.path(f"confusion_{scope}.csv").write_text(ev.confusion_csv(cm), encoding="utf-8")
    ev.export_heatmap(cm.probs, run.path(f"confusion_{scope}"), cm.labels, cm.labels, title=title)
    return [f"confusion_{scope}.csv", f"confusion_{scope}.svg"]


def stream_trial(model: ae.AutoencoderModel, pipeline: ph.PeepholePipeline, cal: an.IntensityCalibration,
                 cfg: RunConfig, trial: int, stride: int | None = None):
    """One streaming-explanation trial: fresh nominal stream with one injected event.

    Returns ``(stream, trace, event_start, event_end)``.
    """
    e = cfg.eval
    seed = stage_seed(cfg.seed, "stream", trial)
    stream = generate_stream(GeneratorConfig(seed=seed, n_samples=e.stream_samples,
                                             sample_rate=cfg.generator.sample_rate, burn_in=cfg.generator.burn_in))
    rng = np.random.default_rng([seed, 0xE7])
    margin = 16
    hi = e.stream_samples - e.event_length - margin
    start = int(rng.integers(margin, hi + 1)) if hi > margin else max(0, (e.stream_samples - e.event_length) // 2)
    stream = an.inject_event(stream, start, e.event_kind, cal, rng, e.event_length)
    trace = ev.explain_stream(model, pipeline, stream, stride or e.stride)
    return stream, trace, start, start + e.event_length


def load_calibration(path: str | Path) -> an.IntensityCalibration:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return an.IntensityCalibration(data["nominal_energy"], dict(data["intensity"]))


def evaluate(run: Run) -> dict:
    """AUC table, threshold check, confusion matrices, bias panels and streaming trials."""
    cfg = run.cfg
    (model_path,) = run.require("model.peep")
    model = ae.load_model(model_path)
    model_hash = run.registry()["model.peep"]["sha256"]
    test = _load_split(run, "test")
    nominal = ae.score(model, test)
    fpr = float(np.mean(nominal > model.threshold))
    results: dict = {"threshold": model.threshold, "test_fpr": fpr, "n_test_nominal": len(test)}
    written: list[str] = []
    inputs = ["model.peep", "test.csv"]

    # detection: AUC per scenario and kind
    rows = []
    corrupted = {}
    for scenario in an.SCENARIOS:
        name = f"test_{scenario}.csv"
        if name not in run.registry():
            continue
        ds = _read_labeled(run, name)
        inputs.append(name)
        corrupted[scenario] = ds
        scores = ae.score(model, ds)
        kinds = np.array([t.kind for t in ds.labels])
        for kind in an.KINDS:
            mask = kinds == kind
            if mask.any():
                r = ev.auc(nominal, scores[mask], scenario, kind)
                rows.append(r)
    lines = ["scenario,kind,auc,n_nominal,n_anomalous"]
    lines += [f"{r.scenario},{r.kind},{_fmt(r.value)},{r.n_nominal},{r.n_anomalous}" for r in rows]
    run.path("auc.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append("auc.csv")
    results["auc"] = {f"{r.scenario}/{r.kind}": r.value for r in rows}
    if rows:
        plotting.plot_auc_table([(r.scenario, r.kind, r.value) for r in rows], run.path("figures/auc.png"))
        written.append("figures/auc.png")

    # semantic identification on scenario I
    if "I" in corrupted and "pipeline_kinds.pphl" in run.registry():
        pipeline = _load_pipeline(run, "kinds", model_hash)
        inputs.append("pipeline_kinds.pphl")
        ds = corrupted["I"]
        _, flags, p = _peepholes(model, pipeline, ds)
        true = [t.kind for t, f in zip(ds.labels, flags) if f]
        pred = [pipeline.vocabulary[i] for i in np.argmax(p, axis=1)]
        cm = ev.confusion(true, pred, pipeline.vocabulary)
        written += _write_confusion(run, cm, "kinds_I", "anomaly kind (scenario I)")
        plotting.plot_confusion(cm.probs, cm.labels, run.path("figures/confusion_kinds_I.png"),
                                "anomaly kind, scenario I")
        written.append("figures/confusion_kinds_I.png")
        results["kinds_I"] = _kind_properties(cm)

    # localization on scenario II
    if "II" in corrupted and "pipeline_wheels.pphl" in run.registry():
        pipeline = _load_pipeline(run, "wheels", model_hash)
        inputs.append("pipeline_wheels.pphl")
        ds = corrupted["II"]
        _, flags, p = _peepholes(model, pipeline, ds)
        tags = [t for t, f in zip(ds.labels, flags) if f]
        report = ev.bias_report([t.wheel for t in tags], list(np.argmax(p, axis=1)), [t.kind for t in tags])
        blines = ["panel,bias_index,accuracy,n"]
        for panel, cm in report.panels.items():
            written += _write_confusion(run, cm, f"wheels_II_{panel}", f"wheel ({panel})")
            blines.append(f"{panel},{_fmt(cm.bias_index())},{_fmt(cm.accuracy())},{cm.total}")
        run.path("bias.csv").write_text("\n".join(blines) + "\n", encoding="utf-8")
        written.append("bias.csv")
        plotting.plot_confusion_panels({k: m.probs for k, m in report.panels.items()}, ev.WHEEL_TAGS,
                                       run.path("figures/confusion_wheels_II.png"),
                                       {k: f"bias {m.bias_index():+.2f}" for k, m in report.panels.items()})
        written.append("figures/confusion_wheels_II.png")
        results["wheels_II"] = {
            "accuracy": report.panels["overall"].accuracy(),
            "panels": sorted(report.panels),
            "bias_index": report.bias_index,
        }

    # streaming explanation trials
    if "pipeline_kinds.pphl" in run.registry() and "calibration.json" in run.registry() and cfg.eval.stream_trials:
        (cal_path,) = run.require("calibration.json")
        cal = load_calibration(cal_path)
        inputs.append("calibration.json")
        pipeline = _load_pipeline(run, "kinds", model_hash)
        slines = ["trial,event_start,event_end,flagged_windows,overlap,dominant_tag,aligned_tags,false_flag_rate"]
        passes = aligned_passes = 0
        false_rates = []
        for trial in range(cfg.eval.stream_trials):
            stream, trace, lo, hi = stream_trial(model, pipeline, cal, cfg, trial)
            near = (trace.origins + 16 > lo) & (trace.origins < hi)
            overlap = bool(np.any(trace.flags & near))
            tag = trace.dominant_tag(lo, hi) or ""
            passes += overlap and tag in ("Step", "Offset")
            # diagnostic: windows in which the event fills exactly one half, the only
            # step geometry present in the peephole fitting data
            preds = trace.tag_pred
            aligned = [preds[i] or "-" for i in np.flatnonzero(np.isin(trace.origins, (lo - 8, lo)))]
            aligned_passes += bool(aligned) and all(t in ("Step", "Offset") for t in aligned)
            false_rates.append(float(trace.flags[~near].mean()) if (~near).any() else 0.0)
            slines.append(f"{trial},{lo},{hi},{int(trace.flags.sum())},{int(overlap)},{tag},"
                          f"{'|'.join(aligned)},{false_rates[-1]:.6g}")
            if trial == 0:
                write_csv(run.path("stream_event.csv"), stream)
                paths = ev.export_stream(trace, run.out, stream, model.threshold)
                written += ["stream_event.csv"] + [str(p.relative_to(run.out)) for p in paths.values()]
        run.path("stream_trials.csv").write_text("\n".join(slines) + "\n", encoding="utf-8")
        written.append("stream_trials.csv")
        results["stream"] = {"trials": cfg.eval.stream_trials, "step_or_offset": int(passes),
                             "aligned_step_or_offset": int(aligned_passes),
                             "false_flag_rate": float(np.mean(false_rates))}

    _dump_json(run.path("results.json"), results)
    written.append("results.json")
    run.register("evaluate", written, inputs=inputs)
    run.stamp("evaluate")
    return results


def _kind_properties(cm: ev.ConfusionMatrix) -> dict:
    """Mean diagonal plus the two structural checks on the kind confusion matrix."""
    P = cm.probs
    idx = {k: i for i, k in enumerate(cm.labels)}
    imp = idx["Impulse"]
    psa = idx["PSA"]
    overlap = P[psa, idx["GWN"]] + P[psa, idx["Step"]]
    toward_other = 0.5 * (P[psa, idx["Offset"]] + P[psa, idx["Impulse"]])
    return {
        "mean_diagonal": cm.mean_diagonal(),
        "diagonal": {k: float(P[i, i]) for k, i in idx.items()},
        "impulse_dominant": bool(all(P[imp, imp] >= P[imp, j] for j in range(len(P)) if j != imp)),
        "psa_overlap": float(overlap),
        "psa_toward_offset_impulse": float(toward_other),
        "psa_overlaps_gwn_step": bool(overlap > toward_other),
        "n": cm.total,
    }


def explain(run: Run, stream_path: str | Path | None = None, stride: int | None = None,
            out_name: str = "explain") -> Path:
    """Trace, heatmap and figure for a stream CSV (default: the first evaluation trial stream)."""
    cfg = run.cfg
    (model_path,) = run.require("model.peep")
    model = ae.load_model(model_path)
    pipeline = _load_pipeline(run, "kinds", run.registry()["model.peep"]["sha256"])
    if stream_path is None:
        (cal_path,) = run.require("calibration.json")
        stream, trace, _, _ = stream_trial(model, pipeline, load_calibration(cal_path), cfg, 0, stride)
    else:
        stream = read_csv(stream_path)
        trace = ev.explain_stream(model, pipeline, stream, stride or cfg.eval.stride)
    target = run.out / out_name
    ev.export_stream(trace, target, stream, model.threshold)
    logger.info("%d of %d windows flagged; outputs in %s", int(trace.flags.sum()), len(trace), target)
    return target


def run_all(cfg: RunConfig, out: str | Path | None = None, small: bool = False) -> dict:
    run = Run(cfg, out)
    generate(run)
    inject(run)
    train(run, small=small)
    fit_peephole(run)
    return evaluate(run)


__all__ = [
    "Run",
    "evaluate",
    "explain",
    "fit_files",
    "fit_peephole",
    "load_calibration",
    "generate",
    "inject",
    "run_all",
    "sha256_file",
    "stage_seeds",
    "stream_trial",
    "train",
]
