import numpy as np
import pytest

from peepscope.anomaly import calibrate, corrupt_dataset
from peepscope.autoencoder import SMALL_ARCHITECTURE, TrainConfig, build_model, choose_threshold, train
from peepscope.peephole import fit_pipeline
from peepscope.telemetry import GeneratorConfig, chunk_stream, generate_stream


@pytest.fixture(scope="session")
def small_system():
    """A small trained detector plus a kinds pipeline, shared by tests that need both."""
    chunks = chunk_stream(generate_stream(GeneratorConfig(seed=31, n_samples=16 * 1600)))
    tr = chunks.subset(slice(0, 1000)).with_split("train")
    va = chunks.subset(slice(1000, 1600)).with_split("validation")
    model = build_model(SMALL_ARCHITECTURE, seed=0)
    train(model, tr, va, TrainConfig(epochs=4, seed=0, batch_size=64))
    choose_threshold(model, va, 0.002)
    cal = calibrate(va)
    corrupted = corrupt_dataset(va, "I", cal, seed=5)
    pipeline = fit_pipeline(model, corrupted, kappa=8, C=6, tag_set="kinds", seed=0, restarts=1)
    return {"model": model, "pipeline": pipeline, "cal": cal, "validation": va, "corrupted": corrupted}


# one summary line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def record_criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
