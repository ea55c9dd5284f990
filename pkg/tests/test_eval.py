import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peepscope.anomaly import inject_event
from peepscope.errors import ConfigError
from peepscope.eval import (
    BIAS_PANELS,
    StreamTrace,
    auc,
    bias_report,
    confusion,
    confusion_csv,
    explain_stream,
    export_heatmap,
    export_stream,
    heatmap_svg,
    read_matrix_csv,
)
from peepscope.telemetry import GeneratorConfig, generate_stream


def brute_auc(nom, ano):
    total = sum(1.0 if a > n else 0.5 if a == n else 0.0 for n, a in itertools.product(nom, ano))
    return total / (len(nom) * len(ano))


# ----------------------------------------------------------------- AUC


def test_auc_examples():
    assert auc([1, 2], [3, 4]).value == 1.0
    assert auc([1, 2, 3], [1, 2, 3]).value == 0.5
    assert auc([1, 3], [2, 4]).value == 0.75
    r = auc([1, 3], [2, 4], "I", "GWN")
    assert (r.n_nominal, r.n_anomalous, r.scenario, r.kind) == (2, 2, "I", "GWN")
    with pytest.raises(ConfigError):
        auc([], [1])
    with pytest.raises(ConfigError):
        auc([1], [])


def test_auc_matches_brute_force_on_100_lists():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, m = rng.integers(1, 101, size=2)
        # coarse rounding forces plenty of ties
        nom = np.round(rng.normal(0, 1, n), 1)
        ano = np.round(rng.normal(0.5, 1, m), 1)
        assert auc(nom, ano).value == pytest.approx(brute_auc(nom, ano), abs=1e-12)


@given(nom=st.lists(st.integers(-10**6, 10**6), min_size=1, max_size=40),
       ano=st.lists(st.integers(-10**6, 10**6), min_size=1, max_size=40))
@settings(max_examples=80, deadline=None)
def test_auc_invariant_to_monotone_transform(nom, ano):
    # integer scores keep both transforms strictly increasing in floating point
    nom, ano = np.asarray(nom, dtype=np.float64), np.asarray(ano, dtype=np.float64)
    base = auc(nom, ano).value
    assert 0.0 <= base <= 1.0
    assert auc(np.exp(nom / 1e6), np.exp(ano / 1e6)).value == base
    assert auc(nom * 3 + 7, ano * 3 + 7).value == base


# ----------------------------------------------------------------- confusion


def test_confusion_examples():
    cm = confusion(["A", "B"], ["A", "B"], ["A", "B"])
    np.testing.assert_array_equal(cm.probs, np.eye(2))
    cm = confusion(["A", "A", "B"], ["A", "B", "B"], ["A", "B"])
    np.testing.assert_array_equal(cm.probs, [[0.5, 0.5], [0, 1]])
    cm = confusion(["A", "A"], ["A", "B"], ["A", "B", "C"])
    assert cm.probs[0].sum() == 1.0
    assert list(cm.empty_rows) == [False, True, True]
    np.testing.assert_array_equal(cm.probs[1:], 0)
    with pytest.raises(ConfigError):
        confusion(["A"], ["Z"], ["A", "B"])
    with pytest.raises(ConfigError):
        confusion(["A"], [], ["A"])


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=100))
@settings(max_examples=60, deadline=None)
def test_confusion_rows_and_totals(pairs):
    t, p = zip(*pairs)
    cm = confusion(list(t), list(p), ["a", "b", "c", "d"])
    assert cm.total == len(pairs)
    np.testing.assert_allclose(cm.probs[~cm.empty_rows].sum(axis=1), 1.0, atol=1e-12)


def test_bias_null_and_closed_form():
    rng = np.random.default_rng(1)
    n = 5000
    truth = rng.integers(0, 4, n)
    kinds = rng.choice(BIAS_PANELS[1:], n)
    report = bias_report(truth, rng.integers(0, 4, n), kinds)
    assert list(report.panels) == list(BIAS_PANELS)
    assert abs(report.bias_index["overall"]) < 0.05
    report = bias_report(truth, np.zeros(n, dtype=int), kinds)
    assert report.bias_index["overall"] == pytest.approx(0.75)


def test_bias_missing_kind_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = bias_report([0, 1], [0, 1], ["GWN", "GWN"])
    assert set(report.panels) == {"overall", "GWN"}
    assert len(caught) == 4


# ----------------------------------------------------------------- heatmaps


def _cell_fills(svg):
    return [line.split('fill="')[1].split('"')[0] for line in svg.splitlines() if 'class="cell"' in line]


def test_heatmap_identity_and_zero(tmp_path):
    csv_path, svg_path = export_heatmap(np.eye(2), tmp_path / "eye")
    assert csv_path.read_text() == "1,0\n0,1\n"
    assert _cell_fills(svg_path.read_text()) == ["#000000", "#ffffff", "#ffffff", "#000000"]
    assert set(_cell_fills(heatmap_svg(np.zeros((3, 3))))) == {"#ffffff"}
    with pytest.raises(ConfigError):
        heatmap_svg(np.array([[np.nan]]))


def test_heatmap_deterministic_and_round_trip(tmp_path):
    m = np.random.default_rng(2).random((5, 7))
    a = export_heatmap(m, tmp_path / "a", row_labels=list("vwxyz"))
    b = export_heatmap(m, tmp_path / "b", row_labels=list("vwxyz"))
    assert a[1].read_bytes() == b[1].read_bytes()
    assert np.max(np.abs(read_matrix_csv(a[0]) - m)) <= 1e-12


def test_confusion_csv_has_labels():
    text = confusion_csv(confusion(["A", "B"], ["A", "A"], ["A", "B"]))
    assert text.splitlines() == ["true\\pred,A,B", "A,1,0", "B,1,0"]


# ----------------------------------------------------------------- streaming


def test_trace_rows_for_stride_16(small_system):
    s = generate_stream(GeneratorConfig(seed=3, n_samples=160))
    trace = explain_stream(small_system["model"], small_system["pipeline"], s, stride=16)
    assert len(trace) == 10
    assert list(trace.origins) == list(range(0, 160, 16))
    with pytest.raises(ConfigError):
        explain_stream(small_system["model"], small_system["pipeline"],
                       generate_stream(GeneratorConfig(seed=3, n_samples=15)))


def test_nominal_stream_rarely_flags(small_system):
    s = generate_stream(GeneratorConfig(seed=77, n_samples=2000))
    trace = explain_stream(small_system["model"], small_system["pipeline"], s, stride=1)
    # the fixture's threshold is the 2nd largest of only 600 validation scores, so this
    # is a coarse bound; the 0.2% contract is checked on the acceptance-scale model
    assert trace.flags.mean() <= 0.02
    assert np.all(trace.peepholes[~trace.flags] == 0)
    assert np.all(trace.d_argmax[~trace.flags] == -1)
    np.testing.assert_allclose(trace.peepholes[trace.flags].sum(axis=1), 1.0, atol=1e-9)


def test_step_event_is_flagged(small_system, tmp_path):
    s = generate_stream(GeneratorConfig(seed=78, n_samples=400))
    event = inject_event(s, 200, "Step", small_system["cal"], np.random.default_rng(0))
    trace = explain_stream(small_system["model"], small_system["pipeline"], event, stride=1)
    overlap = (trace.origins + 16 > 200) & (trace.origins < 208)
    assert trace.flags[overlap].any()
    assert trace.dominant_tag(200, 208) in small_system["pipeline"].vocabulary
    paths = export_stream(trace, tmp_path, event, small_system["model"].threshold)
    rows = paths["trace"].read_text().splitlines()
    assert len(rows) == len(trace) + 1 and rows[0].startswith("origin,score,flag,tag_pred")
    assert read_matrix_csv(paths["heatmap_csv"]).shape == (5, len(trace))
    assert paths["figure"].read_bytes()[:4] == b"\x89PNG"


def test_dominant_tag_none_without_flags():
    t = StreamTrace(np.arange(3), np.zeros(3), np.zeros(3, bool), np.zeros((3, 2)), -np.ones(3, int), ("a", "b"))
    assert t.dominant_tag(0, 5) is None
    assert t.tag_pred == ["", "", ""]
