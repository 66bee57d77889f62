import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vrfam import evaluation
from vrfam.errors import EvaluationError, ReportError
from vrfam.evaluation import CellResult, ScoredWindow

WINDOW_SIZES = (50, 60, 70, 80, 90, 100, 110, 120)


def scored(positives, negatives):
    return [ScoredWindow(s, 1) for s in positives] + [ScoredWindow(s, 0) for s in negatives]


def curve_for(auc):
    return evaluation.RocCurve(np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.array([np.inf, -np.inf]), auc)


@pytest.mark.parametrize(
    "windows,threshold,expected",
    [
        # a score on the threshold counts as familiar
        ([ScoredWindow(0.5, 1)], 0.5, 1.0),
        ([ScoredWindow(0.5, 0)], 0.5, 0.0),
        (scored([0.9, 0.4], [0.6, 0.1]), 0.5, 0.5),
        (scored([0.9, 0.4], [0.6, 0.1]), 0.3, 0.75),
    ],
)
def test_accuracy_examples(windows, threshold, expected):
    assert evaluation.accuracy(windows, threshold) == expected


@pytest.mark.parametrize(
    "positives,negatives,expected",
    [
        # perfectly separated
        ([0.9, 0.8], [0.2, 0.1], 1.0),
        ([0.9, 0.4], [0.6, 0.1], 0.75),
        # perfectly inverted
        ([0.1, 0.2], [0.8, 0.9], 0.0),
        # all tied
        ([0.5, 0.5], [0.5], 0.5),
    ],
)
def test_roc_examples(positives, negatives, expected):
    curve = evaluation.roc(scored(positives, negatives))
    assert curve.auc == pytest.approx(expected)
    assert curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0)
    assert curve.thresholds[0] == np.inf and curve.thresholds[-1] == -np.inf
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)


@pytest.mark.parametrize(
    "windows,missing",
    [
        # only familiar windows
        (scored([0.3, 0.7], []), "negative"),
        (scored([], [0.3, 0.7]), "positive"),
    ],
)
def test_roc_names_missing_class(windows, missing):
    with pytest.raises(EvaluationError, match=missing):
        evaluation.roc(windows)


@pytest.mark.parametrize("score", [1.5, -0.1, float("nan")])
def test_scores_must_be_probabilities(score):
    with pytest.raises(EvaluationError):
        ScoredWindow(score, 1)


score_grid = st.integers(0, 20).map(lambda k: k / 20)


@settings(max_examples=200, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    positives=st.integers(1, 500),
    negatives=st.integers(1, 500),
    levels=st.sampled_from([None, 3, 20, 1000]),
)
def test_trapezoid_auc_equals_pairwise_auc(seed, positives, negatives, levels):
    rng = np.random.default_rng(seed)
    scores = rng.random(positives + negatives)
    if levels is not None:
        # coarse grids force ties across classes
        scores = np.round(scores * levels) / levels
    windows = scored(scores[:positives].tolist(), scores[positives:].tolist())
    assert evaluation.roc(windows).auc == pytest.approx(evaluation.pairwise_auc(windows), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(positives=st.lists(score_grid, min_size=1, max_size=30), negatives=st.lists(score_grid, min_size=1, max_size=30))
def test_auc_ignores_monotone_rescaling(positives, negatives):
    original = evaluation.roc(scored(positives, negatives)).auc
    cubed = evaluation.roc(scored([s**3 for s in positives], [s**3 for s in negatives])).auc
    assert cubed == pytest.approx(original, abs=1e-12)


def test_random_scores_are_at_chance():
    rng = np.random.default_rng(0)
    windows = [ScoredWindow(float(s), int(l)) for s, l in zip(rng.random(10_000), rng.integers(0, 2, 10_000))]
    assert 0.45 <= evaluation.roc(windows).auc <= 0.55


def test_accuracy_matches_roc_points():
    rng = np.random.default_rng(1)
    windows = scored(rng.random(40).round(2), (rng.random(60) * 0.8).round(2))
    curve = evaluation.roc(windows)
    for threshold, fpr, tpr in zip(curve.thresholds[1:-1], curve.fpr[1:-1], curve.tpr[1:-1]):
        expected = (tpr * 40 + (1 - fpr) * 60) / 100
        assert evaluation.accuracy(windows, threshold) == pytest.approx(expected)


def test_roc_points_file(tmp_path):
    curve = evaluation.roc(scored([0.9, 0.4], [0.6, 0.1]))
    path = tmp_path / "roc.csv"
    evaluation.write_roc_points(curve, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["threshold", "fpr", "tpr"]
    assert rows[1] == ["inf", "0.0", "0.0"] and rows[-1] == ["-inf", "1.0", "1.0"]
    assert len(rows) == len(curve.thresholds) + 1


def test_single_cell_report():
    tables = evaluation.report_tables([CellResult("mlp", "2648", 50, 0.75, 0.5, curve_for(0.8))])
    assert tables.shape() == (1, 1)
    assert tables.accuracy == [[0.75]] and tables.auc == [[0.8]]


def test_full_grid_row_order():
    results = [
        CellResult(kind, code, window, 0.5, 0.5, curve_for(0.5))
        for kind in ("pct", "mlp", "fcn")
        for code in ("2648", "3179", "2468", "1379")
        for window in WINDOW_SIZES
    ]
    tables = evaluation.report_tables(results)
    assert tables.shape() == (12, 8)
    assert tables.columns == list(WINDOW_SIZES)
    assert [evaluation.ReportTables.row_label(row) for row in tables.rows[:6]] == [
        "MLP 1379", "FCN 1379", "PCT 1379", "MLP 3179", "FCN 3179", "PCT 3179",
    ]
    assert [code for _, code in tables.rows[6::3]] == ["2468", "2648"]


@pytest.mark.parametrize(
    "results,message",
    [
        # nothing trained
        ([], "no run results"),
        ([CellResult("mlp", "2648", 50, 0.5, 0.5)] * 2, "duplicate"),
    ],
)
def test_report_rejects(results, message):
    with pytest.raises(ReportError, match=message):
        evaluation.report_tables(results)


def test_report_metric_selection():
    results = [CellResult("mlp", "2648", 50, 0.9, 0.6)]
    assert evaluation.report_tables(results, metric="last").accuracy == [[0.6]]
    with pytest.raises(ReportError):
        evaluation.report_tables(results, metric="mean")


def test_missing_cells_in_files(tmp_path):
    results = [
        CellResult("mlp", "2648", 50, 0.75, 0.75, curve_for(0.8)),
        CellResult("mlp", "2648", 60, 0.5, 0.5, None),
        CellResult("fcn", "2648", 50, 0.7, 0.7, curve_for(0.6)),
    ]
    tables = evaluation.report_tables(results)
    accuracy_path, auc_path, text_path = evaluation.write_report(tables, tmp_path / "report")

    assert accuracy_path.read_text().splitlines() == ["WS,50,60", "MLP 2648,0.7500,0.5000", "FCN 2648,0.7000,"]
    assert auc_path.read_text().splitlines() == ["WS,50,60", "MLP 2648,0.8000,", "FCN 2648,0.6000,"]
    text = text_path.read_text()
    assert "Classification accuracy" in text and "Area under the ROC curve" in text
    assert text.count(" -\n") == 3
