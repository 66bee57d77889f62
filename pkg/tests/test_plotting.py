import re

import numpy as np
import pytest

from vrfam import evaluation, plotting, synth
from vrfam.errors import EvaluationError
from vrfam.evaluation import ScoredWindow
from vrfam.helpers import Edges

WINDOW_SIZES = (50, 60, 70, 80, 90, 100, 110, 120)


def some_curve(seed=0):
    rng = np.random.default_rng(seed)
    return evaluation.roc([ScoredWindow(float(s), int(l)) for s, l in zip(rng.random(30), [0, 1] * 15)])


def test_single_curve_panel(tmp_path):
    path = plotting.emit_roc_plot({("mlp", "2648"): {50: some_curve()}}, tmp_path / "roc.svg")
    svg = path.read_text()
    assert svg.startswith("<?xml")
    assert svg.count('class="roc"') == 1
    assert svg.count('class="chance"') == 1
    assert svg.count('class="panel"') == 1
    assert "MLP 2648" in svg and "WS 50" in svg


def test_all_window_sizes_in_one_panel(tmp_path):
    curves = {window: some_curve(window) for window in WINDOW_SIZES}
    svg = plotting.emit_roc_plot({("fcn", "1379"): curves}, tmp_path / "roc.svg").read_text()
    assert svg.count('class="roc"') == 8
    assert re.findall(r'data-window="(\d+)"', svg) == [str(window) for window in WINDOW_SIZES]
    for window in WINDOW_SIZES:
        assert f">WS {window}</text>" in svg


def test_panels_are_laid_out_by_code_and_kind(tmp_path):
    curves = {(kind, code): {50: some_curve()} for kind in ("pct", "mlp") for code in ("2648", "1379", "2468")}
    svg = plotting.emit_roc_plot(curves, tmp_path / "roc.svg").read_text()
    width, height = re.search(r'<svg [^>]*width="(\d+)" height="(\d+)"', svg).groups()
    assert (int(width), int(height)) == (
        plotting.MARGIN + 3 * (plotting.PANEL.width + plotting.MARGIN),
        plotting.MARGIN + 2 * (plotting.PANEL.height + plotting.MARGIN),
    )
    titles = re.findall(r"<title>([^<]+)</title>", svg)
    assert titles == ["MLP 1379", "MLP 2468", "MLP 2648", "PCT 1379", "PCT 2468", "PCT 2648"]


def test_roc_plot_is_byte_stable(tmp_path):
    curves = {("mlp", "2648"): {50: some_curve(1), 60: some_curve(2)}}
    first = plotting.emit_roc_plot(curves, tmp_path / "a.svg").read_bytes()
    second = plotting.emit_roc_plot(curves, tmp_path / "b.svg").read_bytes()
    assert first == second


def test_roc_plot_needs_curves(tmp_path):
    with pytest.raises(EvaluationError):
        plotting.emit_roc_plot({("mlp", "2648"): {}}, tmp_path / "roc.svg")


def test_canvas_escapes_text():
    canvas = plotting.SvgCanvas(Edges(10, 10))
    canvas.text(1, 1, "a < b & c")
    assert "a &lt; b &amp; c" in canvas.get_svg()
    assert canvas.get_svg().endswith("</svg>\n")


def test_trajectory_plot(tmp_path):
    cfg = synth.SynthConfig(users_per_class=2, sessions_per_code=2, codes=("2648", "1379"))
    sessions = synth.synth_dataset(cfg)
    svg = plotting.emit_trajectory_plot(sessions, tmp_path / "traj.svg", users=["P01", "P02"]).read_text()
    # two users by two codes, two sessions each
    assert svg.count('class="panel"') == 4
    assert svg.count('class="trajectory"') == 8
    assert svg.count('class="key"') == 4 * 12
    assert "P01 (familiar) 1379" in svg and "P02 (unfamiliar) 2648" in svg
    assert "P03" not in svg


def test_trajectory_plot_needs_sessions(tmp_path):
    sessions = synth.synth_dataset(synth.SynthConfig(users_per_class=1, sessions_per_code=1, codes=("2648",)))
    with pytest.raises(EvaluationError):
        plotting.emit_trajectory_plot(sessions, tmp_path / "traj.svg", users=["P09"])
