"""Deterministic SVG output: ROC panels and trajectory overlays."""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

from vrfam.data import Session
from vrfam.errors import EvaluationError
from vrfam.evaluation import RocCurve, row_sort_key
from vrfam.helpers import Edges
from vrfam.synth import KeypadLayout

logger = logging.getLogger(__name__)

PANEL = Edges(240, 240)
MARGIN = 48
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
)
TICKS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


class SvgCanvas:
    """Append-only SVG document; every coordinate is written with two decimals."""

    def __init__(self, size: Edges):
        self.size = size
        self.svg = (
            '<?xml version="1.0" encoding="UTF-8" standalone="no"?>\n'
            f'<svg version="1.1" width="{size.width}" height="{size.height}" '
            f'viewBox="0 0 {size.width} {size.height}" xmlns="http://www.w3.org/2000/svg">\n'
            f'<rect x="0" y="0" width="{size.width}" height="{size.height}" fill="#ffffff"/>\n'
        )

    def group_start(self, css_class: str, title: str = "") -> None:
        self.svg += f'<g class="{css_class}">\n'
        if title:
            self.svg += f"<title>{escape(title)}</title>\n"

    def group_end(self) -> None:
        self.svg += "</g>\n"

    def rectangle(self, x1, y1, x2, y2, stroke="#000000", fill="none") -> None:
        self.svg += (
            f'<rect x="{x1:.2f}" y="{y1:.2f}" width="{x2 - x1:.2f}" height="{y2 - y1:.2f}" '
            f'fill="{fill}" stroke="{stroke}"/>\n'
        )

    def line(self, x1, y1, x2, y2, css_class: str, stroke="#000000", dash: str = "") -> None:
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.svg += (
            f'<line class="{css_class}" x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
            f'stroke="{stroke}"{extra}/>\n'
        )

    def polyline(self, points: Sequence[Tuple[float, float]], css_class: str, stroke: str, extra: str = "") -> None:
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
        self.svg += f'<polyline class="{css_class}" points="{coords}" fill="none" stroke="{stroke}"{extra}/>\n'

    def circle(self, x, y, r, css_class: str, stroke="#999999") -> None:
        self.svg += (
            f'<circle class="{css_class}" cx="{x:.2f}" cy="{y:.2f}" r="{r:.2f}" fill="none" stroke="{stroke}"/>\n'
        )

    def text(self, x, y, string: str, anchor: str = "start", size: int = 10) -> None:
        self.svg += (
            f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" font-family="monospace" '
            f'text-anchor="{anchor}">{escape(string)}</text>\n'
        )

    def get_svg(self) -> str:
        return f"{self.svg}</svg>\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.get_svg(), encoding="utf-8")
        logger.info("wrote %s", path)
        return path


def _grid_size(rows: int, columns: int) -> Edges:
    return Edges(MARGIN + columns * (PANEL.width + MARGIN), MARGIN + rows * (PANEL.height + MARGIN))


def _panel_origin(row: int, column: int) -> Tuple[float, float]:
    return MARGIN + column * (PANEL.width + MARGIN), MARGIN + row * (PANEL.height + MARGIN)


def _roc_panel(canvas: SvgCanvas, left: float, top: float, title: str, curves: Mapping[int, RocCurve]) -> None:
    def to_canvas(fpr: float, tpr: float) -> Tuple[float, float]:
        return left + fpr * PANEL.width, top + (1.0 - tpr) * PANEL.height

    canvas.group_start("panel", title)
    canvas.rectangle(left, top, left + PANEL.width, top + PANEL.height)
    canvas.text(left + PANEL.width / 2, top - 8, title, anchor="middle", size=12)
    for tick in TICKS:
        x, y = to_canvas(tick, tick)
        canvas.line(x, top + PANEL.height, x, top + PANEL.height + 4, "tick")
        canvas.text(x, top + PANEL.height + 15, f"{tick:.1f}", anchor="middle", size=8)
        canvas.line(left - 4, y, left, y, "tick")
        canvas.text(left - 6, y + 3, f"{tick:.1f}", anchor="end", size=8)
    canvas.line(*to_canvas(0.0, 0.0), *to_canvas(1.0, 1.0), "chance", stroke="#999999", dash="4 3")
    for index, window in enumerate(sorted(curves)):
        color = PALETTE[index % len(PALETTE)]
        points = [to_canvas(fpr, tpr) for fpr, tpr in curves[window].points]
        canvas.polyline(points, "roc", color, extra=f' data-window="{window}"')
        legend_y = top + PANEL.height - 10 - 12 * (len(curves) - 1 - index)
        canvas.line(left + PANEL.width - 70, legend_y - 3, left + PANEL.width - 58, legend_y - 3, "legend", color)
        canvas.text(left + PANEL.width - 54, legend_y, f"WS {window}", size=9)
    canvas.group_end()


def emit_roc_plot(curves: Mapping[Tuple[str, str], Mapping[int, RocCurve]], path) -> Path:
    """Draw one ROC panel per (kind, code) with one polyline per window size.

    Columns are codes and rows are model kinds, both in report order. Each
    panel carries a dashed chance diagonal, ticks from 0 to 1 on both axes
    and a "WS <n>" legend entry per curve.

    Parameters
    ----------
    curves : Mapping
        ``{(kind, code): {window_size: RocCurve}}``.
    path : path-like
        Output ``.svg`` file.

    Raises
    ------
    EvaluationError
        If no curve is given.
    """
    panels = {key: value for key, value in curves.items() if value}
    if not panels:
        raise EvaluationError("no ROC curves to plot")
    codes = sorted({code for _, code in panels}, key=lambda code: row_sort_key(("", code)))
    kinds = sorted({kind for kind, _ in panels}, key=lambda kind: row_sort_key((kind, ""))[3:])
    canvas = SvgCanvas(_grid_size(len(kinds), len(codes)))
    for row, kind in enumerate(kinds):
        for column, code in enumerate(codes):
            if (kind, code) in panels:
                left, top = _panel_origin(row, column)
                _roc_panel(canvas, left, top, f"{kind.upper()} {code}", panels[(kind, code)])
    return canvas.write(path)


def _xy_bounds(points: List[np.ndarray]) -> Tuple[float, float, float, float]:
    stacked = np.concatenate(points, axis=0)
    low, high = stacked.min(axis=0), stacked.max(axis=0)
    pad = 0.05 * float(max(high[0] - low[0], high[1] - low[1], 1e-3))
    return low[0] - pad, low[1] - pad, high[0] + pad, high[1] + pad


def emit_trajectory_plot(
    sessions: Sequence[Session],
    path,
    users: Optional[Sequence[str]] = None,
    layout: Optional[KeypadLayout] = None,
) -> Path:
    """Overlay the x-y fingertip paths of every correct entry, one panel per (user, code).

    Rows are users and columns are codes. Key centers of ``layout`` are
    drawn as circles of the key radius.

    Raises
    ------
    EvaluationError
        If no correct-entry session of the selected users is given.
    """
    layout = layout or KeypadLayout()
    chosen = [
        session for session in sessions
        if not session.excluded and (users is None or session.user_id in users)
    ]
    if not chosen:
        raise EvaluationError("no sessions to plot")
    user_rows = sorted({session.user_id for session in chosen})
    codes = sorted({session.passcode for session in chosen}, key=lambda code: row_sort_key(("", code)))
    familiar = {session.user_id: session.familiar for session in chosen}
    keys = np.stack(list(layout.keys.values()))[:, :2]
    x0, y0, x1, y1 = _xy_bounds([session.frames[:, 1:3] for session in chosen] + [keys])
    span = max(x1 - x0, y1 - y0)

    groups: Dict[Tuple[str, str], List[Session]] = {}
    for session in sorted(chosen, key=lambda s: (s.user_id, s.passcode, s.session_index)):
        groups.setdefault((session.user_id, session.passcode), []).append(session)

    canvas = SvgCanvas(_grid_size(len(user_rows), len(codes)))
    for row, user in enumerate(user_rows):
        for column, code in enumerate(codes):
            if (user, code) not in groups:
                continue
            left, top = _panel_origin(row, column)

            def to_canvas(x: float, y: float) -> Tuple[float, float]:
                return left + (x - x0) / span * PANEL.width, top + (y1 - y) / span * PANEL.height

            label = "familiar" if familiar[user] else "unfamiliar"
            title = f"{user} ({label}) {code}"
            canvas.group_start("panel", title)
            canvas.rectangle(left, top, left + PANEL.width, top + PANEL.height)
            canvas.text(left + PANEL.width / 2, top - 8, title, anchor="middle", size=11)
            radius = layout.key_radius / span * PANEL.width
            for name, center in layout.keys.items():
                cx, cy = to_canvas(center[0], center[1])
                canvas.circle(cx, cy, radius, "key")
                canvas.text(cx, cy + 3, name, anchor="middle", size=8)
            for index, session in enumerate(groups[(user, code)]):
                points = [to_canvas(x, y) for x, y in session.frames[:, 1:3]]
                canvas.polyline(
                    points,
                    "trajectory",
                    PALETTE[index % len(PALETTE)],
                    extra=f' data-session="{session.session_index}"',
                )
            canvas.group_end()
    return canvas.write(path)
