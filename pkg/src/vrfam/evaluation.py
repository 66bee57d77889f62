"""Window-level accuracy, ROC curves, AUC and the accuracy/AUC report grids."""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from vrfam.errors import EvaluationError, ReportError

KIND_ORDER = ("mlp", "fcn", "pct")
# 3179 (collection protocol) and 3197 (published tables) name the same row block
CODE_ORDER = ("1379", "3197", "2468", "2648")
CODE_ALIASES = {"3179": "3197"}


@dataclass
class ScoredWindow:
    """Probability of "familiar" for one window, with its true label."""

    score: float
    label: int
    source: Tuple = ()

    def __post_init__(self):
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise EvaluationError(f"score {self.score} is not a probability")


@dataclass
class RocCurve:
    """ROC points from (0, 0) to (1, 1) with the matching score thresholds."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _arrays(scored: Sequence[ScoredWindow]) -> Tuple[np.ndarray, np.ndarray]:
    if not scored:
        raise EvaluationError("no scored windows")
    scores = np.array([w.score for w in scored], dtype=np.float64)
    labels = np.array([w.label for w in scored], dtype=np.int64)
    return scores, labels


def _check_both_classes(labels: np.ndarray) -> None:
    if not labels.any():
        raise EvaluationError("ROC needs both classes; positive class (familiar, 1) is missing")
    if labels.all():
        raise EvaluationError("ROC needs both classes; negative class (not familiar, 0) is missing")


def accuracy(scored: Sequence[ScoredWindow], threshold: float = 0.5) -> float:
    """Fraction of windows whose thresholded score equals the label.

    A score equal to the threshold counts as positive.
    """
    scores, labels = _arrays(scored)
    return float(((scores >= threshold).astype(np.int64) == labels).mean())


def roc(scored: Sequence[ScoredWindow]) -> RocCurve:
    """Sweep thresholds over the unique scores and integrate with trapezoids.

    Thresholds run from +inf down through every unique score to -inf; a
    window is positive when its score is >= the threshold.

    Raises
    ------
    EvaluationError
        If the input is empty or holds a single class.
    """
    scores, labels = _arrays(scored)
    _check_both_classes(labels)
    positives, negatives = labels.sum(), (1 - labels).sum()
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    tp = np.cumsum(labels)[ends]
    fp = (ends + 1) - tp
    tpr = np.r_[0.0, tp / positives, 1.0]
    fpr = np.r_[0.0, fp / negatives, 1.0]
    thresholds = np.r_[np.inf, scores[ends], -np.inf]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=auc)


def pairwise_auc(scored: Sequence[ScoredWindow]) -> float:
    """Share of (positive, negative) pairs ranked correctly, ties counted 1/2.

    Computed from average ranks (Mann-Whitney U).
    """
    scores, labels = _arrays(scored)
    _check_both_classes(labels)
    ranks = rankdata(scores, method="average")
    positives = int(labels.sum())
    negatives = len(labels) - positives
    u = ranks[labels == 1].sum() - positives * (positives + 1) / 2.0
    return float(u / (positives * negatives))


def write_roc_points(curve: RocCurve, path) -> None:
    """Dump ``threshold,fpr,tpr`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream)
        writer.writerow(["threshold", "fpr", "tpr"])
        for threshold, fpr, tpr in zip(curve.thresholds, curve.fpr, curve.tpr):
            writer.writerow([repr(float(threshold)), repr(float(fpr)), repr(float(tpr))])


@dataclass
class CellResult:
    """What the report needs from one trained grid cell."""

    kind: str
    code: str
    window_size: int
    peak_accuracy: float
    last_accuracy: float
    roc: Optional[RocCurve] = None


@dataclass
class ReportTables:
    """Accuracy and AUC grids: rows (kind, code), columns window sizes.

    Missing cells hold None.
    """

    rows: List[Tuple[str, str]]
    columns: List[int]
    accuracy: List[List[Optional[float]]] = field(default_factory=list)
    auc: List[List[Optional[float]]] = field(default_factory=list)

    @staticmethod
    def row_label(row: Tuple[str, str]) -> str:
        return f"{row[0].upper()} {row[1]}"

    def shape(self) -> Tuple[int, int]:
        return len(self.rows), len(self.columns)


def row_sort_key(row: Tuple[str, str]):
    """Order rows by code block (1379, 3197, 2468, 2648, then others) then by kind."""
    kind, code = row
    canonical = CODE_ALIASES.get(code, code)
    block = CODE_ORDER.index(canonical) if canonical in CODE_ORDER else len(CODE_ORDER)
    kind_rank = KIND_ORDER.index(kind) if kind in KIND_ORDER else len(KIND_ORDER)
    return block, canonical, code, kind_rank, kind


def report_tables(results: Iterable[CellResult], metric: str = "peak") -> ReportTables:
    """Arrange cell results into accuracy and AUC grids.

    Parameters
    ----------
    results : Iterable[CellResult]
        One result per (kind, code, window size).
    metric : str, optional
        "peak" (max test accuracy over epochs) or "last" (final epoch), by
        default "peak".

    Raises
    ------
    ReportError
        On an empty input, a duplicate cell or an unknown metric.
    """
    if metric not in ("peak", "last"):
        raise ReportError(f"unknown accuracy metric {metric!r}; expected 'peak' or 'last'")
    cells: Dict[Tuple[str, str, int], CellResult] = {}
    for result in results:
        key = (result.kind, result.code, result.window_size)
        if key in cells:
            raise ReportError(f"duplicate grid cell {key}")
        cells[key] = result
    if not cells:
        raise ReportError("no run results to report")
    rows = sorted({(kind, code) for kind, code, _ in cells}, key=row_sort_key)
    columns = sorted({window for _, _, window in cells})
    tables = ReportTables(rows=rows, columns=columns)
    for kind, code in rows:
        accuracy_row, auc_row = [], []
        for window in columns:
            cell = cells.get((kind, code, window))
            if cell is None:
                accuracy_row.append(None)
                auc_row.append(None)
                continue
            accuracy_row.append(cell.peak_accuracy if metric == "peak" else cell.last_accuracy)
            auc_row.append(cell.roc.auc if cell.roc is not None else None)
        tables.accuracy.append(accuracy_row)
        tables.auc.append(auc_row)
    return tables


def _format(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.4f}"


def write_grid_csv(tables: ReportTables, grid: List[List[Optional[float]]], path) -> None:
    """Write one grid: header ``WS,<windows...>``, first column ``KIND CODE``."""
    with open(path, "w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream)
        writer.writerow(["WS"] + [str(window) for window in tables.columns])
        for row, values in zip(tables.rows, grid):
            writer.writerow([ReportTables.row_label(row)] + [_format(v) for v in values])


def render_grid(tables: ReportTables, grid: List[List[Optional[float]]], title: str) -> str:
    """Render one grid as aligned text; missing cells show as "-"."""
    header = ["WS"] + [str(window) for window in tables.columns]
    body = [
        [ReportTables.row_label(row)] + [_format(v) or "-" for v in values]
        for row, values in zip(tables.rows, grid)
    ]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    lines = [title, "  ".join(cell.rjust(width) for cell, width in zip(header, widths))]
    lines.append("-" * len(lines[-1]))
    lines.extend("  ".join(cell.rjust(width) for cell, width in zip(line, widths)) for line in body)
    return "\n".join(lines) + "\n"


def write_report(tables: ReportTables, out_dir) -> List[Path]:
    """Write ``accuracy.csv``, ``auc.csv`` and the text rendering ``tables.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "accuracy.csv", out_dir / "auc.csv", out_dir / "tables.txt"]
    write_grid_csv(tables, tables.accuracy, paths[0])
    write_grid_csv(tables, tables.auc, paths[1])
    paths[2].write_text(
        render_grid(tables, tables.accuracy, "Classification accuracy")
        + "\n"
        + render_grid(tables, tables.auc, "Area under the ROC curve"),
        encoding="utf-8",
    )
    return paths
