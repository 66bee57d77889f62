"""BCE/Adam training of one classifier per (model kind, window size, passcode) cell."""

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import yaml

from vrfam import data, models, ops
from vrfam.errors import ConfigurationError, DataError, DimensionError, EvaluationError, VrfamError
from vrfam.evaluation import CellResult, ScoredWindow, accuracy, roc
from vrfam.helpers import derive_seed
from vrfam.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

MATRIX_WINDOW_SIZES = (50, 60, 70, 80, 90, 100, 110, 120)
RUN_FORMAT_VERSION = 1
DONE_MARKER = "DONE"
FAILED_MARKER = "FAILED"


@dataclass
class TrainConfig:
    """Optimization settings shared by every grid cell.

    Attributes:
        epochs (int): Passes over the training windows.
        batch_size (int): Training minibatch size.
        learning_rate (float): Adam step size.
        beta1 (float): Adam first-moment decay.
        beta2 (float): Adam second-moment decay.
        eps (float): Adam denominator term.
        seed (int): Master seed; init and shuffle seeds are derived per cell.
        train_step (int): Window step over training sessions.
        test_step (int): Window step over test sessions.
        eval_batch_size (int): Batch size for inference-mode scoring.
        channel_mode (str): "position" or "position+orientation".
        hyper (dict): Per-kind structural overrides, e.g. {"fcn": {"filters": [8, 16, 8]}}.
    """

    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    train_step: int = 1
    test_step: int = 1
    eval_batch_size: int = 256
    channel_mode: str = "position"
    hyper: Dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigurationError(
                f"batch sizes must be >= 1, got {self.batch_size}, {self.eval_batch_size}"
            )
        if self.train_step < 1 or self.test_step < 1:
            raise ConfigurationError(f"window steps must be >= 1, got {self.train_step}, {self.test_step}")
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.channel_mode not in data.CHANNEL_MODES:
            raise ConfigurationError(
                f"unknown channel mode {self.channel_mode!r}; expected one of {sorted(data.CHANNEL_MODES)}"
            )
        unknown = set(self.hyper) - set(models.MODEL_KINDS)
        if unknown:
            raise ConfigurationError(f"hyper overrides for unknown model kinds: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GridCell:
    kind: str
    window_size: int
    code: str

    @property
    def dir_name(self) -> str:
        return f"{self.kind}_{self.code}_ws{self.window_size}"


@dataclass
class RunRecord:
    """Outcome of training one grid cell.

    ``peak_accuracy`` is the maximum of ``test_accuracies``; the earliest
    epoch reaching it wins. ``checkpoint`` and ``peak_scores`` are taken at
    that epoch.
    """

    cell: GridCell
    train_losses: List[float] = field(default_factory=list)
    test_accuracies: List[float] = field(default_factory=list)
    peak_accuracy: float = 0.0
    peak_epoch: int = 0
    last_accuracy: float = 0.0
    checkpoint: Optional[models.Checkpoint] = None
    peak_scores: List[ScoredWindow] = field(default_factory=list)
    status: str = "ok"
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def cell_result(self) -> CellResult:
        """Summarize for the report; the ROC is left out when the scores hold one class."""
        try:
            curve = roc(self.peak_scores)
        except EvaluationError as error:
            logger.warning("%s: no ROC curve (%s)", self.cell.dir_name, error)
            curve = None
        return CellResult(
            kind=self.cell.kind,
            code=self.cell.code,
            window_size=self.cell.window_size,
            peak_accuracy=self.peak_accuracy,
            last_accuracy=self.last_accuracy,
            roc=curve,
        )


def bce_loss(pred: Tensor, labels) -> Tensor:
    """Mean of -log(pred[gt]) over the windows of a batch.

    Parameters
    ----------
    pred : Tensor
        Class probabilities [n, 2]; rows sum to one.
    labels : array_like
        Integer labels [n], 1 = familiar.

    Returns
    -------
    Tensor
        Scalar loss; probabilities are floored at 1e-7 before the log.

    Raises
    ------
    EvaluationError
        If the batch is empty.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0 or pred.shape[0] == 0:
        raise EvaluationError("loss of an empty batch")
    return ops.probability_nll(pred, labels)


@dataclass
class AdamState:
    """First and second moments per parameter name, plus the step counter."""

    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, Optional[np.ndarray]],
    state: AdamState,
    cfg: TrainConfig,
) -> AdamState:
    """Apply one bias-corrected Adam update to ``params`` in place.

    A missing gradient counts as zero.

    Raises
    ------
    DimensionError
        If a gradient does not have its parameter's shape.
    """
    state.step += 1
    correction1 = 1.0 - cfg.beta1 ** state.step
    correction2 = 1.0 - cfg.beta2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param)
        if grad.shape != param.shape:
            raise DimensionError(f"{name}: gradient shape {grad.shape} does not match parameter {param.shape}")
        first = state.first.setdefault(name, np.zeros_like(param))
        second = state.second.setdefault(name, np.zeros_like(param))
        first *= cfg.beta1
        first += (1.0 - cfg.beta1) * grad
        second *= cfg.beta2
        second += (1.0 - cfg.beta2) * np.square(grad)
        update = cfg.learning_rate * (first / correction1) / (np.sqrt(second / correction2) + cfg.eps)
        param -= update.astype(param.dtype, copy=False)
    return state


class Adam:
    """Adam over the parameter tensors of a module."""

    def __init__(self, parameters: Dict[str, Tensor], cfg: TrainConfig):
        self.parameters = parameters
        self.cfg = cfg
        self.state = AdamState()

    def step(self) -> None:
        adam_step(
            {name: t.data for name, t in self.parameters.items()},
            {name: t.grad for name, t in self.parameters.items()},
            self.state,
            self.cfg,
        )

    def zero_grad(self) -> None:
        for tensor in self.parameters.values():
            tensor.zero_grad()


def score_windows(model, windows: data.WindowSet, batch_size: int = 256) -> List[ScoredWindow]:
    """Score already-normalized windows in inference mode."""
    model.eval()
    scores = []
    with no_grad():
        for start in range(0, len(windows), batch_size):
            probs = model(Tensor(windows.values[start:start + batch_size]))
            scores.append(probs.data[:, 1])
    flat = np.clip(np.concatenate(scores).astype(np.float64), 0.0, 1.0) if scores else np.zeros(0)
    return [
        ScoredWindow(score=float(score), label=int(label), source=tuple(source))
        for score, label, source in zip(flat, windows.labels, windows.sources)
    ]


def rescore(checkpoint: models.Checkpoint, windows: data.WindowSet, batch_size: int = 256) -> List[ScoredWindow]:
    """Score raw windows with a stored model, normalizing with its stored statistics."""
    if checkpoint.norm is None:
        raise DataError("checkpoint carries no normalization statistics")
    normalized = data.NormStats.from_dict(checkpoint.norm).apply(windows)
    return score_windows(checkpoint.to_model(), normalized, batch_size)


def _check_classes(windows: data.WindowSet, role: str, cell: GridCell) -> None:
    negatives, positives = windows.class_counts()
    if positives == 0:
        raise DataError(f"{cell.dir_name}: no familiar windows in the {role} set")
    if negatives == 0:
        raise DataError(f"{cell.dir_name}: no unfamiliar windows in the {role} set")


def train_cell(
    kind: str,
    window_size: int,
    code: str,
    sessions: Sequence[data.Session],
    split: data.SplitPlan,
    cfg: TrainConfig,
) -> RunRecord:
    """Train one classifier and keep the state of its best test epoch.

    Every epoch shuffles the training windows with a seeded generator, runs
    minibatch BCE/Adam updates in train mode, then scores all test windows
    in inference mode.

    Raises
    ------
    DataError
        If either class is missing from the train or test windows.
    """
    cell = GridCell(kind, window_size, code)
    train = data.build_windows(sessions, split.train_users, code, window_size, cfg.channel_mode, cfg.train_step)
    test = data.build_windows(sessions, split.test_users, code, window_size, cfg.channel_mode, cfg.test_step)
    _check_classes(train, "train", cell)
    _check_classes(test, "test", cell)
    train, test, stats = data.normalize(train, test)

    spec = models.ModelSpec(
        kind=kind,
        window_size=window_size,
        channels=data.CHANNEL_MODES[cfg.channel_mode],
        hyper=dict(cfg.hyper.get(kind, {})),
    )
    model = models.build_model(spec, seed=derive_seed(cfg.seed, "init", kind, code, window_size))
    optimizer = Adam(model.parameters(), cfg)
    shuffle = np.random.default_rng(derive_seed(cfg.seed, "shuffle", kind, code, window_size))
    trained_on = models.TrainedOn(code=code, window_size=window_size, split_seed=split.seed)
    logger.info(
        "%s: %d train / %d test windows, %d parameters",
        cell.dir_name, len(train), len(test), model.parameter_count(),
    )

    record = RunRecord(cell=cell)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = shuffle.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            loss = bce_loss(model(Tensor(train.values[batch])), train.labels[batch])
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
        record.train_losses.append(total / len(train))

        scored = score_windows(model, test, cfg.eval_batch_size)
        test_accuracy = accuracy(scored)
        record.test_accuracies.append(test_accuracy)
        if epoch == 1 or test_accuracy > record.peak_accuracy:
            record.peak_accuracy, record.peak_epoch = test_accuracy, epoch
            record.peak_scores = scored
            record.checkpoint = models.Checkpoint.from_model(model, spec, trained_on, stats.to_dict())
        logger.info(
            "%s epoch %d/%d: train loss %.4f, test accuracy %.4f",
            cell.dir_name, epoch, cfg.epochs, record.train_losses[-1], test_accuracy,
        )
    record.last_accuracy = record.test_accuracies[-1]
    return record


def _run_cell(cell: GridCell, sessions, split, cfg) -> RunRecord:
    try:
        return train_cell(cell.kind, cell.window_size, cell.code, sessions, split, cfg)
    except VrfamError as error:
        logger.error("%s failed: %s", cell.dir_name, error)
        return RunRecord(cell=cell, status="failed", error=str(error))
    except Exception as error:
        logger.exception("%s failed unexpectedly", cell.dir_name)
        return RunRecord(cell=cell, status="failed", error=f"{type(error).__name__}: {error}")


def grid_cells(kinds: Sequence[str], window_sizes: Sequence[int], codes: Sequence[str]) -> List[GridCell]:
    return [GridCell(kind, window, code) for kind in kinds for code in codes for window in window_sizes]


def train_matrix(
    kinds: Sequence[str],
    window_sizes: Sequence[int],
    codes: Sequence[str],
    sessions: Sequence[data.Session],
    split: data.SplitPlan,
    cfg: TrainConfig,
    workers: int = 1,
    on_record: Optional[Callable[[RunRecord], None]] = None,
) -> List[RunRecord]:
    """Train every (kind, window size, code) cell; a failing cell does not stop the rest.

    Parameters
    ----------
    workers : int, optional
        Process pool size; 1 runs the cells in this process, by default 1.
    on_record : callable, optional
        Called with each record as soon as its cell finishes.

    Returns
    -------
    List[RunRecord]
        One record per cell, in grid order (kind, code, window size).
    """
    cells = grid_cells(kinds, window_sizes, codes)
    records: Dict[GridCell, RunRecord] = {}
    if workers <= 1:
        for cell in cells:
            records[cell] = _run_cell(cell, sessions, split, cfg)
            if on_record:
                on_record(records[cell])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {cell: pool.submit(_run_cell, cell, sessions, split, cfg) for cell in cells}
            for cell, future in futures.items():
                try:
                    records[cell] = future.result()
                except Exception as error:
                    # the worker died before _run_cell could record the failure
                    logger.error("%s failed in the worker pool: %s", cell.dir_name, error)
                    records[cell] = RunRecord(cell=cell, status="failed", error=f"{type(error).__name__}: {error}")
                if on_record:
                    on_record(records[cell])
    failed = sum(not record.ok for record in records.values())
    logger.info("trained %d cells, %d failed", len(cells), failed)
    return [records[cell] for cell in cells]


def write_run(record: RunRecord, cell_dir, snapshot: Optional[dict] = None) -> Path:
    """Write one cell's run directory.

    Files: ``config.yaml`` (snapshot plus cell and outcome), ``metrics.csv``
    (epoch, train_loss, test_acc), ``checkpoint.ckpt``, ``scores.csv`` and
    finally the ``DONE`` marker, or ``FAILED`` holding the error text.
    """
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    config = dict(snapshot or {})
    config.update(
        {
            "run_format_version": RUN_FORMAT_VERSION,
            "checkpoint_format_version": models.CHECKPOINT_FORMAT_VERSION,
            "cell": asdict(record.cell),
            "status": record.status,
            "peak_epoch": record.peak_epoch,
        }
    )
    (cell_dir / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")
    if not record.ok:
        (cell_dir / FAILED_MARKER).write_text(record.error + "\n", encoding="utf-8")
        return cell_dir

    with open(cell_dir / "metrics.csv", "w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream)
        writer.writerow(["epoch", "train_loss", "test_acc"])
        for epoch, (loss, acc) in enumerate(zip(record.train_losses, record.test_accuracies), start=1):
            writer.writerow([epoch, repr(float(loss)), repr(float(acc))])
    with open(cell_dir / "scores.csv", "w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream)
        writer.writerow(["score", "label", "user_id", "passcode", "session_index", "start_frame"])
        for scored in record.peak_scores:
            writer.writerow([repr(scored.score), scored.label, *scored.source])
    if record.checkpoint is not None:
        models.save_checkpoint(record.checkpoint, cell_dir / "checkpoint.ckpt")
    (cell_dir / DONE_MARKER).write_text("ok\n", encoding="utf-8")
    return cell_dir


def read_run(cell_dir) -> RunRecord:
    """Load a completed run directory written by :func:`write_run`.

    Raises
    ------
    DataError
        If the directory has no ``DONE`` marker.
    """
    cell_dir = Path(cell_dir)
    if not (cell_dir / DONE_MARKER).exists():
        raise DataError(f"{cell_dir}: run is not complete")
    config = yaml.safe_load((cell_dir / "config.yaml").read_text(encoding="utf-8"))
    record = RunRecord(cell=GridCell(**config["cell"]))
    with open(cell_dir / "metrics.csv", newline="", encoding="utf-8") as stream:
        for row in csv.DictReader(stream):
            record.train_losses.append(float(row["train_loss"]))
            record.test_accuracies.append(float(row["test_acc"]))
    if not record.test_accuracies:
        raise DataError(f"{cell_dir}: metrics.csv holds no epochs")
    record.peak_accuracy = max(record.test_accuracies)
    record.peak_epoch = record.test_accuracies.index(record.peak_accuracy) + 1
    record.last_accuracy = record.test_accuracies[-1]
    with open(cell_dir / "scores.csv", newline="", encoding="utf-8") as stream:
        for row in csv.DictReader(stream):
            source = (row["user_id"], row["passcode"], int(row["session_index"]), int(row["start_frame"]))
            record.peak_scores.append(ScoredWindow(float(row["score"]), int(row["label"]), source))
    checkpoint = cell_dir / "checkpoint.ckpt"
    if checkpoint.exists():
        record.checkpoint = models.load_checkpoint(checkpoint)
    return record


def scan_runs(runs_dir) -> List[RunRecord]:
    """Read every completed run directory under ``runs_dir``, sorted by name."""
    runs_dir = Path(runs_dir)
    if not runs_dir.is_dir():
        return []
    return [read_run(path.parent) for path in sorted(runs_dir.glob(f"*/{DONE_MARKER}"))]
