"""Command-line entry point: synth, train, eval, report and gradcheck."""

import argparse
import logging
import shutil
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from vrfam import data, evaluation, gradcheck, models, plotting, synth, training
from vrfam.config import DataPaths, RunConfig, resolve, synth_config, train_config
from vrfam.errors import ConfigurationError, DataError, EvaluationError, ReportError, VrfamError
from vrfam.helpers import configure_logging, derive_seed

logger = logging.getLogger(__name__)


def _flag(value: bool) -> Optional[bool]:
    """Map an unset store_true flag to None so it does not override the config file."""
    return True if value else None


def cmd_synth(run: RunConfig, paths: DataPaths) -> int:
    """Generate a synthetic dataset and print its summary."""
    cfg = synth_config(run)
    out_dir = Path(run.get("out", paths.dataset))
    if (out_dir / "sessions.jsonl").exists() and not run.get("force", False):
        raise ConfigurationError(f"{out_dir} already holds a dataset; pass --force to overwrite it")
    sessions = synth.synth_dataset(cfg)
    manifest = synth.write_dataset(sessions, cfg, out_dir)
    print(f"users:    {manifest['users']}")
    print(f"sessions: {manifest['sessions']}")
    print(f"frames:   {manifest['frames']}")
    print(f"sha256:   {manifest['sessions_sha256']}")
    if run.get("plot", False):
        familiar = next(s.user_id for s in sessions if s.familiar)
        unfamiliar = next(s.user_id for s in sessions if not s.familiar)
        plotting.emit_trajectory_plot(sessions, out_dir / "trajectories.svg", users=[familiar, unfamiliar])
    return 0


def _grid(run: RunConfig):
    kinds, windows, codes = run.get("kinds"), run.get("windows"), run.get("codes")
    if run.get("matrix", False):
        # --kind, --window and --code narrow the full grid
        kinds = kinds or models.MODEL_KINDS
        windows = windows or training.MATRIX_WINDOW_SIZES
        codes = codes or data.DEFAULT_CODES
    if not (kinds and windows and codes):
        raise ConfigurationError("give --kind, --window and --code, or --matrix for the full grid")
    for kind in kinds:
        if kind not in models.MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {kind!r}; expected one of {models.MODEL_KINDS}")
    return tuple(kinds), tuple(int(w) for w in windows), tuple(str(c) for c in codes)


def cmd_train(run: RunConfig, paths: DataPaths) -> int:
    """Train the requested grid cells; exit status 1 if any cell failed."""
    cfg = train_config(run)
    kinds, windows, codes = _grid(run)
    data_path = Path(run.get("data", paths.dataset))
    out_dir = Path(run.get("out", paths.runs))

    sessions = data.load_sessions(data_path)
    present = {s.passcode for s in sessions if not s.excluded}
    missing = [code for code in codes if code not in present]
    if missing:
        raise DataError(f"{data_path}: no correct entries for passcodes {missing}")
    split = data.make_split(data.user_labels(sessions), derive_seed(run.seed, "split"))
    logger.info("train users %s, test users %s", sorted(split.train_users), sorted(split.test_users))

    cells = training.grid_cells(kinds, windows, codes)
    existing = [out_dir / cell.dir_name for cell in cells if (out_dir / cell.dir_name).exists()]
    if existing and not run.get("force", False):
        raise ConfigurationError(
            f"{len(existing)} run directories already exist under {out_dir} "
            f"(first: {existing[0].name}); pass --force to overwrite them"
        )
    for path in existing:
        shutil.rmtree(path)

    snapshot = run.snapshot()
    snapshot.update({"data": str(data_path), "split": split.to_dict(), "train_config": cfg.to_dict()})

    def write(record: training.RunRecord) -> None:
        path = training.write_run(record, out_dir / record.cell.dir_name, snapshot)
        logger.info("wrote %s (%s)", path, record.status)

    records = training.train_matrix(
        kinds, windows, codes, sessions, split, cfg, workers=int(run.get("workers", 1)), on_record=write
    )
    for record in records:
        if record.ok:
            print(f"{record.cell.dir_name}: peak {record.peak_accuracy:.4f} (epoch {record.peak_epoch}), "
                  f"last {record.last_accuracy:.4f}")
        else:
            print(f"{record.cell.dir_name}: FAILED {record.error}")
    return 0 if all(record.ok for record in records) else 1


def _completed_runs(runs_dir: Path) -> List[Path]:
    done = sorted(path.parent for path in runs_dir.glob(f"*/{training.DONE_MARKER}"))
    if not done:
        raise ReportError(f"no completed runs under {runs_dir}")
    return done


def _check_checkpoint(record: training.RunRecord, cell_dir: Path, data_path: Path) -> float:
    """Re-score the stored test windows with the checkpoint and compare to the peak accuracy."""
    config = yaml.safe_load((cell_dir / "config.yaml").read_text(encoding="utf-8"))
    cfg = training.TrainConfig(**config["train_config"])
    split = data.SplitPlan.from_dict(config["split"])
    sessions = data.load_sessions(data_path)
    cell = record.cell
    windows = data.build_windows(
        sessions, split.test_users, cell.code, cell.window_size, cfg.channel_mode, cfg.test_step
    )
    rescored = evaluation.accuracy(training.rescore(record.checkpoint, windows, cfg.eval_batch_size))
    if rescored != record.peak_accuracy:
        raise EvaluationError(
            f"{cell.dir_name}: checkpoint scores {rescored:.6f}, recorded peak is {record.peak_accuracy:.6f}"
        )
    return rescored


def cmd_eval(run: RunConfig, paths: DataPaths) -> int:
    """Write ROC dumps and per-cell metrics; optionally re-score checkpoints against the dataset."""
    runs_dir = Path(run.get("runs", paths.runs))
    data_path = run.get("data")
    failures = 0
    for cell_dir in _completed_runs(runs_dir):
        record = training.read_run(cell_dir)
        summary: Dict[str, object] = {
            "peak_accuracy": record.peak_accuracy,
            "peak_epoch": record.peak_epoch,
            "last_accuracy": record.last_accuracy,
            "window_accuracy": evaluation.accuracy(record.peak_scores),
        }
        try:
            curve = evaluation.roc(record.peak_scores)
            evaluation.write_roc_points(curve, cell_dir / "roc.csv")
            summary["auc"] = curve.auc
            summary["pairwise_auc"] = evaluation.pairwise_auc(record.peak_scores)
            if data_path:
                summary["rescored_accuracy"] = _check_checkpoint(record, cell_dir, Path(data_path))
        except VrfamError as error:
            logger.error("%s", error)
            summary["error"] = str(error)
            failures += 1
        (cell_dir / "evaluation.yaml").write_text(yaml.safe_dump(summary, sort_keys=True), encoding="utf-8")
        auc = summary.get("auc")
        print(f"{cell_dir.name}: peak {record.peak_accuracy:.4f}, auc {'-' if auc is None else f'{auc:.4f}'}")
    return 0 if failures == 0 else 1


def cmd_report(run: RunConfig, paths: DataPaths) -> int:
    """Write the accuracy and AUC grids plus the ROC panel plot."""
    runs_dir = Path(run.get("runs", paths.runs))
    out_dir = Path(run.get("out", paths.report))
    records = [training.read_run(cell_dir) for cell_dir in _completed_runs(runs_dir)]
    results = [record.cell_result() for record in records]
    tables = evaluation.report_tables(results, metric=run.get("metric", "peak"))
    for path in evaluation.write_report(tables, out_dir):
        logger.info("wrote %s", path)

    curves: Dict[tuple, Dict[int, evaluation.RocCurve]] = {}
    for result in results:
        if result.roc is not None:
            curves.setdefault((result.kind, result.code), {})[result.window_size] = result.roc
    if curves:
        plotting.emit_roc_plot(curves, out_dir / "roc.svg")
    print(evaluation.render_grid(tables, tables.accuracy, "Classification accuracy"))
    print(evaluation.render_grid(tables, tables.auc, "Area under the ROC curve"))
    missing_roc = len(results) - sum(len(panel) for panel in curves.values())
    return 0 if missing_roc == 0 else 1


def cmd_gradcheck(run: RunConfig, paths: DataPaths) -> int:
    """Print the finite-difference check of every primitive."""
    results = gradcheck.run_all(run.seed)
    print(f"{'primitive':<20} {'shapes':<44} {'max rel err':>12}  result")
    for result in results:
        shapes = " ".join("x".join(map(str, shape)) or "()" for shape in result.shapes)
        print(f"{result.name:<20} {shapes:<44} {result.max_relative_error:>12.3e}  "
              f"{'PASS' if result.passed else 'FAIL'}")
    failed = sum(not result.passed for result in results)
    print(f"{len(results) - failed}/{len(results)} passed")
    return 0 if failed == 0 else 1


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vrfam",
        description="Detect VR familiarity from hand trajectories recorded during passcode entry.",
    )
    parser.add_argument("--log-level", default="INFO", help="Logging level, e.g. DEBUG or WARNING")
    parser.add_argument("--config", help="YAML file with per-command sections and a shared seed")
    commands = parser.add_subparsers(dest="command", required=True)

    synth_parser = commands.add_parser("synth", help="Generate a synthetic keypad dataset")
    synth_parser.add_argument("--out", help="Dataset directory (default: $VRFAM_DATA_ROOT/dataset)")
    synth_parser.add_argument("--users-per-class", dest="users_per_class", type=int)
    synth_parser.add_argument("--sessions-per-code", dest="sessions_per_code", type=int)
    synth_parser.add_argument("--codes", nargs="+", help="Passcodes every user enters")
    synth_parser.add_argument("--fps", type=float)
    synth_parser.add_argument("--delta", help="Familiarity gap: none, weak, strong or a number")
    synth_parser.add_argument("--seed", type=int)
    synth_parser.add_argument("--plot", action="store_true", help="Also write trajectories.svg")
    synth_parser.add_argument("--force", action="store_true", help="Overwrite an existing dataset")

    train_parser = commands.add_parser("train", help="Train one grid cell or the full matrix")
    train_parser.add_argument("--data", help="Session file or directory (default: $VRFAM_DATA_ROOT/dataset)")
    train_parser.add_argument("--out", help="Runs directory (default: $VRFAM_DATA_ROOT/runs)")
    train_parser.add_argument("--kind", "--kinds", dest="kinds", nargs="+", choices=models.MODEL_KINDS)
    train_parser.add_argument("--window", "--windows", dest="windows", nargs="+", type=int)
    train_parser.add_argument("--code", "--codes", dest="codes", nargs="+")
    train_parser.add_argument(
        "--matrix", action="store_true", help="Train the full grid; --kind, --window and --code narrow it"
    )
    train_parser.add_argument("--epochs", type=int)
    train_parser.add_argument("--batch-size", dest="batch_size", type=int)
    train_parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    train_parser.add_argument("--train-step", dest="train_step", type=int, help="Window step for training sessions")
    train_parser.add_argument("--test-step", dest="test_step", type=int, help="Window step for test sessions")
    train_parser.add_argument("--eval-batch-size", dest="eval_batch_size", type=int)
    train_parser.add_argument("--channel-mode", dest="channel_mode", choices=sorted(data.CHANNEL_MODES))
    train_parser.add_argument("--workers", type=int, help="Process pool size for the grid")
    train_parser.add_argument("--seed", type=int)
    train_parser.add_argument("--force", action="store_true", help="Overwrite existing run directories")

    eval_parser = commands.add_parser("eval", help="Write ROC dumps and check completed runs")
    eval_parser.add_argument("--runs", help="Runs directory (default: $VRFAM_DATA_ROOT/runs)")
    eval_parser.add_argument("--data", help="Dataset to re-score checkpoints against")

    report_parser = commands.add_parser("report", help="Write accuracy/AUC grids and ROC plots")
    report_parser.add_argument("--runs", help="Runs directory (default: $VRFAM_DATA_ROOT/runs)")
    report_parser.add_argument("--out", help="Report directory (default: $VRFAM_DATA_ROOT/report)")
    report_parser.add_argument("--metric", choices=("peak", "last"), help="Accuracy reported per cell")

    gradcheck_parser = commands.add_parser("gradcheck", help="Finite-difference check of every primitive")
    gradcheck_parser.add_argument("--seed", type=int)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the command and return its exit status."""
    arguments = build_parser().parse_args(argv)
    configure_logging(arguments.log_level)
    flags = {
        key: value
        for key, value in vars(arguments).items()
        if key not in ("command", "log_level", "config")
    }
    for key in ("plot", "force", "matrix"):
        if key in flags:
            flags[key] = _flag(flags[key])
    try:
        run = resolve(arguments.command, flags, arguments.config)
        return HANDLERS[arguments.command](run, DataPaths.from_env())
    except VrfamError as error:
        logger.error("%s", error)
        return 1
    except OSError as error:
        logger.error("%s: %s", getattr(error, "filename", None) or "I/O error", error.strerror or error)
        return 1
