import logging
import math

import numpy as np
import pytest

from vrfam import data, evaluation, models, synth, training
from vrfam.errors import ConfigurationError, DataError, DimensionError, EvaluationError
from vrfam.evaluation import ScoredWindow
from vrfam.helpers import derive_seed
from vrfam.tensor import Tensor

CODE = "2648"


@pytest.fixture(scope="module")
def sessions():
    cfg = synth.SynthConfig(users_per_class=2, sessions_per_code=2, codes=(CODE,), delta=3.0, seed=4)
    return synth.synth_dataset(cfg)


@pytest.fixture(scope="module")
def split(sessions):
    return data.make_split(data.user_labels(sessions), seed=derive_seed(4, "split"))


def quick_config(**overrides):
    settings = dict(epochs=3, batch_size=16, train_step=10, test_step=10, seed=1)
    settings.update(overrides)
    return training.TrainConfig(**settings)


@pytest.mark.parametrize(
    "probs,labels,expected",
    [
        # uniform prediction
        ([[0.5, 0.5]], [1], math.log(2)),
        # confident and right
        ([[0.0, 1.0]], [1], 0.0),
        # confident and wrong hits the probability floor
        ([[1.0, 0.0]], [1], -math.log(1e-7)),
        ([[0.5, 0.5], [0.0, 1.0]], [1, 1], math.log(2) / 2),
    ],
)
def test_bce_examples(probs, labels, expected):
    loss = training.bce_loss(Tensor(probs, dtype=np.float64), labels)
    assert loss.item() == pytest.approx(expected, abs=1e-6)


def test_bce_of_empty_batch():
    with pytest.raises(EvaluationError):
        training.bce_loss(Tensor(np.zeros((0, 2))), [])


def test_bce_is_a_mean_over_windows():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet([1.0, 1.0], size=10)
    labels = rng.integers(0, 2, 10)
    full = training.bce_loss(Tensor(probs, dtype=np.float64), labels).item()
    head = training.bce_loss(Tensor(probs[:4], dtype=np.float64), labels[:4]).item()
    tail = training.bce_loss(Tensor(probs[4:], dtype=np.float64), labels[4:]).item()
    assert full == pytest.approx((4 * head + 6 * tail) / 10, rel=1e-12)


def test_adam_first_step_moves_by_learning_rate():
    cfg = training.TrainConfig(learning_rate=0.01)
    params = {"w": np.array([1.0, -2.0])}
    training.adam_step(params, {"w": np.array([1.0, -4.0])}, training.AdamState(), cfg)
    step = 0.01 / (1 + 1e-8)
    assert params["w"] == pytest.approx([1.0 - step, -2.0 + 4.0 * 0.01 / (4.0 + 1e-8)], abs=1e-12)


@pytest.mark.parametrize(
    "grad",
    [
        # explicit zero
        np.zeros(3),
        # no gradient reached the parameter
        None,
    ],
)
def test_adam_zero_gradient_keeps_parameters(grad):
    params = {"w": np.array([0.5, 1.5, -3.0])}
    before = params["w"].copy()
    state = training.adam_step(params, {"w": grad}, training.AdamState(), training.TrainConfig())
    assert np.array_equal(params["w"], before)
    assert state.step == 1


def test_adam_descends_a_quadratic():
    cfg = training.TrainConfig(learning_rate=0.1)
    params, state = {"x": np.array([3.0])}, training.AdamState()
    for _ in range(300):
        training.adam_step(params, {"x": 2 * params["x"]}, state, cfg)
    assert abs(params["x"][0]) < 0.5
    assert state.step == 300


def test_adam_rejects_gradient_of_other_shape():
    with pytest.raises(DimensionError, match="w"):
        training.adam_step(
            {"w": np.zeros((2, 2))}, {"w": np.zeros(4)}, training.AdamState(), training.TrainConfig()
        )


def test_adam_over_module_parameters():
    model = models.build_mlp(models.ModelSpec("mlp", 4, 1))
    optimizer = training.Adam(model.parameters(), training.TrainConfig(learning_rate=0.05))
    x = Tensor(np.ones((3, 4, 1)))
    before = training.bce_loss(model(x), [1, 1, 1]).item()
    for _ in range(20):
        optimizer.zero_grad()
        loss = training.bce_loss(model(x), [1, 1, 1])
        loss.backward()
        optimizer.step()
    assert training.bce_loss(model(x), [1, 1, 1]).item() < before


@pytest.mark.parametrize(
    "overrides",
    [
        # no epoch at all
        {"epochs": 0},
        {"batch_size": 0},
        {"train_step": 0},
        {"learning_rate": -1.0},
        {"beta1": 1.0},
        {"channel_mode": "velocity"},
        {"hyper": {"cnn": {}}},
    ],
)
def test_invalid_train_config(overrides):
    with pytest.raises(ConfigurationError):
        training.TrainConfig(**overrides)


def test_grid_cells_order_and_names():
    cells = training.grid_cells(["mlp", "fcn"], [60, 50], ["2648", "1379"])
    assert [cell.dir_name for cell in cells[:3]] == ["mlp_2648_ws60", "mlp_2648_ws50", "mlp_1379_ws60"]
    assert len(cells) == 8


def test_train_cell_records_every_epoch(sessions, split):
    record = training.train_cell("mlp", 50, CODE, sessions, split, quick_config())
    assert record.ok
    assert len(record.train_losses) == len(record.test_accuracies) == 3
    assert record.peak_accuracy == max(record.test_accuracies)
    assert record.peak_epoch == record.test_accuracies.index(record.peak_accuracy) + 1
    assert record.last_accuracy == record.test_accuracies[-1]
    assert record.checkpoint.trained_on == models.TrainedOn(CODE, 50, split.seed)
    assert all(0.0 <= scored.score <= 1.0 for scored in record.peak_scores)


def test_training_is_deterministic(sessions, split):
    first = training.train_cell("mlp", 50, CODE, sessions, split, quick_config())
    second = training.train_cell("mlp", 50, CODE, sessions, split, quick_config())
    assert first.train_losses == second.train_losses
    assert first.test_accuracies == second.test_accuracies


@pytest.mark.parametrize("kind", models.MODEL_KINDS)
def test_zero_learning_rate_leaves_parameters_untouched(kind, sessions, split):
    cfg = quick_config(epochs=2, learning_rate=0.0, hyper={"fcn": {"filters": [4, 8, 4]}, "pct": {"d_model": 8}})
    record = training.train_cell(kind, 50, CODE, sessions, split, cfg)
    spec = models.ModelSpec(kind, 50, 3, hyper=cfg.hyper.get(kind, {}))
    initial = models.build_model(spec, seed=derive_seed(cfg.seed, "init", kind, CODE, 50))
    for name, tensor in initial.parameters().items():
        assert np.array_equal(record.checkpoint.parameters[name], tensor.data), name


def test_missing_class_in_test_users(sessions, split):
    familiar_only = {user for user, familiar in data.user_labels(sessions) if familiar}
    lopsided = data.SplitPlan(split.train_users, familiar_only - split.train_users, split.seed)
    with pytest.raises(DataError, match="unfamiliar"):
        training.train_cell("mlp", 50, CODE, sessions, lopsided, quick_config())


def test_single_cell_matrix(sessions, split):
    seen = []
    records = training.train_matrix(["mlp"], [50], [CODE], sessions, split, quick_config(), on_record=seen.append)
    assert len(records) == 1 and records[0].ok
    assert len(seen) == 1 and seen[0] is records[0]


def test_failed_cell_does_not_stop_the_grid(sessions, split):
    records = training.train_matrix(["mlp"], [50], ["1379", CODE], sessions, split, quick_config(epochs=1))
    assert [record.cell.code for record in records] == ["1379", CODE]
    assert records[0].status == "failed" and "1379" in records[0].error
    assert records[1].ok


def test_unexpected_error_in_a_cell_does_not_stop_the_grid(sessions, split, monkeypatch):
    def broken_fcn(spec, seed=0):
        raise ValueError("index can't contain negative values")

    monkeypatch.setitem(models.BUILDERS, "fcn", broken_fcn)
    records = training.train_matrix(["fcn", "mlp"], [50], [CODE], sessions, split, quick_config(epochs=1))
    assert records[0].status == "failed" and records[0].error.startswith("ValueError")
    assert records[1].ok


def test_invalid_hyper_fails_only_its_cell(sessions, split):
    cfg = quick_config(epochs=1, hyper={"fcn": {"kernels": [8, 0, 3]}})
    records = training.train_matrix(["fcn", "mlp"], [50], [CODE], sessions, split, cfg)
    assert records[0].status == "failed" and "kernels" in records[0].error
    assert records[1].ok


def test_run_directory_round_trip(tmp_path, sessions, split):
    cfg = quick_config()
    record = training.train_cell("mlp", 50, CODE, sessions, split, cfg)
    cell_dir = training.write_run(record, tmp_path / record.cell.dir_name, {"train_config": cfg.to_dict()})

    assert (cell_dir / training.DONE_MARKER).exists()
    loaded = training.read_run(cell_dir)
    assert loaded.cell == record.cell
    assert loaded.train_losses == record.train_losses
    assert loaded.test_accuracies == record.test_accuracies
    assert loaded.peak_epoch == record.peak_epoch
    assert [s.score for s in loaded.peak_scores] == [s.score for s in record.peak_scores]
    assert training.scan_runs(tmp_path)[0].cell == record.cell

    raw_test = data.build_windows(sessions, split.test_users, CODE, 50, step=cfg.test_step)
    rescored = training.rescore(loaded.checkpoint, raw_test, cfg.eval_batch_size)
    assert [s.score for s in rescored] == pytest.approx([s.score for s in loaded.peak_scores], abs=1e-6)
    assert [s.source for s in rescored] == [s.source for s in loaded.peak_scores]


def test_failed_run_directory(tmp_path):
    record = training.RunRecord(cell=training.GridCell("mlp", 50, CODE), status="failed", error="no windows")
    cell_dir = training.write_run(record, tmp_path / "mlp_2648_ws50")
    assert (cell_dir / training.FAILED_MARKER).read_text().strip() == "no windows"
    assert not (cell_dir / training.DONE_MARKER).exists()
    with pytest.raises(DataError):
        training.read_run(cell_dir)
    assert training.scan_runs(tmp_path) == []


def test_rescore_needs_normalization_statistics():
    spec = models.ModelSpec("mlp", 50, 3)
    checkpoint = models.Checkpoint.from_model(models.build_mlp(spec), spec, models.TrainedOn(CODE, 50, 0))
    with pytest.raises(DataError):
        training.rescore(checkpoint, data.WindowSet.from_windows([], 50, 3))


def test_single_class_scores_have_no_roc(caplog):
    record = training.RunRecord(
        cell=training.GridCell("mlp", 50, CODE),
        peak_accuracy=1.0,
        peak_scores=[ScoredWindow(0.9, 1), ScoredWindow(0.8, 1)],
    )
    with caplog.at_level(logging.WARNING, logger="vrfam.training"):
        result = record.cell_result()
    assert result.roc is None
    assert "no ROC" in caplog.text


@pytest.mark.slow
@pytest.mark.parametrize("kind", models.MODEL_KINDS)
def test_strong_gap_training_lowers_the_loss(kind, sessions, split):
    cfg = quick_config(epochs=8, hyper={"fcn": {"filters": [8, 16, 8]}, "pct": {"d_model": 16}})
    record = training.train_cell(kind, 50, CODE, sessions, split, cfg)
    assert record.train_losses[-1] < record.train_losses[0]


def test_small_grid_reruns_are_bit_identical(tmp_path, sessions, split):
    outputs = []
    for attempt in ("a", "b"):
        for record in training.train_matrix(["mlp"], [50, 60], [CODE], sessions, split, quick_config(epochs=2)):
            training.write_run(record, tmp_path / attempt / record.cell.dir_name)
        outputs.append(
            {
                path.relative_to(tmp_path / attempt): path.read_bytes()
                for path in sorted((tmp_path / attempt).glob("*/*"))
                if path.name in ("metrics.csv", "scores.csv", "checkpoint.ckpt")
            }
        )
    assert len(outputs[0]) == 6
    assert outputs[0] == outputs[1]


def seven_per_class_cell(kind, delta, seed=0, **overrides):
    """Train one W=50 cell on 7+7 synthetic users with 10 sessions each, seeded as the CLI does."""
    cfg = synth.SynthConfig(users_per_class=7, sessions_per_code=10, codes=(CODE,), delta=delta, seed=seed)
    sessions = synth.synth_dataset(cfg)
    split = data.make_split(data.user_labels(sessions), seed=derive_seed(seed, "split"))
    return training.train_cell(kind, 50, CODE, sessions, split, training.TrainConfig(seed=seed, **overrides))


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_null_gap_mlp_stays_at_chance(seed):
    record = seven_per_class_cell("mlp", 0.0, seed)
    assert record.peak_accuracy <= 0.65
    assert 0.40 <= evaluation.roc(record.peak_scores).auc <= 0.60


@pytest.mark.slow
@pytest.mark.parametrize(
    "kind,overrides",
    [
        # full settings: 100 epochs, every window
        ("mlp", {}),
        # reduced width and window step
        ("fcn", {"epochs": 30, "train_step": 5, "test_step": 5, "hyper": {"fcn": {"filters": [8, 16, 8]}}}),
        ("pct", {"epochs": 40, "train_step": 2, "test_step": 2, "hyper": {"pct": {"d_model": 32}}}),
    ],
)
def test_strong_gap_separates_held_out_users(kind, overrides):
    record = seven_per_class_cell(kind, 3.0, **overrides)
    assert record.peak_accuracy >= 0.9
