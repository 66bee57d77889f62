import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vrfam import data
from vrfam.errors import ConfigurationError, DataError, SessionParseError, SessionValidationError


def make_session(user_id="P01", familiar=True, passcode="2648", index=1, frames=200, correct=True, seed=0):
    rng = np.random.default_rng(seed)
    times = np.arange(frames) / 60.0
    positions = rng.standard_normal((frames, 3)) * 0.01
    orientation = np.tile([1.0, 0.0, 0.0, 0.0], (frames, 1))
    return data.Session(
        user_id=user_id,
        familiar=familiar,
        passcode=passcode,
        session_index=index,
        fps=60.0,
        frames=np.column_stack([times, positions, orientation]),
        correct_entry=correct,
    )


def write_records(path, records):
    path.write_text("\n".join(json.dumps(record) for record in records) + "\n", encoding="utf-8")


def test_load_empty_directory(tmp_path):
    assert data.load_sessions(tmp_path) == []


def test_load_missing_path(tmp_path):
    with pytest.raises(DataError):
        data.load_sessions(tmp_path / "absent")


def test_write_then_load_one_session(tmp_path):
    session = make_session(frames=300)
    path = tmp_path / "sessions.jsonl"
    data.write_sessions([session], path)

    loaded = data.load_sessions(tmp_path)

    assert len(loaded) == 1
    assert loaded[0].frame_count == 300
    assert loaded[0].user_id == "P01" and loaded[0].passcode == "2648" and loaded[0].familiar
    assert np.allclose(loaded[0].frames, session.frames, atol=1e-6)


def test_unknown_fields_are_tolerated(tmp_path):
    record = make_session(frames=5).to_record()
    record["headset"] = "pilot"
    write_records(tmp_path / "s.jsonl", [record])
    assert len(data.load_sessions(tmp_path / "s.jsonl")) == 1


@pytest.mark.parametrize(
    "field,value",
    [
        # five-digit passcode
        ("passcode", "26480"),
        ("passcode", "26a8"),
        ("fps", 0),
        ("session_index", 0),
        ("schema_version", 99),
        # labels spelled as strings or numbers
        ("familiar", "false"),
        ("familiar", 1),
        ("correct_entry", "true"),
    ],
)
def test_invalid_record_names_file_and_line(tmp_path, field, value):
    good = make_session(frames=5).to_record()
    bad = dict(good, **{field: value})
    path = tmp_path / "s.jsonl"
    write_records(path, [good, bad])

    with pytest.raises(SessionValidationError) as error:
        data.load_sessions(path)

    assert error.value.line == 2
    assert error.value.path == str(path)
    assert f"{path}:2:" in str(error.value)


def test_quaternion_norm_violation(tmp_path):
    record = make_session(frames=5).to_record()
    record["frames"][3][4] = 0.9
    write_records(tmp_path / "s.jsonl", [record])
    with pytest.raises(SessionValidationError, match="quaternion"):
        data.load_sessions(tmp_path)


def test_frames_out_of_time_order(tmp_path):
    record = make_session(frames=5).to_record()
    record["frames"][2][0] = record["frames"][1][0]
    write_records(tmp_path / "s.jsonl", [record])
    with pytest.raises(SessionValidationError, match="increasing"):
        data.load_sessions(tmp_path)


def test_malformed_line(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text(json.dumps(make_session(frames=5).to_record()) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(SessionParseError) as error:
        data.load_sessions(path)
    assert error.value.line == 2


def test_missing_field(tmp_path):
    record = make_session(frames=5).to_record()
    del record["frames"]
    write_records(tmp_path / "s.jsonl", [record])
    with pytest.raises(SessionParseError, match="frames"):
        data.load_sessions(tmp_path)


def test_code_set_restricts_passcodes(tmp_path):
    write_records(tmp_path / "s.jsonl", [make_session(passcode="1234", frames=5).to_record()])
    with pytest.raises(SessionValidationError):
        data.load_sessions(tmp_path, codes=data.DEFAULT_CODES)


def test_incorrect_entries_are_kept_but_excluded(tmp_path):
    data.write_sessions([make_session(frames=5, correct=False)], tmp_path / "s.jsonl")
    (session,) = data.load_sessions(tmp_path)
    assert session.excluded


@pytest.mark.parametrize(
    "mode,channels",
    [
        # position only
        ("position", 3),
        ("position+orientation", 7),
    ],
)
def test_extract_channels(mode, channels):
    matrix = data.extract_channels(make_session(frames=10), mode)
    assert matrix.shape == (10, channels)
    if channels == 7:
        assert np.all(matrix[:, 3:] == [1.0, 0.0, 0.0, 0.0])


def test_extract_channels_unknown_mode():
    with pytest.raises(ConfigurationError):
        data.extract_channels(make_session(frames=10), "velocity")


@pytest.mark.parametrize(
    "length,window_size,expected",
    [
        # window as long as the session
        (50, 50, 1),
        (300, 120, 181),
        # session shorter than the window
        (49, 50, 0),
    ],
)
def test_sliding_window_count(length, window_size, expected):
    matrix = np.arange(length * 3, dtype=float).reshape(length, 3)
    windows = data.sliding_windows(matrix, window_size)
    assert len(windows) == expected == data.window_count(length, window_size)


def test_sliding_windows_cover_consecutive_rows():
    matrix = np.arange(20 * 3, dtype=float).reshape(20, 3)
    windows = data.sliding_windows(matrix, 5, label=1, source=("P01", "2648", 3))
    for index, window in enumerate(windows):
        assert np.array_equal(window.values, matrix[index:index + 5])
        assert window.source == ("P01", "2648", 3, index)
        assert window.label == 1


def test_sliding_windows_with_step():
    windows = data.sliding_windows(np.zeros((20, 3)), 5, step=4)
    assert [w.source[-1] for w in windows] == [0, 4, 8, 12]
    assert len(windows) == data.window_count(20, 5, 4)


def test_short_session_is_reported(caplog):
    with caplog.at_level(logging.INFO, logger="vrfam.data"):
        assert data.sliding_windows(np.zeros((10, 3)), 50) == []
    assert "fewer than window" in caplog.text


@pytest.mark.parametrize("window_size", [50, 60, 70, 80, 90, 100, 110, 120])
def test_window_count_identity(window_size):
    sessions = [
        make_session("P01", True, frames=130, index=1),
        make_session("P01", True, frames=260, index=2),
        make_session("P02", False, frames=90, index=1),
        make_session("P02", False, frames=400, index=2, correct=False),
    ]
    windows = data.build_windows(sessions, {"P01", "P02"}, "2648", window_size)
    included = [s for s in sessions if s.correct_entry]
    assert len(windows) == sum(max(0, s.frame_count - window_size + 1) for s in included)
    labels = {s.user_id: s.label for s in sessions}
    assert all(label == labels[source[0]] for label, source in zip(windows.labels, windows.sources))


def test_build_windows_filters_users_and_code():
    sessions = [make_session("P01", True, frames=60), make_session("P02", False, "1379", frames=60)]
    windows = data.build_windows(sessions, {"P01"}, "2648", 50)
    assert windows.values.shape == (11, 50, 3)
    assert windows.users == {"P01"}
    assert windows.class_counts() == (0, 11)
    empty = data.build_windows(sessions, {"P03"}, "2648", 50)
    assert empty.values.shape == (0, 50, 3)


@pytest.mark.parametrize(
    "users,expected",
    [
        # 7 users per class, 4/3 per class
        (7, 4),
        (2, 1),
        (3, 2),
        (14, 8),
    ],
)
def test_train_share(users, expected):
    assert data.train_share(users) == expected


def class_users(per_class=7):
    return [(f"F{i}", True) for i in range(per_class)] + [(f"U{i}", False) for i in range(per_class)]


def test_seven_per_class_split():
    plan = data.make_split(class_users(), seed=0)
    assert sum(user.startswith("F") for user in plan.train_users) == 4
    assert sum(user.startswith("U") for user in plan.train_users) == 4
    assert len(plan.test_users) == 6


def test_split_is_deterministic():
    assert data.make_split(class_users(), 42) == data.make_split(class_users(), 42)


def test_two_users_per_class():
    plan = data.make_split(class_users(2), seed=1)
    assert len(plan.train_users) == len(plan.test_users) == 2
    assert not plan.train_users & plan.test_users


def test_split_needs_two_users_per_class():
    with pytest.raises(ConfigurationError):
        data.make_split([("F0", True), ("U0", False), ("U1", False)], seed=0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), familiar=st.integers(2, 12), unfamiliar=st.integers(2, 12))
def test_split_hygiene(seed, familiar, unfamiliar):
    users = [(f"F{i}", True) for i in range(familiar)] + [(f"U{i}", False) for i in range(unfamiliar)]
    plan = data.make_split(users, seed)
    assert not plan.train_users & plan.test_users
    assert plan.train_users | plan.test_users == {user for user, _ in users}
    train_familiar = sum(user.startswith("F") for user in plan.train_users)
    assert train_familiar == data.train_share(familiar)
    assert len(plan.train_users) - train_familiar == data.train_share(unfamiliar)


def test_split_dict_round_trip():
    plan = data.make_split(class_users(), seed=3)
    assert data.SplitPlan.from_dict(plan.to_dict()) == plan


def windowset(values, label=0):
    values = np.asarray(values, dtype=np.float32)
    sources = [("P", "2648", 1, i) for i in range(len(values))]
    return data.WindowSet(values, np.full(len(values), label, dtype=np.int64), sources)


def test_normalize_uses_training_statistics_only():
    rng = np.random.default_rng(0)
    train = windowset(rng.standard_normal((20, 10, 3)) * 3 + 5)
    test = windowset(rng.standard_normal((8, 10, 3)) + 100)

    train_n, test_n, stats = data.normalize(train, test)
    _, _, other_stats = data.normalize(train, windowset(np.zeros((4, 10, 3))))

    assert np.allclose(train_n.values.reshape(-1, 3).mean(axis=0), 0.0, atol=1e-5)
    assert test_n.values.mean() > 10
    assert np.array_equal(stats.mean, other_stats.mean) and np.array_equal(stats.std, other_stats.std)


def test_normalize_constant_channel():
    values = np.ones((4, 5, 3))
    values[..., 0] = np.arange(20).reshape(4, 5)
    train_n, _, stats = data.normalize(windowset(values), windowset(values[:1]))
    assert np.all(train_n.values[..., 1:] == 0.0)
    assert stats.std[1] == data.STD_FLOOR


def test_normalize_needs_training_windows():
    with pytest.raises(DataError):
        data.normalize(windowset(np.zeros((0, 5, 3))), windowset(np.zeros((1, 5, 3))))


def test_norm_stats_dict_round_trip():
    stats = data.NormStats(np.array([0.1, 1 / 3, 2.5]), np.array([1.0, 1e-8, 7 / 9]))
    restored = data.NormStats.from_dict(json.loads(json.dumps(stats.to_dict())))
    assert np.array_equal(restored.mean, stats.mean) and np.array_equal(restored.std, stats.std)


def test_conflicting_user_labels():
    with pytest.raises(DataError):
        data.user_labels([make_session("P01", True), make_session("P01", False, index=2)])
