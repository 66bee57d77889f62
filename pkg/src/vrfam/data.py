"""Session data model, session files, windowing and user-disjoint splits."""

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from vrfam.errors import ConfigurationError, DataError, SessionParseError, SessionValidationError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_FPS = 60.0
DEFAULT_CODES = ("2648", "2468", "1379", "3197")
QUATERNION_TOLERANCE = 1e-4
STD_FLOOR = 1e-8
TRAIN_FRACTION = 4 / 7

CHANNEL_MODES = {"position": 3, "position+orientation": 7}
SESSION_FIELDS = (
    "schema_version", "user_id", "familiar", "passcode", "session_index", "fps", "correct_entry", "frames",
)
FRAME_WIDTH = 8  # t, px, py, pz, qw, qx, qy, qz

_PASSCODE = re.compile(r"^[0-9]{4}$")


@dataclass
class FrameSample:
    """Pose of the dominant-hand index fingertip at one frame.

    Attributes:
        t (float): Seconds since the session start.
        position (tuple): x, y, z in meters.
        orientation (tuple): Unit quaternion w, x, y, z.
    """

    t: float
    position: Tuple[float, float, float]
    orientation: Tuple[float, float, float, float]


@dataclass
class Session:
    """One passcode-entry recording.

    ``frames`` is an array [T, 8] of (t, px, py, pz, qw, qx, qy, qz) rows in
    time order; :meth:`samples` exposes the rows as ``FrameSample`` objects.
    Sessions with ``correct_entry`` False are kept in memory but never
    windowed.
    """

    user_id: str
    familiar: bool
    passcode: str
    session_index: int
    fps: float
    frames: np.ndarray
    correct_entry: bool = True

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])

    @property
    def excluded(self) -> bool:
        return not self.correct_entry

    @property
    def label(self) -> int:
        return int(self.familiar)

    def samples(self) -> List[FrameSample]:
        return [FrameSample(float(r[0]), tuple(r[1:4]), tuple(r[4:8])) for r in self.frames]

    def to_record(self, decimals: Optional[int] = 6) -> dict:
        frames = self.frames if decimals is None else np.round(self.frames, decimals)
        return {
            "schema_version": SCHEMA_VERSION,
            "user_id": self.user_id,
            "familiar": bool(self.familiar),
            "passcode": self.passcode,
            "session_index": int(self.session_index),
            "fps": float(self.fps),
            "correct_entry": bool(self.correct_entry),
            "frames": frames.tolist(),
        }


@dataclass
class Window:
    """A fixed-length slice of one session's channel matrix."""

    values: np.ndarray
    label: int
    source: Tuple[str, str, int, int]  # user_id, passcode, session_index, start_frame


@dataclass
class WindowSet:
    """Stacked windows ready for batching.

    Attributes:
        values (np.ndarray): [N, W, C] float32.
        labels (np.ndarray): [N] int64, 1 = familiar.
        sources (list): (user_id, passcode, session_index, start_frame) per window.
    """

    values: np.ndarray
    labels: np.ndarray
    sources: List[Tuple[str, str, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def users(self) -> Set[str]:
        return {source[0] for source in self.sources}

    def class_counts(self) -> Tuple[int, int]:
        positives = int(self.labels.sum())
        return len(self) - positives, positives

    @classmethod
    def from_windows(cls, windows: Sequence[Window], window_size: int, channels: int) -> "WindowSet":
        if not windows:
            return cls(np.zeros((0, window_size, channels), np.float32), np.zeros(0, np.int64), [])
        return cls(
            np.stack([w.values for w in windows]).astype(np.float32),
            np.array([w.label for w in windows], dtype=np.int64),
            [w.source for w in windows],
        )

    def subset(self, indices: np.ndarray) -> "WindowSet":
        return WindowSet(self.values[indices], self.labels[indices], [self.sources[i] for i in indices])


@dataclass
class SplitPlan:
    """User-disjoint train/test partition."""

    train_users: Set[str]
    test_users: Set[str]
    seed: int

    def to_dict(self) -> dict:
        return {"train_users": sorted(self.train_users), "test_users": sorted(self.test_users), "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "SplitPlan":
        return cls(set(data["train_users"]), set(data["test_users"]), int(data["seed"]))


@dataclass
class NormStats:
    """Per-channel z-score statistics computed from training windows only."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, windows: WindowSet) -> WindowSet:
        values = (windows.values.astype(np.float64) - self.mean) / self.std
        return WindowSet(values.astype(np.float32), windows.labels, windows.sources)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(np.asarray(data["mean"], np.float64), np.asarray(data["std"], np.float64))


def _session_from_record(record: dict, path: str, line: int, codes: Optional[Iterable[str]]) -> Session:
    def fail(message: str):
        raise SessionValidationError(path, line, message)

    if not isinstance(record, dict):
        raise SessionParseError(path, line, "record is not an object")
    missing = [name for name in SESSION_FIELDS if name not in record]
    if missing:
        raise SessionParseError(path, line, f"missing fields {missing}")
    if record["schema_version"] != SCHEMA_VERSION:
        fail(f"unsupported schema_version {record['schema_version']}")
    for name in ("familiar", "correct_entry"):
        if not isinstance(record[name], bool):
            fail(f"{name} must be a JSON boolean, got {record[name]!r}")
    passcode = str(record["passcode"])
    if not _PASSCODE.match(passcode):
        fail(f"passcode {passcode!r} is not 4 digits")
    if codes is not None and passcode not in codes:
        fail(f"passcode {passcode} is not in the configured code set")
    fps = float(record["fps"])
    if fps <= 0:
        fail(f"fps must be positive, got {fps}")
    if int(record["session_index"]) < 1:
        fail(f"session_index must be >= 1, got {record['session_index']}")
    try:
        frames = np.asarray(record["frames"], dtype=np.float64)
    except (TypeError, ValueError):
        raise SessionParseError(path, line, "frames are not a numeric matrix") from None
    if frames.ndim != 2 or frames.shape[1] != FRAME_WIDTH or frames.shape[0] == 0:
        raise SessionParseError(path, line, f"frames must be a nonempty [T, {FRAME_WIDTH}] matrix")
    if not np.all(np.isfinite(frames)):
        fail("frames contain non-finite values")
    if np.any(np.diff(frames[:, 0]) <= 0):
        fail("frame times are not strictly increasing")
    norms = np.linalg.norm(frames[:, 4:8], axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > QUATERNION_TOLERANCE)
    if bad.size:
        fail(f"frame {int(bad[0])}: quaternion norm {norms[bad[0]]:.6f} is not 1")
    return Session(
        user_id=str(record["user_id"]),
        familiar=record["familiar"],
        passcode=passcode,
        session_index=int(record["session_index"]),
        fps=fps,
        frames=frames,
        correct_entry=record["correct_entry"],
    )


def load_sessions(path, codes: Optional[Iterable[str]] = None) -> List[Session]:
    """Load every session from a ``.jsonl`` file or a directory of them.

    Parameters
    ----------
    path : str or Path
        A session file, or a directory whose ``*.jsonl`` files are read in
        name order.
    codes : Iterable[str], optional
        Allowed passcodes; None accepts any 4-digit code.

    Returns
    -------
    List[Session]
        Parsed sessions, incorrect entries included (flagged ``excluded``).

    Raises
    ------
    SessionParseError
        A record is not valid JSON or lacks required fields.
    SessionValidationError
        A record violates a schema rule (passcode, time order, quaternion norm).
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.jsonl"))
    elif path.exists():
        files = [path]
    else:
        raise DataError(f"no session data at {path}")
    codes = set(codes) if codes is not None else None
    sessions: List[Session] = []
    for file in files:
        with open(file, "r", encoding="utf-8") as stream:
            for line_number, line in enumerate(stream, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as error:
                    raise SessionParseError(str(file), line_number, f"invalid JSON: {error.msg}") from None
                sessions.append(_session_from_record(record, str(file), line_number, codes))
    logger.debug("loaded %d sessions from %d files under %s", len(sessions), len(files), path)
    return sessions


def write_sessions(sessions: Iterable[Session], path, decimals: Optional[int] = 6) -> None:
    """Write sessions as one JSON record per line (inverse of load_sessions)."""
    with open(path, "w", encoding="utf-8") as stream:
        for session in sessions:
            stream.write(json.dumps(session.to_record(decimals), separators=(",", ":")))
            stream.write("\n")


def extract_channels(session: Session, mode: str = "position") -> np.ndarray:
    """Return the [T, C] channel matrix of a session.

    ``position`` gives C = 3 (x, y, z); ``position+orientation`` gives C = 7
    (x, y, z, qw, qx, qy, qz).
    """
    if mode not in CHANNEL_MODES:
        raise ConfigurationError(f"unknown channel mode {mode!r}; expected one of {sorted(CHANNEL_MODES)}")
    if session.frame_count == 0:
        raise DataError(f"session {session.user_id}/{session.passcode}/{session.session_index} is empty")
    return session.frames[:, 1:1 + CHANNEL_MODES[mode]].copy()


def sliding_windows(
    matrix: np.ndarray,
    window_size: int,
    step: int = 1,
    label: int = 0,
    source: Tuple[str, str, int] = ("", "", 0),
) -> List[Window]:
    """Cut ``matrix`` [T, C] into windows of ``window_size`` consecutive rows.

    Window ``i`` covers rows ``[i*step, i*step + window_size)``. With step 1
    there are exactly ``max(0, T - window_size + 1)`` windows.
    """
    if window_size < 1 or step < 1:
        raise ConfigurationError(f"window_size and step must be >= 1, got {window_size}, {step}")
    length = matrix.shape[0]
    if length < window_size:
        logger.info("session %s has %d frames, fewer than window %d; no windows", source, length, window_size)
        return []
    views = sliding_window_view(matrix, window_size, axis=0)[::step]
    return [
        Window(values=view.T, label=int(label), source=(*source, start * step))
        for start, view in enumerate(views)
    ]


def window_count(length: int, window_size: int, step: int = 1) -> int:
    if length < window_size:
        return 0
    return (length - window_size) // step + 1


def build_windows(
    sessions: Iterable[Session],
    users: Set[str],
    code: str,
    window_size: int,
    mode: str = "position",
    step: int = 1,
) -> WindowSet:
    """Window every included session of ``users`` entering ``code``."""
    windows: List[Window] = []
    for session in sessions:
        if session.excluded or session.user_id not in users or session.passcode != code:
            continue
        windows.extend(
            sliding_windows(
                extract_channels(session, mode),
                window_size,
                step,
                label=session.label,
                source=(session.user_id, session.passcode, session.session_index),
            )
        )
    return WindowSet.from_windows(windows, window_size, CHANNEL_MODES[mode])


def user_labels(sessions: Iterable[Session]) -> List[Tuple[str, bool]]:
    """Return the distinct (user_id, familiar) pairs, sorted by user id."""
    labels = {}
    for session in sessions:
        previous = labels.setdefault(session.user_id, session.familiar)
        if previous != session.familiar:
            raise DataError(f"user {session.user_id} has conflicting familiarity labels")
    return sorted(labels.items())


def train_share(user_count: int) -> int:
    """Return how many of ``user_count`` users of one class go to training.

    Seven users split 4/3; other counts keep that ratio, rounding halves
    towards training and leaving at least one user on each side.
    """
    share = math.floor(TRAIN_FRACTION * user_count + 0.5)
    return min(max(share, 1), user_count - 1)


def make_split(users: Sequence[Tuple[str, bool]], seed: int) -> SplitPlan:
    """Build a user-disjoint split with a seeded shuffle inside each class.

    Raises
    ------
    ConfigurationError
        If a class has fewer than two users.
    """
    rng = np.random.default_rng(seed)
    train, test = set(), set()
    for familiar in (True, False):
        members = sorted(user for user, label in users if bool(label) == familiar)
        if len(members) < 2:
            kind = "familiar" if familiar else "unfamiliar"
            raise ConfigurationError(f"need at least 2 {kind} users to split, got {len(members)}")
        order = rng.permutation(len(members))
        share = train_share(len(members))
        train.update(members[i] for i in order[:share])
        test.update(members[i] for i in order[share:])
    return SplitPlan(train_users=train, test_users=test, seed=seed)


def compute_norm_stats(train: WindowSet) -> NormStats:
    if len(train) == 0:
        raise DataError("cannot compute normalization statistics from an empty training set")
    values = train.values.astype(np.float64).reshape(-1, train.values.shape[-1])
    return NormStats(values.mean(axis=0), np.maximum(values.std(axis=0), STD_FLOOR))


def normalize(train: WindowSet, test: WindowSet) -> Tuple[WindowSet, WindowSet, NormStats]:
    """Z-score both sets per channel with statistics of ``train`` only."""
    stats = compute_norm_stats(train)
    return stats.apply(train), stats.apply(test), stats
