"""Synthetic keypad-entry trajectories with a controllable familiarity gap.

Each session is a chain of minimum-jerk reaches from a rest pose to the four
passcode digits and then to ``E``, with dwell pauses on every key. Unfamiliar
users get noise amplitudes and timing variability scaled by ``1 + delta``;
with ``delta = 0`` both classes come from the same distribution.
"""

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import yaml
from scipy.ndimage import gaussian_filter1d
from scipy.spatial.transform import Rotation

from vrfam import data
from vrfam.errors import ConfigurationError
from vrfam.helpers import derive_seed

logger = logging.getLogger(__name__)

DELTA_PRESETS = {"none": 0.0, "weak": 1.0, "strong": 3.0}
MIN_SESSION_FRAMES = 120
MIN_REACH_SECONDS = 0.3
MIN_DWELL_SECONDS = 0.12

KEY_ROWS = (("1", "2", "3"), ("4", "5", "6"), ("7", "8", "9"), ("C", "0", "E"))


@dataclass
class KeypadLayout:
    """Key centers of a 3x4 keypad mounted on a door, in meters.

    Rows are 123 / 456 / 789 / C0E from top to bottom. The panel lies in the
    x-y plane at depth ``origin[2]``; ``origin`` is the center of key ``1``.
    """

    pitch: float = 0.05
    origin: Tuple[float, float, float] = (-0.05, 1.25, 0.45)
    keys: Dict[str, np.ndarray] = field(init=False)

    def __post_init__(self):
        x0, y0, z0 = self.origin
        self.keys = {
            key: np.array([x0 + col * self.pitch, y0 - row * self.pitch, z0])
            for row, names in enumerate(KEY_ROWS)
            for col, key in enumerate(names)
        }

    @property
    def key_radius(self) -> float:
        return 0.4 * self.pitch

    def center(self, key: str) -> np.ndarray:
        if key not in self.keys:
            raise ConfigurationError(f"key {key!r} is not on the keypad")
        return self.keys[key]

    def code_path(self, code: str) -> List[np.ndarray]:
        """Return the key centers visited to enter ``code``: its digits, then ``E``."""
        return [self.center(key) for key in list(code) + ["E"]]

    def rest_position(self) -> np.ndarray:
        """Fingertip position before the first reach: below and in front of the panel."""
        middle = self.keys["5"]
        return middle + np.array([0.05, -0.25, -0.15])


@dataclass
class UserProfile:
    """Motor parameters of one synthetic participant."""

    user_id: str
    familiar: bool
    reach_seconds: float
    dwell_seconds: float


@dataclass
class SynthConfig:
    """Configuration of the synthetic dataset.

    Amplitudes are implementer-chosen defaults, not measured values. Per-user
    timing ranges are narrow next to the per-reach jitter: with no familiarity
    gap, timing does not identify a user.

    Attributes:
        users_per_class (int): Familiar users and unfamiliar users each.
        sessions_per_code (int): Correct entries per user and passcode.
        codes (tuple): Passcodes every user enters.
        fps (float): Sampling rate.
        delta (float): Familiarity gap; unfamiliar noise scales by 1 + delta.
        reach_seconds_range (tuple): Range of a user's mean reach duration.
        dwell_seconds_range (tuple): Range of a user's mean dwell on a key.
        timing_jitter (float): Log-normal sigma of per-reach/per-dwell timing.
        smooth_amplitude (float): Std of the low-frequency drift, meters.
        smooth_sigma_frames (float): Gaussian filter width of the drift.
        tremor_amplitude (float): Std of the tremor, meters.
        orientation_amplitude (float): Std of the orientation wobble, radians.
        seed (int): Master seed.
    """

    users_per_class: int = 7
    sessions_per_code: int = 10
    codes: Tuple[str, ...] = data.DEFAULT_CODES
    fps: float = data.DEFAULT_FPS
    delta: float = DELTA_PRESETS["weak"]
    reach_seconds_range: Tuple[float, float] = (0.44, 0.48)
    dwell_seconds_range: Tuple[float, float] = (0.2, 0.22)
    timing_jitter: float = 0.08
    smooth_amplitude: float = 0.004
    smooth_sigma_frames: float = 12.0
    tremor_amplitude: float = 0.002
    orientation_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.codes = tuple(str(code) for code in self.codes)
        self.reach_seconds_range = tuple(self.reach_seconds_range)
        self.dwell_seconds_range = tuple(self.dwell_seconds_range)
        self.validate()

    def validate(self) -> None:
        if self.users_per_class < 1 or self.sessions_per_code < 1:
            raise ConfigurationError("users_per_class and sessions_per_code must be >= 1")
        if self.fps <= 0:
            raise ConfigurationError(f"fps must be positive, got {self.fps}")
        if self.delta < 0:
            raise ConfigurationError(f"familiarity gap must be >= 0, got {self.delta}")
        for name in ("reach_seconds_range", "dwell_seconds_range"):
            low, high = getattr(self, name)
            if not 0 < low <= high:
                raise ConfigurationError(f"{name} must satisfy 0 < low <= high, got ({low}, {high})")
        if not self.codes:
            raise ConfigurationError("at least one passcode is required")
        layout = KeypadLayout()
        for code in self.codes:
            if len(code) != 4 or not code.isdigit():
                raise ConfigurationError(f"passcode {code!r} is not 4 digits")
            layout.code_path(code)

    def to_dict(self) -> dict:
        values = asdict(self)
        values["codes"] = list(self.codes)
        values["reach_seconds_range"] = list(self.reach_seconds_range)
        values["dwell_seconds_range"] = list(self.dwell_seconds_range)
        return values

    def noise_scale(self, familiar: bool) -> float:
        return 1.0 if familiar else 1.0 + self.delta


def min_jerk_profile(samples: int) -> Tuple[np.ndarray, np.ndarray]:
    """Return the normalized minimum-jerk position and velocity over tau in [0, 1].

    Velocity is d/dtau; divide by the duration for d/dt.
    """
    tau = np.linspace(0.0, 1.0, samples)
    position = 10 * tau**3 - 15 * tau**4 + 6 * tau**5
    velocity = 30 * tau**2 - 60 * tau**3 + 30 * tau**4
    return position, velocity


def synth_reach(start, goal, duration: float, fps: float, with_velocity: bool = False):
    """Sample a minimum-jerk reach from ``start`` to ``goal``.

    Parameters
    ----------
    start, goal : array_like
        3D endpoints in meters.
    duration : float
        Reach duration in seconds.
    fps : float
        Sampling rate; the reach has ``round(duration * fps) + 1`` samples,
        both endpoints included.
    with_velocity : bool, optional
        Also return the sampled velocity in m/s, by default False.

    Returns
    -------
    np.ndarray or tuple[np.ndarray, np.ndarray]
        Positions [N, 3] (and velocities [N, 3]).
    """
    if duration <= 0:
        raise ConfigurationError(f"reach duration must be positive, got {duration}")
    start, goal = np.asarray(start, np.float64), np.asarray(goal, np.float64)
    samples = max(int(round(duration * fps)) + 1, 2)
    shape, speed = min_jerk_profile(samples)
    positions = start + (goal - start) * shape[:, None]
    positions[0], positions[-1] = start, goal
    if with_velocity:
        return positions, (goal - start) * speed[:, None] / duration
    return positions


def make_profiles(cfg: SynthConfig) -> List[UserProfile]:
    """Draw one motor profile per user; odd-numbered users are familiar."""
    profiles = []
    for index in range(2 * cfg.users_per_class):
        user_id = f"P{index + 1:02d}"
        rng = np.random.default_rng(derive_seed(cfg.seed, "user", user_id))
        profiles.append(
            UserProfile(
                user_id=user_id,
                familiar=index % 2 == 0,
                reach_seconds=float(rng.uniform(*cfg.reach_seconds_range)),
                dwell_seconds=float(rng.uniform(*cfg.dwell_seconds_range)),
            )
        )
    return profiles


def _smooth_noise(rng: np.random.Generator, frames: int, sigma: float, amplitude: float, dims: int) -> np.ndarray:
    if amplitude == 0:
        return np.zeros((frames, dims))
    raw = gaussian_filter1d(rng.standard_normal((frames, dims)), sigma, axis=0, mode="reflect")
    std = raw.std(axis=0, keepdims=True)
    return amplitude * raw / np.where(std > 0, std, 1.0)


def synth_session(
    profile: UserProfile,
    code: str,
    layout: KeypadLayout,
    cfg: SynthConfig,
    session_index: int = 1,
) -> data.Session:
    """Generate one correct entry of ``code`` by ``profile``.

    Raises
    ------
    ConfigurationError
        If a key of ``code`` is not on the layout.
    """
    targets = layout.code_path(code)
    rng = np.random.default_rng(derive_seed(cfg.seed, "session", profile.user_id, code, session_index))
    noise = cfg.noise_scale(profile.familiar)
    jitter = cfg.timing_jitter * noise

    pieces = [np.repeat(layout.rest_position()[None, :], int(round(0.2 * cfg.fps)), axis=0)]
    here = layout.rest_position()
    for target in targets:
        reach = max(profile.reach_seconds * rng.lognormal(0.0, jitter), MIN_REACH_SECONDS)
        dwell = max(profile.dwell_seconds * rng.lognormal(0.0, jitter), MIN_DWELL_SECONDS)
        pieces.append(synth_reach(here, target, reach, cfg.fps)[1:])
        pieces.append(np.repeat(target[None, :], max(int(round(dwell * cfg.fps)), 1), axis=0))
        here = target
    path = np.concatenate(pieces)
    if path.shape[0] < MIN_SESSION_FRAMES:
        pad = np.repeat(path[-1:], MIN_SESSION_FRAMES - path.shape[0], axis=0)
        path = np.concatenate([path, pad])
    frames = path.shape[0]

    drift = _smooth_noise(rng, frames, cfg.smooth_sigma_frames, cfg.smooth_amplitude * noise, 3)
    tremor = rng.standard_normal((frames, 3)) * cfg.tremor_amplitude * noise
    positions = path + drift + tremor

    wobble = _smooth_noise(rng, frames, 2 * cfg.smooth_sigma_frames, cfg.orientation_amplitude * noise, 3)
    base = Rotation.from_euler("x", -15, degrees=True)
    quaternions = (Rotation.from_rotvec(wobble) * base).as_quat()  # x, y, z, w
    quaternions = np.concatenate([quaternions[:, 3:], quaternions[:, :3]], axis=1)
    quaternions *= np.where(quaternions[:, :1] < 0, -1.0, 1.0)
    quaternions /= np.linalg.norm(quaternions, axis=1, keepdims=True)

    times = np.arange(frames) / cfg.fps
    return data.Session(
        user_id=profile.user_id,
        familiar=profile.familiar,
        passcode=code,
        session_index=session_index,
        fps=cfg.fps,
        frames=np.column_stack([times, positions, quaternions]),
        correct_entry=True,
    )


def synth_dataset(cfg: SynthConfig) -> List[data.Session]:
    """Generate users x codes x sessions_per_code sessions, deterministic in ``cfg.seed``."""
    layout = KeypadLayout()
    sessions = [
        synth_session(profile, code, layout, cfg, index)
        for profile in make_profiles(cfg)
        for code in cfg.codes
        for index in range(1, cfg.sessions_per_code + 1)
    ]
    logger.info(
        "generated %d sessions for %d users (delta=%.2f)", len(sessions), 2 * cfg.users_per_class, cfg.delta
    )
    return sessions


def write_dataset(sessions: Sequence[data.Session], cfg: SynthConfig, out_dir) -> dict:
    """Write ``sessions.jsonl`` and the provenance manifest ``manifest.yaml``.

    Returns
    -------
    dict
        The manifest that was written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    session_path = out_dir / "sessions.jsonl"
    data.write_sessions(sessions, session_path)
    manifest = {
        "generator": "vrfam.synth",
        "schema_version": data.SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "users": len({s.user_id for s in sessions}),
        "sessions": len(sessions),
        "frames": int(sum(s.frame_count for s in sessions)),
        "sessions_sha256": hashlib.sha256(session_path.read_bytes()).hexdigest(),
    }
    with open(out_dir / "manifest.yaml", "w", encoding="utf-8") as stream:
        yaml.safe_dump(manifest, stream, sort_keys=True)
    return manifest


def path_variance(values: np.ndarray) -> float:
    """Variance oracle statistic of one window [W, C].

    Mean over channels of the variance of the second temporal difference.
    """
    return float(np.diff(values, n=2, axis=0).var(axis=0).mean())


def path_variances(windows: data.WindowSet) -> np.ndarray:
    return np.diff(windows.values.astype(np.float64), n=2, axis=1).var(axis=1).mean(axis=1)


class ThresholdOracle:
    """One-feature threshold classifier fitted by a brute-force sweep.

    The sweep tries every midpoint between sorted training scores, in both
    directions, and keeps the most accurate cut.
    """

    def __init__(self):
        self.threshold = 0.0
        self.positive_above = True

    def fit(self, scores: np.ndarray, labels: np.ndarray) -> "ThresholdOracle":
        scores, labels = np.asarray(scores, np.float64), np.asarray(labels, np.int64)
        order = np.argsort(scores, kind="stable")
        sorted_scores, sorted_labels = scores[order], labels[order]
        cuts = np.concatenate([[sorted_scores[0] - 1.0], (sorted_scores[1:] + sorted_scores[:-1]) / 2])
        # positives strictly above each cut = total positives - positives at or below
        below_pos = np.concatenate([[0], np.cumsum(sorted_labels)[:-1]])
        below_neg = np.arange(len(cuts)) - below_pos
        total_pos = sorted_labels.sum()
        above_correct = (total_pos - below_pos) + below_neg
        below_correct = len(scores) - above_correct
        best_above, best_below = int(above_correct.argmax()), int(below_correct.argmax())
        if above_correct[best_above] >= below_correct[best_below]:
            self.threshold, self.positive_above = float(cuts[best_above]), True
        else:
            self.threshold, self.positive_above = float(cuts[best_below]), False
        return self

    def predict(self, scores: np.ndarray) -> np.ndarray:
        above = np.asarray(scores) > self.threshold
        return (above if self.positive_above else ~above).astype(np.int64)

    def accuracy(self, scores: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict(scores) == np.asarray(labels)).mean())
