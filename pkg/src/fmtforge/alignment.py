"""Alignment of asynchronous camera / force-torque streams.

Cameras run near 30 Hz, the wrist sensor at 200+ Hz. Each image frame owns
the half-open time window up to the next frame; the wrench samples falling
inside are resampled to a fixed row count so downstream consumers see a
constant shape regardless of clock jitter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo


class StreamOrderError(ValueError):
    """Timestamps were not strictly increasing."""


def _check_sorted(ts: np.ndarray, name: str) -> np.ndarray:
    ts = np.asarray(ts, dtype=np.float64)
    if ts.ndim != 1:
        raise StreamOrderError(f"{name} timestamps must be 1-D")
    if ts.size > 1 and not np.all(np.diff(ts) > 0):
        raise StreamOrderError(f"{name} timestamps must be strictly increasing")
    return ts


def assign_windows(image_ts: np.ndarray, ft_ts: np.ndarray) -> list[tuple[int, int]]:
    """Index range [start, stop) of wrench samples owned by each image frame.

    Window i covers t in [image_ts[i], image_ts[i+1]); a sample exactly on a
    frame boundary belongs to the later window. The last window is closed at
    the final wrench timestamp. Samples before the first frame are unassigned.
    """
    image_ts = _check_sorted(image_ts, "image")
    ft_ts = _check_sorted(ft_ts, "ft")
    if image_ts.size == 0:
        return []
    bounds = np.searchsorted(ft_ts, image_ts, side="left")
    windows = [(int(bounds[i]), int(bounds[i + 1])) for i in range(image_ts.size - 1)]
    windows.append((int(bounds[-1]), int(ft_ts.size)))
    return windows


def resample_rows(values: np.ndarray, timestamps: np.ndarray, count: int) -> np.ndarray:
    """Linear interpolation of (n, d) rows at `count` evenly spaced normalized times.

    Endpoints reproduce the first and last raw rows exactly. A single raw row
    is tiled. Timestamps need not be evenly spaced.
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    timestamps = np.asarray(timestamps, dtype=np.float64).reshape(-1)
    if values.shape[0] == 0:
        raise ValueError("resample_rows requires at least one raw row")
    if count < 1:
        raise ValueError("target count must be >= 1")
    n, d = values.shape
    if n == 1 or timestamps[-1] == timestamps[0]:
        return np.tile(values[0], (count, 1))
    norm = (timestamps - timestamps[0]) / (timestamps[-1] - timestamps[0])
    target = np.linspace(0.0, 1.0, count)
    out = np.empty((count, d), dtype=np.float64)
    for j in range(d):
        out[:, j] = np.interp(target, norm, values[:, j])
    out[0] = values[0]
    out[-1] = values[-1]
    return out


@dataclass
class WindowedBlock:
    block: np.ndarray            # (count, d) resampled rows
    raw_count: int               # raw samples inside the window
    held: bool = False           # no raw samples; previous block held
    zero_filled: bool = False    # no raw samples and no previous block


def windowed_blocks(
    image_ts: np.ndarray,
    ft_ts: np.ndarray,
    ft_values: np.ndarray,
    count: int,
) -> list[WindowedBlock]:
    """Per-frame resampled wrench blocks with hold-last fallback for empty windows."""
    ft_values = np.asarray(ft_values, dtype=np.float64)
    windows = assign_windows(image_ts, ft_ts)
    blocks: list[WindowedBlock] = []
    prev: np.ndarray | None = None
    for start, stop in windows:
        if stop > start:
            block = resample_rows(ft_values[start:stop], ft_ts[start:stop], count)
            blocks.append(WindowedBlock(block, stop - start))
            prev = block
        elif prev is not None:
            blocks.append(WindowedBlock(prev.copy(), 0, held=True))
        else:
            d = ft_values.shape[1] if ft_values.ndim == 2 else 6
            blocks.append(WindowedBlock(np.zeros((count, d)), 0, zero_filled=True))
    return blocks


def span_block(
    ft_ts: np.ndarray,
    ft_values: np.ndarray,
    t0: float,
    t1: float,
    count: int,
) -> tuple[np.ndarray, int]:
    """Resampled block over [t0, t1] (both endpoints inclusive).

    Returns (count, d) rows plus the raw sample count; zero rows when the
    span is empty.
    """
    ft_ts = np.asarray(ft_ts, dtype=np.float64)
    ft_values = np.asarray(ft_values, dtype=np.float64)
    start = int(np.searchsorted(ft_ts, t0, side="left"))
    stop = int(np.searchsorted(ft_ts, t1, side="right"))
    if stop <= start:
        return np.zeros((count, ft_values.shape[1])), 0
    return resample_rows(ft_values[start:stop], ft_ts[start:stop], count), stop - start


QUAT_UNIT_WARN = 1e-3


def pose_delta(pose_t: np.ndarray, pose_t1: np.ndarray) -> np.ndarray:
    """6-DOF delta between consecutive poses, expressed in the earlier frame.

    Translation is rotated into the earlier orientation; rotation is the
    axis-angle of q_t^-1 * q_t1 (magnitude < pi).
    """
    p0, q0 = geo.pose_position(pose_t), geo.pose_quat(pose_t)
    p1, q1 = geo.pose_position(pose_t1), geo.pose_quat(pose_t1)
    for q in (q0, q1):
        dev = abs(np.linalg.norm(q) - 1.0)
        if dev > QUAT_UNIT_WARN:
            import warnings

            warnings.warn(f"quaternion deviates from unit norm by {dev:.2e}; normalizing")
    q0 = geo.quat_normalize(q0)
    q1 = geo.quat_normalize(q1)
    dp = geo.quat_to_matrix(q0).T @ (p1 - p0)
    dq = geo.quat_mul(geo.quat_conjugate(q0), q1)
    return np.concatenate([dp, geo.quat_to_axis_angle(dq)])


def compose_delta(pose_t: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Inverse of pose_delta: apply a tool-frame delta to a pose."""
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    p0, q0 = geo.pose_position(pose_t), geo.pose_quat(pose_t)
    p1 = p0 + geo.quat_to_matrix(q0) @ delta[:3]
    q1 = geo.quat_mul(q0, geo.quat_from_axis_angle(delta[3:]))
    return geo.make_pose(p1, q1)


def transform_pose(pose: np.ndarray, extrinsic: np.ndarray) -> np.ndarray:
    """Right-compose a fixed rigid transform (e.g. marker -> TCP) onto a pose."""
    p, q = geo.pose_position(pose), geo.pose_quat(pose)
    pe, qe = geo.pose_position(extrinsic), geo.pose_quat(extrinsic)
    return geo.make_pose(p + geo.quat_to_matrix(q) @ pe, geo.quat_mul(q, qe))


def invert_transform(extrinsic: np.ndarray) -> np.ndarray:
    p, q = geo.pose_position(extrinsic), geo.pose_quat(extrinsic)
    qi = geo.quat_conjugate(geo.quat_normalize(q))
    return geo.make_pose(-(geo.quat_to_matrix(qi) @ p), qi)


@dataclass
class GripperEvents:
    states: np.ndarray                 # per-frame 0 (closed) / 1 (open)
    events: list[tuple[int, str]]      # (frame index, "open"/"close")
    interpolated: np.ndarray           # frames where a marker was missing


def infer_gripper_state(
    jaw_positions: np.ndarray,
    timestamps: np.ndarray,
    velocity_threshold: float = 0.02,
    initial_open: bool = True,
) -> GripperEvents:
    """Open/close events from the inter-jaw distance velocity, with hysteresis.

    `jaw_positions` is (T, 2, 3); a NaN row marks a missing marker in that
    frame, in which case the previous distance is held and the frame flagged.
    Closing fires when the distance shrinks faster than the threshold,
    opening when it grows faster; the state latches between events.
    """
    jaw_positions = np.asarray(jaw_positions, dtype=np.float64)
    timestamps = _check_sorted(timestamps, "gripper")
    if jaw_positions.shape[0] != timestamps.size or jaw_positions.shape[0] < 2:
        raise ValueError("need >= 2 frames of paired jaw positions")
    T = timestamps.size
    dist = np.linalg.norm(jaw_positions[:, 0] - jaw_positions[:, 1], axis=1)
    missing = ~np.isfinite(dist)
    for i in range(T):
        if missing[i]:
            dist[i] = dist[i - 1] if i > 0 else np.nanmin(dist[np.isfinite(dist)])
    vel = np.zeros(T)
    vel[1:] = np.diff(dist) / np.diff(timestamps)

    states = np.empty(T, dtype=np.int64)
    state = 1 if initial_open else 0
    events: list[tuple[int, str]] = []
    states[0] = state
    for i in range(1, T):
        if state == 1 and vel[i] < -velocity_threshold:
            state = 0
            events.append((i, "close"))
        elif state == 0 and vel[i] > velocity_threshold:
            state = 1
            events.append((i, "open"))
        states[i] = state
    return GripperEvents(states, events, missing)


@dataclass
class ActionStats:
    low: np.ndarray
    high: np.ndarray
    constant: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=np.float64)
        self.high = np.asarray(self.high, dtype=np.float64)
        if np.any(self.high < self.low):
            raise ValueError("per-dimension max must be >= min")
        if self.constant is None:
            self.constant = self.high - self.low < 1e-12
        else:
            self.constant = np.asarray(self.constant, dtype=bool)

    @staticmethod
    def from_data(actions: np.ndarray) -> "ActionStats":
        a = np.asarray(actions, dtype=np.float64).reshape(-1, np.shape(actions)[-1])
        return ActionStats(a.min(axis=0), a.max(axis=0))

    def to_dict(self) -> dict:
        return {
            "low": self.low.tolist(),
            "high": self.high.tolist(),
            "constant": self.constant.astype(int).tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "ActionStats":
        return ActionStats(np.array(d["low"]), np.array(d["high"]), np.array(d["constant"], dtype=bool))


def normalize_actions(actions: np.ndarray, stats: ActionStats) -> np.ndarray:
    """Affine map of each dimension onto [-1, 1]; constant dimensions map to 0."""
    a = np.asarray(actions, dtype=np.float64)
    span = np.where(stats.constant, 1.0, stats.high - stats.low)
    out = 2.0 * (a - stats.low) / span - 1.0
    return np.where(stats.constant, 0.0, out)


def denormalize_actions(normalized: np.ndarray, stats: ActionStats) -> np.ndarray:
    """Exact inverse of normalize_actions (constant dimensions recover their value)."""
    n = np.asarray(normalized, dtype=np.float64)
    span = np.where(stats.constant, 0.0, stats.high - stats.low)
    return stats.low + 0.5 * (n + 1.0) * span


def pair_camera_frames(
    ts_a: np.ndarray,
    ts_b: np.ndarray,
    max_skew: float = 1.0 / 60.0,
) -> list[tuple[int, int]]:
    """Pair two asynchronous camera streams by nearest timestamp.

    Each frame of stream A is matched to the closest frame of stream B;
    pairs farther apart than `max_skew` are dropped.
    """
    ts_a = _check_sorted(ts_a, "camera A")
    ts_b = _check_sorted(ts_b, "camera B")
    pairs: list[tuple[int, int]] = []
    if ts_a.size == 0 or ts_b.size == 0:
        return pairs
    idx = np.searchsorted(ts_b, ts_a)
    for i, j in enumerate(idx):
        cands = [c for c in (j - 1, j) if 0 <= c < ts_b.size]
        best = min(cands, key=lambda c: abs(ts_b[c] - ts_a[i]))
        if abs(ts_b[best] - ts_a[i]) <= max_skew:
            pairs.append((i, int(best)))
    return pairs
