"""Tool gravity compensation for wrist force-torque measurements.

A wrench is a 6-vector of force (N) and torque (N*m) expressed in a named
frame. The tool's gravitational load depends only on its mass, its center
of mass in the sensor frame, and the gravity direction in that frame;
subtracting it from the raw measurement isolates contact forces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import check_rotation

GRAVITY_DEFAULT = 9.81
PHYSICAL_GRAVITY_RANGE = (9.0, 10.6)


class FrameMismatchError(ValueError):
    """Operands expressed in different frames."""


class InvalidToolError(ValueError):
    """Tool inertia parameters are not physical."""


class CalibrationRankError(ValueError):
    """Static poses do not constrain the fit (collinear gravity directions)."""


@dataclass(frozen=True)
class Wrench:
    force: np.ndarray
    torque: np.ndarray
    frame: str = "ft"

    def __post_init__(self):
        object.__setattr__(self, "force", np.asarray(self.force, dtype=np.float64).reshape(3))
        object.__setattr__(self, "torque", np.asarray(self.torque, dtype=np.float64).reshape(3))
        if not (np.all(np.isfinite(self.force)) and np.all(np.isfinite(self.torque))):
            raise ValueError("wrench components must be finite")
        if not self.frame:
            raise ValueError("wrench frame identifier must be non-empty")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])

    @staticmethod
    def from_array(arr: np.ndarray, frame: str = "ft") -> "Wrench":
        arr = np.asarray(arr, dtype=np.float64).reshape(6)
        return Wrench(arr[:3], arr[3:], frame)


@dataclass(frozen=True)
class ToolInertia:
    mass: float
    r_com: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r_com", np.asarray(self.r_com, dtype=np.float64).reshape(3))
        if not np.isfinite(self.mass) or self.mass <= 0.0:
            raise InvalidToolError(f"tool mass must be positive, got {self.mass}")
        if not np.all(np.isfinite(self.r_com)):
            raise InvalidToolError("tool center of mass must be finite")


def rotate_gravity(rotation: np.ndarray, g_imu: np.ndarray, check_magnitude: bool = False) -> np.ndarray:
    """Express the gravity vector measured in the IMU frame in the sensor frame."""
    R = check_rotation(rotation)
    g = np.asarray(g_imu, dtype=np.float64).reshape(3)
    if check_magnitude:
        lo, hi = PHYSICAL_GRAVITY_RANGE
        n = np.linalg.norm(g)
        if not (lo <= n <= hi):
            raise ValueError(f"|g| = {n:.4f} outside physical range [{lo}, {hi}]")
    return R @ g


def gravitational_wrench(tool: ToolInertia, g_ft: np.ndarray, frame: str = "ft") -> Wrench:
    """Force m*g and torque r_com x F produced by the tool's own weight."""
    if not isinstance(tool, ToolInertia):
        raise InvalidToolError("expected a ToolInertia")
    g = np.asarray(g_ft, dtype=np.float64).reshape(3)
    force = tool.mass * g
    torque = np.cross(tool.r_com, force)
    return Wrench(force, torque, frame)


def compensate(measured: Wrench, grav: Wrench) -> Wrench:
    """Subtract the gravitational wrench from the measured one, frame-checked."""
    if measured.frame != grav.frame:
        raise FrameMismatchError(f"frame mismatch: {measured.frame!r} vs {grav.frame!r}")
    return Wrench(measured.force - grav.force, measured.torque - grav.torque, measured.frame)


@dataclass(frozen=True)
class CalibrationResult:
    tool: ToolInertia
    force_rms: float
    torque_rms: float


def calibrate_tool(
    static_samples: list[tuple[np.ndarray, Wrench]],
    gravity: float = GRAVITY_DEFAULT,
) -> CalibrationResult:
    """Fit tool mass and center of mass from static wrench readings.

    Each sample pairs the rotation taking the gravity vector into the sensor
    frame with the wrench measured while the tool hangs still. Mass comes
    from a scalar least-squares fit of F = m * (R g); the center of mass from
    the linear system tau = r_com x F, solved after the forces are known.
    """
    if len(static_samples) < 3:
        raise CalibrationRankError(f"need >= 3 static samples, got {len(static_samples)}")
    g_world = np.array([0.0, 0.0, -gravity])
    g_dirs = np.stack([check_rotation(R) @ g_world for R, _ in static_samples])
    forces = np.stack([w.force for _, w in static_samples])
    torques = np.stack([w.torque for _, w in static_samples])

    # Collinear gravity directions leave r_com unconstrained along that axis.
    if np.linalg.matrix_rank(g_dirs, tol=1e-6 * gravity) < 2:
        raise CalibrationRankError("gravity directions are collinear across samples")

    mass = float(np.sum(forces * g_dirs) / np.sum(g_dirs * g_dirs))
    if mass <= 0:
        raise InvalidToolError(f"fitted mass non-positive ({mass:.4f}); inconsistent samples")
    fitted_forces = mass * g_dirs
    force_rms = float(np.sqrt(np.mean((forces - fitted_forces) ** 2)))

    # tau = r x F  <=>  tau = -F x r = [-F]_x r, a 3N x 3 linear system.
    rows = []
    for f in fitted_forces:
        fx, fy, fz = f
        rows.append(np.array([[0.0, fz, -fy], [-fz, 0.0, fx], [fy, -fx, 0.0]]))
    A = np.concatenate(rows, axis=0)
    b = torques.reshape(-1)
    r_com, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < 3:
        raise CalibrationRankError("torque system rank-deficient; orientations too similar")
    torque_rms = float(np.sqrt(np.mean((A @ r_com - b) ** 2)))
    return CalibrationResult(ToolInertia(mass, r_com), force_rms, torque_rms)


def compensate_stream(
    raw: np.ndarray,
    rotations: np.ndarray,
    tool: ToolInertia,
    gravity: float = GRAVITY_DEFAULT,
) -> np.ndarray:
    """Vectorized compensation of an (N, 6) wrench block.

    `rotations` is (N, 3, 3), each taking world gravity into the sensor frame.
    """
    raw = np.asarray(raw, dtype=np.float64)
    g_world = np.array([0.0, 0.0, -gravity])
    g_ft = rotations @ g_world
    forces_g = tool.mass * g_ft
    torques_g = np.cross(np.broadcast_to(tool.r_com, forces_g.shape), forces_g)
    out = raw.copy()
    out[:, :3] -= forces_g
    out[:, 3:] -= torques_g
    return out
