"""Synthetic contact-rich tasks in a vertical plane with asynchronous sensing.

Two tasks stand in for hardware-scale contact benchmarks:

* ``peg_insert`` — a slot with sub-pixel clearance must be found by sliding
  over the surface; crossing the slot mouth under light pressure emits a
  short force click, misaligned insertion jams and produces a restoring
  torque cue. Success requires reaching depth while aligned in tilt.
* ``latch_spike`` — a lid is held by a hidden latch that releases after a
  randomized press duration, emitting a 10 ms force spike; the lid can be
  lifted only during a short grace window, after which the latch re-engages.

Cameras render 32x32 grayscale views centered on the tool at ~30 Hz with
hard spatial quantization (nearest-point sampling), so positions finer than
a pixel and transient force events are invisible in the images. The wrist
sensor reports wrenches at 200 Hz including the orientation-dependent
gravity load of the simulated tool plus Gaussian noise.

Physics: velocity-limited kinematics at 1 ms substeps with penalty-spring
contact wrenches (force = stiffness x penetration, plus damping on the
approach velocity).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from . import simkernels as sk

FRAME_RATE = 30.0
FT_RATE = 200.0
SUBSTEP = 1e-3
TICK_PERIOD = 5  # substeps per F/T sample

GRAVITY = 9.81

TASK_IDS = {"peg_insert": sk.TASK_PEG, "latch_spike": sk.TASK_LATCH}


@dataclass
class TaskSpec:
    task: str = "peg_insert"
    episode_seconds: float = 4.0
    feature_range: float = 0.015       # socket / handle position bound (m)
    start_x_range: float = 0.03
    start_z: tuple[float, float] = (0.018, 0.03)
    start_tilt: float = 0.25           # peg; latch uses 0.1
    clearance: float = 0.0015
    slot_depth: float = 0.012
    insert_depth: float = 0.009
    theta_tol: float = 0.08
    handle_half_width: float = 0.01
    stiffness: float = 500.0
    damping: float = 5.0
    pen_cap: float = 0.004
    vmax: float = 0.25
    wmax: float = 1.5
    click_amp: float = 3.0
    spike_amp: float = 4.0
    pulse_width: float = 0.010
    seat_pen_cmd: float = 0.0025
    click_pen: float = 0.0008
    press_pen: float = 0.0024
    grace: float = 0.25
    arm_range: tuple[float, float] = (0.3, 1.0)
    z_slip: float = 0.004
    z_reseat: float = 0.008
    z_success: float = 0.012
    tool_half_width: float = 0.006
    tool_length: float = 0.06
    tool_mass: float = 0.5
    tool_com: tuple[float, float, float] = (0.02, 0.0, 0.05)
    noise_force: float = 0.05
    noise_torque: float = 0.005
    action_limit_xy: float = 0.005     # per 30 Hz frame, meters
    action_limit_rot: float = 0.05     # per frame, radians
    cam_scales: tuple[float, float] = (0.01, 0.005)  # meters per pixel
    image_size: int = 32

    def __post_init__(self):
        if self.task not in TASK_IDS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {sorted(TASK_IDS)}")
        if self.clearance <= 0:
            raise ValueError("clearance must be positive")

    @property
    def n_frames(self) -> int:
        return int(round(self.episode_seconds * FRAME_RATE))

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TaskSpec":
        d = dict(d)
        for key in ("start_z", "arm_range", "tool_com", "cam_scales"):
            if key in d:
                d[key] = tuple(d[key])
        return TaskSpec(**d)


def frame_boundaries(n_frames: int) -> np.ndarray:
    """Substep indices of frame boundaries; spacing alternates 33/34 substeps."""
    return np.round(np.arange(n_frames + 1) * 1000.0 / FRAME_RATE).astype(np.int64)


def decimate_indices(ts: np.ndarray, rate: float) -> np.ndarray:
    """Indices of samples that land on a slower sensor's tick grid.

    Keeps the first sample at or after each 1/rate tick, emulating a sensor
    that reads the underlying signal at the lower rate.
    """
    ts = np.asarray(ts, dtype=np.float64)
    ticks = np.floor(ts * rate + 1e-9).astype(np.int64)
    keep = np.ones(ts.size, dtype=bool)
    keep[1:] = ticks[1:] > ticks[:-1]
    return np.nonzero(keep)[0]


def spike_sample_ticks(t_event: float, width: float, tick: float = 1.0 / FT_RATE) -> list[int]:
    """Tick indices of the sensor samples that land inside a pulse window.

    The pulse is active on samples with t in (t_event, t_event + width];
    the event itself falls between ticks of the 1 kHz substep clock.
    """
    first = int(np.floor(t_event / tick + 1e-9)) + 1
    out = []
    k = first
    while k * tick <= t_event + width + 1e-12:
        out.append(k)
        k += 1
    return out


class SimulationDivergedError(RuntimeError):
    pass


def _params_vector(spec: TaskSpec, feature_x: float) -> np.ndarray:
    p = np.zeros(sk.PARAM_SIZE)
    p[0] = SUBSTEP
    p[1] = spec.vmax
    p[2] = spec.wmax
    p[3] = spec.stiffness
    p[4] = spec.damping
    p[5] = spec.pen_cap
    p[6] = feature_x
    p[7] = spec.clearance if spec.task == "peg_insert" else spec.handle_half_width
    p[8] = spec.slot_depth
    p[9] = spec.theta_tol
    p[10] = -0.002  # jam floor
    p[11] = 2.0     # jam torque gain (N*m/rad)
    p[12] = spec.click_amp
    p[13] = spec.spike_amp
    p[14] = spec.pulse_width
    p[15] = spec.seat_pen_cmd
    p[16] = spec.click_pen
    p[17] = spec.press_pen
    p[18] = spec.grace
    p[19] = spec.z_slip
    p[20] = spec.z_reseat
    p[21] = spec.z_success
    p[22] = spec.tool_half_width
    p[23] = spec.tool_length
    p[24] = spec.stiffness
    p[25] = 0.08    # world half width
    p[26] = 0.05    # max height
    p[27] = spec.insert_depth
    return p


class ContactEnv:
    """One episode instance; deterministic given (spec, seed)."""

    def __init__(self, spec: TaskSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.task_id = TASK_IDS[spec.task]
        self._boundaries = frame_boundaries(spec.n_frames)
        self.reset()

    def reset(self) -> dict:
        spec = self.spec
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 0)))
        self._noise_rng = np.random.default_rng(np.random.SeedSequence((self.seed, 1)))
        self.feature_x = float(rng.uniform(-spec.feature_range, spec.feature_range))
        tilt = spec.start_tilt if spec.task == "peg_insert" else 0.1
        self.state = np.zeros(sk.STATE_SIZE)
        self.state[0] = rng.uniform(-spec.start_x_range, spec.start_x_range)
        self.state[1] = rng.uniform(spec.start_z[0], spec.start_z[1])
        self.state[2] = rng.uniform(-tilt, tilt)
        self.arm_queue = rng.uniform(spec.arm_range[0], spec.arm_range[1], size=16)
        self.state[9] = self.arm_queue[0]
        self.params = _params_vector(spec, self.feature_x)
        self.frame = 0
        self._ft_buf = np.zeros((8, 4))
        self._ft_t_buf = np.zeros(8)
        self._ev_buf = np.zeros((32, 2))
        return {"images": self.render(), "t": 0.0}

    # privileged views used by the scripted expert and the success predicate
    @property
    def x(self) -> float:
        return float(self.state[0])

    @property
    def z(self) -> float:
        return float(self.state[1])

    @property
    def theta(self) -> float:
        return float(self.state[2])

    @property
    def in_slot(self) -> bool:
        return self.task_id == sk.TASK_PEG and self.state[6] > 0.5

    @property
    def released(self) -> bool:
        return self.task_id == sk.TASK_LATCH and self.state[6] > 0.5

    @property
    def reseat_required(self) -> bool:
        return self.state[11] > 0.5

    @property
    def success(self) -> bool:
        return self.state[12] > 0.5

    @property
    def time(self) -> float:
        return float(self.state[5] * SUBSTEP)

    def pose(self) -> np.ndarray:
        """Tool pose as (px, py, pz, qw, qx, qy, qz); tilt about the y axis."""
        half = 0.5 * self.theta
        return np.array([self.x, 0.0, self.z, np.cos(half), 0.0, np.sin(half), 0.0])

    def render(self) -> np.ndarray:
        out = np.zeros((2, self.spec.image_size, self.spec.image_size), dtype=np.float64)
        sk.render(
            out,
            np.asarray(self.spec.cam_scales),
            self.x,
            self.z,
            self.theta,
            self.task_id,
            self.feature_x,
            float(self.state[15]),
            self.spec.handle_half_width,
            self.spec.slot_depth,
            self.spec.clearance,
        )
        return out.astype(np.float32)

    def step(self, action: np.ndarray) -> tuple[dict, np.ndarray, np.ndarray, dict]:
        """Advance one ~1/30 s frame.

        action: (3,) tool-frame delta (dx, dz, dtilt), clamped to per-frame limits.
        Returns (obs, ft_times, ft_wrenches raw (n, 6), info).
        """
        spec = self.spec
        a = np.asarray(action, dtype=np.float64).reshape(3)
        dx = float(np.clip(a[0], -spec.action_limit_xy, spec.action_limit_xy))
        dz = float(np.clip(a[1], -spec.action_limit_xy, spec.action_limit_xy))
        dth = float(np.clip(a[2], -spec.action_limit_rot, spec.action_limit_rot))
        c, s = np.cos(self.theta), np.sin(self.theta)
        target = np.array([
            self.x + c * dx + s * dz,
            self.z + (-s * dx + c * dz),
            self.theta + dth,
        ])
        n_sub = int(self._boundaries[self.frame + 1] - self._boundaries[self.frame])
        n_ft, n_ev = sk.frame_substeps(
            self.state,
            self.params,
            self.task_id,
            n_sub,
            target,
            TICK_PERIOD,
            self._ft_buf,
            self._ft_t_buf,
            self._ev_buf,
            self.arm_queue,
        )
        if not np.all(np.isfinite(self.state[:5])):
            raise SimulationDivergedError(f"non-finite state at frame {self.frame}")
        self.frame += 1

        ft_times = self._ft_t_buf[:n_ft].copy()
        contact = self._ft_buf[:n_ft].copy()
        raw = np.zeros((n_ft, 6))
        theta_s = contact[:, 3]
        g_x = GRAVITY * np.sin(theta_s)
        g_z = -GRAVITY * np.cos(theta_s)
        m = spec.tool_mass
        rx, _, rz = spec.tool_com
        raw[:, 0] = contact[:, 0] + m * g_x
        raw[:, 2] = contact[:, 1] + m * g_z
        raw[:, 4] = contact[:, 2] + (rz * m * g_x - rx * m * g_z)
        noise = self._noise_rng.normal(0.0, 1.0, size=(n_ft, 6))
        raw[:, :3] += spec.noise_force * noise[:, :3]
        raw[:, 3:] += spec.noise_torque * noise[:, 3:]

        events = [(int(self._ev_buf[i, 0]), float(self._ev_buf[i, 1])) for i in range(n_ev)]
        obs = {"images": self.render(), "t": self.time}
        info = {"events": events, "success": self.success, "pose": self.pose()}
        return obs, ft_times, raw, info


def success(env: ContactEnv) -> bool:
    """Latched task-success predicate."""
    return env.success


# ---------------------------------------------------------------------------
# scripted expert


@dataclass
class ExpertConfig:
    reaction_delay_max: int = 4          # frames, drawn uniformly per event
    noise_xy: float = 0.0004             # exploration noise during collection
    noise_rot: float = 0.008
    sweep_step: float = 0.002            # per frame, meters
    press_depth_search: float = 0.0015
    press_depth_insert: float = 0.0035
    approach_bias: float = 0.008
    vision_grid: float = 0.005           # coarse visual quantization of features
    tilt_deadband: float = 0.10

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ExpertConfig":
        return ExpertConfig(**d)


class ScriptedExpert:
    """Privileged proportional controller with force-event phase switches.

    Reacts to contact events with a randomized latency of 0..reaction_delay_max
    frames, emulating a human demonstrator; the resulting demonstrations cover
    the overshoot states a learned policy reaches between replans.
    """

    def __init__(self, spec: TaskSpec, cfg: ExpertConfig, seed: int):
        self.spec = spec
        self.cfg = cfg
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
        self.reset()

    def reset(self):
        self.phase = "approach"
        self.pending: list[tuple[int, str]] = []
        self.frames_in_phase = 0
        self.vision_feature = None

    def _quantized_feature(self, env: ContactEnv) -> float:
        if self.vision_feature is None:
            g = self.cfg.vision_grid
            self.vision_feature = round(env.feature_x / g) * g
        return self.vision_feature

    def _schedule(self, frame: int, phase: str):
        delay = int(self.rng.integers(0, self.cfg.reaction_delay_max + 1))
        self.pending.append((frame + delay, phase))

    def _fire_pending(self, frame: int):
        due = [p for p in self.pending if p[0] <= frame]
        if due:
            self.pending = [p for p in self.pending if p[0] > frame]
            self.phase = due[-1][1]
            self.frames_in_phase = 0

    def act(self, env: ContactEnv, events: list[tuple[int, float]], frame: int) -> np.ndarray:
        spec, cfg = self.spec, self.cfg
        for code, _t in events:
            if spec.task == "peg_insert" and code == sk.EV_CLICK and self.phase == "sweep":
                self._schedule(frame, "center")
            if spec.task == "latch_spike":
                if code == sk.EV_RELEASE and self.phase == "press":
                    self._schedule(frame, "lift")
                elif code == sk.EV_SLIP:
                    self.pending = []
                    self.phase = "reseat"
                    self.frames_in_phase = 0
                elif code == sk.EV_REENGAGE and self.phase == "lift":
                    self.pending = []
                    self.phase = "press"
                    self.frames_in_phase = 0
        self._fire_pending(frame)
        self.frames_in_phase += 1

        if env.success:
            return np.zeros(3)
        if spec.task == "peg_insert":
            return self._act_peg(env)
        return self._act_latch(env)

    def _world_to_action(self, env: ContactEnv, tx: float, tz: float, dth: float) -> np.ndarray:
        dxw, dzw = tx - env.x, tz - env.z
        c, s = np.cos(env.theta), np.sin(env.theta)
        return np.array([c * dxw - s * dzw, s * dxw + c * dzw, dth])

    def _tilt_correction(self, env: ContactEnv, deadband: float, gain: float = 0.6) -> float:
        if abs(env.theta) > deadband:
            return -gain * env.theta
        return 0.0

    def _act_peg(self, env: ContactEnv) -> np.ndarray:
        spec, cfg = self.spec, self.cfg
        x_app = self._quantized_feature(env) + cfg.approach_bias
        if self.phase == "approach":
            dth = self._tilt_correction(env, cfg.tilt_deadband)
            if abs(env.x - x_app) < 0.002 and abs(env.z - 0.012) < 0.003:
                self.phase, self.frames_in_phase = "descend", 0
            return self._world_to_action(env, x_app, 0.012, dth)
        if self.phase == "descend":
            if env.z <= -cfg.press_depth_search * 0.5:
                self.phase, self.frames_in_phase = "sweep", 0
            return self._world_to_action(env, x_app, -cfg.press_depth_search, 0.0)
        if self.phase == "sweep":
            if env.x < env.feature_x - 0.012:  # click missed entirely; start over
                self.phase, self.frames_in_phase = "approach", 0
            return self._world_to_action(env, env.x - cfg.sweep_step, -cfg.press_depth_search, 0.0)
        if self.phase == "center":
            if abs(env.x - env.feature_x) < 0.0006:
                self.phase, self.frames_in_phase = "insert", 0
            return self._world_to_action(env, env.feature_x, -cfg.press_depth_search, 0.0)
        # insert
        if not env.in_slot and self.frames_in_phase > 12:
            self.phase, self.frames_in_phase = "approach", 0
        dth = 0.0
        if env.in_slot and abs(env.theta) > spec.theta_tol:
            dth = float(np.clip(-0.9 * env.theta, -0.03, 0.03))
        depth = -cfg.press_depth_insert if not env.in_slot else -(spec.insert_depth + 0.0015)
        return self._world_to_action(env, env.feature_x, depth, dth)

    def _act_latch(self, env: ContactEnv) -> np.ndarray:
        spec, cfg = self.spec, self.cfg
        x_h = self._quantized_feature(env)
        if self.phase == "approach":
            dth = self._tilt_correction(env, 0.02)
            if abs(env.x - x_h) < 0.002 and abs(env.z - 0.010) < 0.003:
                self.phase, self.frames_in_phase = "press", 0
            return self._world_to_action(env, x_h, 0.010, dth)
        if self.phase == "press":
            return self._world_to_action(env, x_h, -0.0026, 0.0)
        if self.phase == "lift":
            return self._world_to_action(env, env.x, 0.016, 0.0)
        # reseat after a slip: rise fully, then press again
        if env.z >= spec.z_reseat:
            self.phase, self.frames_in_phase = "press", 0
        return self._world_to_action(env, x_h, spec.z_reseat + 0.002, 0.0)


def run_expert_episode(
    spec: TaskSpec,
    seed: int,
    expert_cfg: ExpertConfig | None = None,
    noise: bool = True,
    idle_frames: int = 4,
    hold_frames_after_success: int | None = 15,
) -> dict:
    """Roll one expert episode; returns per-frame streams and raw sensor data.

    The episode is truncated a short hold period after success so the
    demonstrations concentrate on task-relevant states.
    """
    cfg = expert_cfg or ExpertConfig()
    env = ContactEnv(spec, seed)
    expert = ScriptedExpert(spec, cfg, seed)
    noise_rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))

    images = [env.render()]
    image_ts = [0.0]
    poses = [env.pose()]
    actions = []
    ft_times: list[np.ndarray] = []
    ft_raw: list[np.ndarray] = []
    events: list[tuple[int, float]] = []
    last_events: list[tuple[int, float]] = []
    success_frame: int | None = None
    for frame in range(spec.n_frames):
        if success_frame is not None and hold_frames_after_success is not None:
            if frame - success_frame >= hold_frames_after_success:
                break
        if frame < idle_frames:
            action = np.zeros(3)
        else:
            action = expert.act(env, last_events, frame)
            if noise:
                action = action + noise_rng.normal(
                    0.0, [cfg.noise_xy, cfg.noise_xy, cfg.noise_rot]
                )
        obs, t_s, raw, info = env.step(action)
        if success_frame is None and info["success"]:
            success_frame = frame
        images.append(obs["images"])
        image_ts.append(obs["t"])
        poses.append(info["pose"])
        actions.append(action)
        ft_times.append(t_s)
        ft_raw.append(raw)
        events.extend(info["events"])
        last_events = info["events"]
    return {
        "images": np.stack(images),
        "image_ts": np.array(image_ts),
        "poses": np.stack(poses),
        "actions": np.stack(actions),
        "ft_t": np.concatenate(ft_times),
        "ft_raw": np.concatenate(ft_raw),
        "events": np.array(events, dtype=np.float64).reshape(-1, 2),
        "success": env.success,
        "success_time": float(env.state[17]) if env.success else -1.0,
        "feature_x": env.feature_x,
        "seed": seed,
    }
