"""Demonstration collection and the training-view of an episode store.

Collection rolls the scripted expert, gravity-compensates the raw wrench
stream using poses interpolated to the sensor timestamps, derives 6-DOF
delta-pose actions on the image clock, and writes everything to a store.

The dataset builder turns a store back into flat training arrays: optional
decimation of the wrench stream to a slower sensor rate, per-sample wrench
windows spanning the observation frame gap, z-scored wrench inputs and
actions normalized to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import alignment as al
from . import geometry as geo
from .model import FmtConfig
from .sim import FRAME_RATE, FT_RATE, ExpertConfig, TaskSpec, decimate_indices, run_expert_episode
from .store import Episode, EpisodeStore, StreamSpec
from .wrench import ToolInertia, compensate_stream

STREAM_SPECS = [
    StreamSpec("images", "f32le", (2, 32, 32), FRAME_RATE),
    StreamSpec("poses", "f64le", (7,), FRAME_RATE),
    StreamSpec("actions", "f64le", (6,), FRAME_RATE),
    StreamSpec("wrench_raw", "f64le", (6,), FT_RATE),
    StreamSpec("wrench_comp", "f64le", (6,), FT_RATE),
    StreamSpec("events", "f64le", (1,), 0.0),
]


def interpolate_rotations(pose_ts: np.ndarray, poses: np.ndarray, ft_ts: np.ndarray) -> np.ndarray:
    """World-to-sensor rotations at wrench timestamps, slerped from frame poses."""
    out = np.empty((ft_ts.size, 3, 3))
    idx = np.clip(np.searchsorted(pose_ts, ft_ts, side="right") - 1, 0, pose_ts.size - 2)
    for i, t in enumerate(ft_ts):
        j = idx[i]
        span = pose_ts[j + 1] - pose_ts[j]
        u = 0.0 if span <= 0 else np.clip((t - pose_ts[j]) / span, 0.0, 1.0)
        q = geo.quat_slerp(poses[j, 3:], poses[j + 1, 3:], float(u))
        out[i] = geo.quat_to_matrix(q).T
    return out


def compensate_episode(
    ft_ts: np.ndarray,
    ft_raw: np.ndarray,
    pose_ts: np.ndarray,
    poses: np.ndarray,
    tool: ToolInertia,
    gravity: float = 9.81,
) -> np.ndarray:
    rotations = interpolate_rotations(pose_ts, poses, ft_ts)
    return compensate_stream(ft_raw, rotations, tool, gravity)


def actions_from_poses(poses: np.ndarray) -> np.ndarray:
    """Executed 6-DOF tool-frame deltas between consecutive recorded poses."""
    return np.stack([al.pose_delta(poses[i], poses[i + 1]) for i in range(len(poses) - 1)])


def collect_store(
    spec: TaskSpec,
    demo_count: int,
    seed: int,
    expert_cfg: ExpertConfig | None = None,
    noise: bool = True,
    tool: ToolInertia | None = None,
    gravity: float = 9.81,
    log=None,
) -> EpisodeStore:
    """Roll scripted-expert demonstrations, compensate, align, build a store."""
    expert_cfg = expert_cfg or ExpertConfig()
    tool = tool or ToolInertia(spec.tool_mass, np.asarray(spec.tool_com))
    episodes = []
    seeds = np.random.SeedSequence(seed).generate_state(demo_count)
    for i in range(demo_count):
        ep_seed = int(seeds[i])
        ep = run_expert_episode(spec, ep_seed, expert_cfg, noise=noise)
        comp = compensate_episode(ep["ft_t"], ep["ft_raw"], ep["image_ts"], ep["poses"], tool, gravity)
        actions = actions_from_poses(ep["poses"])
        episodes.append(
            Episode(
                id=f"ep{i:04d}",
                seed=ep_seed,
                meta={
                    "success": bool(ep["success"]),
                    "success_time": float(ep["success_time"]),
                    "feature_x": float(ep["feature_x"]),
                },
                streams={
                    "images": (ep["image_ts"], ep["images"]),
                    "poses": (ep["image_ts"], ep["poses"]),
                    "actions": (ep["image_ts"][:-1], actions),
                    "wrench_raw": (ep["ft_t"], ep["ft_raw"]),
                    "wrench_comp": (ep["ft_t"], comp),
                    "events": (
                        _strictly_increasing(ep["events"][:, 1]),
                        ep["events"][:, :1],
                    ),
                },
            )
        )
        if log and (i + 1) % 20 == 0:
            log(f"collected {i + 1}/{demo_count} episodes")
    meta = {
        "task": spec.to_dict(),
        "collect": {
            "demo_count": demo_count,
            "seed": seed,
            "noise": noise,
            "expert": (expert_cfg).to_dict(),
            "gravity": gravity,
            "tool_mass": tool.mass,
            "tool_com": tool.r_com.tolist(),
        },
    }
    return EpisodeStore(STREAM_SPECS, episodes, meta)


def _strictly_increasing(ts: np.ndarray) -> np.ndarray:
    """Nudge simultaneous event timestamps apart by one nanosecond."""
    ts = np.asarray(ts, dtype=np.float64).copy()
    for i in range(1, ts.size):
        if ts[i] <= ts[i - 1]:
            ts[i] = ts[i - 1] + 1e-9
    return ts


@dataclass
class Normalization:
    action_stats: al.ActionStats
    wrench_mean: np.ndarray
    wrench_std: np.ndarray
    ft_rate: float
    use_ft: bool

    def to_dict(self) -> dict:
        return {
            "action_stats": self.action_stats.to_dict(),
            "wrench_mean": self.wrench_mean.tolist(),
            "wrench_std": self.wrench_std.tolist(),
            "ft_rate": self.ft_rate,
            "use_ft": self.use_ft,
        }

    @staticmethod
    def from_dict(d: dict) -> "Normalization":
        return Normalization(
            al.ActionStats.from_dict(d["action_stats"]),
            np.array(d["wrench_mean"]),
            np.array(d["wrench_std"]),
            d["ft_rate"],
            d["use_ft"],
        )

    def standardize(self, block: np.ndarray) -> np.ndarray:
        return (block - self.wrench_mean) / self.wrench_std


class TrainingDataset:
    """Flat sample view over a store: (obs frames, wrench window, action horizon)."""

    def __init__(self, store: EpisodeStore, cfg: FmtConfig, ft_rate: float = FT_RATE):
        self.cfg = cfg
        self.ft_rate = float(ft_rate)
        stride, horizon = cfg.obs_frame_stride, cfg.horizon

        images, image_ts = [], []
        comp_streams = []
        all_actions = []
        for ep in store.episodes:
            ts_i, imgs = store.stream(ep, "images")
            _, acts = store.stream(ep, "actions")
            images.append(np.asarray(imgs))
            image_ts.append(np.asarray(ts_i))
            all_actions.append(np.asarray(acts))
            if cfg.use_ft:
                ts_w, comp = store.stream(ep, "wrench_comp")
                keep = decimate_indices(ts_w, self.ft_rate)
                comp_streams.append((np.asarray(ts_w)[keep], np.asarray(comp)[keep]))

        self.action_stats = al.ActionStats.from_data(np.concatenate(all_actions))
        if cfg.use_ft:
            stacked = np.concatenate([v for _, v in comp_streams])
            mean = stacked.mean(axis=0)
            std = np.maximum(stacked.std(axis=0), 1e-6)
        else:
            mean, std = np.zeros(6), np.ones(6)
        self.norm = Normalization(self.action_stats, mean, std, self.ft_rate, cfg.use_ft)

        self._images = images
        self._samples = []       # (episode index, frame index)
        self._ft_blocks = []
        self._actions = []
        for e, (ts_i, acts) in enumerate(zip(image_ts, all_actions)):
            n_act = acts.shape[0]
            norm_acts = al.normalize_actions(acts, self.action_stats)
            for i in range(stride, n_act):
                target = norm_acts[i:i + horizon]
                if target.shape[0] < horizon:  # pad by repeating the last action
                    pad = np.repeat(target[-1:], horizon - target.shape[0], axis=0)
                    target = np.concatenate([target, pad])
                self._samples.append((e, i))
                self._actions.append(target)
                if cfg.use_ft:
                    ts_w, comp = comp_streams[e]
                    block, _ = al.span_block(ts_w, comp, ts_i[i - stride], ts_i[i], cfg.ft_raw_len)
                    self._ft_blocks.append(self.norm.standardize(block))
        self._actions = np.asarray(self._actions, dtype=np.float64)
        if cfg.use_ft:
            self._ft_blocks = np.asarray(self._ft_blocks, dtype=np.float32)

    def __len__(self) -> int:
        return len(self._samples)

    def gather(self, indices: np.ndarray):
        cfg = self.cfg
        stride = cfg.obs_frame_stride
        imgs = np.empty((len(indices), cfg.cameras, cfg.t_img, cfg.image_hw, cfg.image_hw), dtype=np.float32)
        for row, idx in enumerate(indices):
            e, i = self._samples[idx]
            ep_imgs = self._images[e]
            imgs[row] = np.stack([ep_imgs[i - stride], ep_imgs[i]], axis=1)
        ft = self._ft_blocks[indices] if cfg.use_ft else None
        return imgs, ft, self._actions[indices]
