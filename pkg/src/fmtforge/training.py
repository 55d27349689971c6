"""Optimizer and training loop for the policy."""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from . import tensor as tc
from .diffusion import DiffusionSchedule, NoisePredictor, diffusion_loss, make_schedule
from .model import FmtConfig, FmtEncoder
from .tensor import Tensor


class TrainingDivergedError(RuntimeError):
    pass


class AdamW:
    """Adaptive moment estimation with decoupled weight decay."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        weight_decay: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        tc.zero_grads(self.params)

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            m_hat = m / (1 - self.b1**self.t)
            v_hat = v / (1 - self.b2**self.t)
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)


class Policy:
    """Encoder + diffusion head + their shared parameter registry."""

    def __init__(self, cfg: FmtConfig, seed: int, dtype=np.float32):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.cfg = cfg
        self.encoder = FmtEncoder(cfg, rng, dtype)
        self.head = NoisePredictor(cfg, rng, dtype)

    def params(self) -> dict[str, Tensor]:
        return {**self.encoder.params(), **self.head.params()}


def train_policy(
    policy: Policy,
    dataset,
    schedule: DiffusionSchedule,
    epochs: int,
    batch_size: int,
    lr: float,
    weight_decay: float,
    seed: int,
    out_dir: str | Path | None = None,
    log=None,
) -> list[float]:
    """Seeded training loop; returns per-epoch mean losses and writes loss.csv.

    `dataset` must expose __len__ and gather(indices) -> (images, ft_blocks, actions).
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA11CE)))
    opt = AdamW(policy.params(), lr=lr, weight_decay=weight_decay)
    n = len(dataset)
    if n == 0:
        raise ValueError("empty training dataset")
    losses: list[float] = []
    t_start = time.monotonic()
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            images, ft_blocks, actions = dataset.gather(idx)
            opt.zero_grad()
            obs = policy.encoder(images, ft_blocks)
            loss = diffusion_loss(policy.head, obs, actions, schedule, rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {batches}: {value}"
                )
            loss.backward()
            opt.step()
            total += value
            batches += 1
        losses.append(total / batches)
        if log:
            log(f"epoch {epoch + 1}/{epochs} loss {losses[-1]:.6f} ({time.monotonic() - t_start:.1f}s)")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "loss.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss"])
            for i, v in enumerate(losses):
                w.writerow([i + 1, f"{v:.6f}"])
    return losses


def save_checkpoint(
    directory: str | Path,
    policy: Policy,
    schedule: DiffusionSchedule,
    norm: dict,
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tc.save_params(directory, policy.params())
    meta = {
        "model": policy.cfg.to_dict(),
        "schedule": schedule.to_dict(),
        "normalization": norm,
    }
    (directory / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(directory: str | Path) -> tuple[Policy, DiffusionSchedule, dict]:
    directory = Path(directory)
    meta = json.loads((directory / "config.json").read_text(encoding="utf-8"))
    cfg = FmtConfig.from_dict(meta["model"])
    policy = Policy(cfg, seed=0)
    tc.load_params(directory, policy.params())
    sched = meta["schedule"]
    schedule = make_schedule(sched["K"], sched["beta_start"], sched["beta_end"])
    return policy, schedule, meta["normalization"]
