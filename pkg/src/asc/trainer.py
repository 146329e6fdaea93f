"""Optimization loop: Adam with decoupled decay, warmup + cosine schedule, checkpoints, CSV metrics."""
from __future__ import annotations

import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import training_pair
from .errors import ConfigError
from .numeric import Tensor
from .ssl import SiameseState, ema_update, init_state, training_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.0016
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    total_steps: int = 200
    warmup_steps: int = 20
    ema_momentum: float = 0.996
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.total_steps < 0 or self.batch_size < 1:
            raise ConfigError("total_steps must be >= 0 and batch_size >= 1")
        if self.total_steps and not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps must be smaller than total_steps")
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("rates must be non-negative and eps positive")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigError("ema_momentum must lie in [0, 1)")


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then half-cosine decay to 0 at total_steps."""
    w, total = cfg.warmup_steps, cfg.total_steps
    if step < w:
        return cfg.lr * step / w
    if total <= w:
        return cfg.lr
    progress = min(max((step - w) / (total - w), 0.0), 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def decays(name: str, t: Tensor) -> bool:
    # matrices only: biases, norm gains and thresholds are left alone
    return t.ndim >= 2


def adam_step(params: dict[str, Tensor], state: OptimState, rate: float, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update using each tensor's ``.grad``, plus decoupled decay."""
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and decays(name, t):
            update = update + cfg.weight_decay * t.data
        t.data = t.data - rate * update


class Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state = OptimState()

    def step(self, params: dict[str, Tensor], rate: float) -> None:
        adam_step(params, self.state, rate, self.cfg)


# -- the run --------------------------------------------------------------------

def metrics_header(n_asc: int) -> list[str]:
    return (["step", "loss", "lr"] + [f"theta_{i}" for i in range(n_asc)]
            + [f"tokens_ratio_{i}" for i in range(n_asc)])


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class TrainResult:
    state: SiameseState
    losses: list[float]
    rows: list[list[str]]
    checkpoint_path: Path | None
    metrics_path: Path | None
    seconds_per_step: float


def save_state(path, state: SiameseState, config: dict) -> None:
    params = {"online." + k: v.data for k, v in state.online.items()}
    params.update({"target." + k: v.data for k, v in state.target.items()})
    checkpoint.save(path, config, params)


def run_training(cfg, out_dir=None, progress: bool = False) -> TrainResult:
    """Train a Siamese ASC model as described by a RunConfig.

    All randomness comes from one generator seeded with ``cfg.train.seed``:
    parameter init first, then per-sample clip and augmentation seeds.
    """
    from .config import RunConfig

    if not isinstance(cfg, RunConfig):
        raise ConfigError("run_training needs a RunConfig")
    tc, enc_cfg = cfg.train, cfg.encoder
    resolved = cfg.to_dict()
    rng = np.random.default_rng(tc.seed)
    state = init_state(enc_cfg, rng, tc.ema_momentum)
    opt = Adam(tc)
    n_asc = len(enc_cfg.asc_positions)
    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / "checkpoint.asc" if out else None
    metrics_path = out / "metrics.csv" if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    rows: list[list[str]] = []
    losses: list[float] = []
    t0 = time.perf_counter()
    for step in range(tc.total_steps):
        rate = cosine_lr(step, tc)
        seeds = rng.integers(0, 2 ** 63 - 1, size=(tc.batch_size, 2))
        views = [training_pair(int(a), int(b), cfg.data, cfg.augment) for a, b in seeds]
        fi = np.stack([v[0] for v in views])
        fj = np.stack([v[1] for v in views])
        try:
            res = training_step(fi, fj, state, enc_cfg, opt, rate)
        except FloatingPointError:
            if ckpt_path:
                save_state(ckpt_path, state, resolved)
            raise RuntimeError(f"non-finite values at step {step + 1}; last good state kept in {ckpt_path}")
        ema_update(state, tc.ema_momentum)
        losses.append(res.loss)
        rows.append([str(step + 1), _fmt(res.loss), _fmt(rate)] + [_fmt(t) for t in res.theta]
                    + [_fmt(r) for r in res.tokens_ratio])
        if progress:
            log.info("step %d loss %.4f lr %.2e theta %s ratio %s", step + 1, res.loss, rate,
                     [round(t, 4) for t in res.theta], [round(r, 3) for r in res.tokens_ratio])
        if ckpt_path and tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
            save_state(ckpt_path, state, resolved)
    elapsed = time.perf_counter() - t0

    if out:
        save_state(ckpt_path, state, resolved)
        write_metrics(metrics_path, metrics_header(n_asc), rows, resolved)
    return TrainResult(state, losses, rows, ckpt_path, metrics_path,
                       elapsed / max(tc.total_steps, 1))


def write_metrics(path, header: list[str], rows: list[list[str]], config: dict) -> None:
    buf = io.StringIO()
    buf.write("# config: " + json.dumps(config, sort_keys=True, separators=(",", ":")) + "\n")
    buf.write(",".join(header) + "\n")
    for r in rows:
        buf.write(",".join(r) + "\n")
    checkpoint.atomic_write(Path(path), buf.getvalue().encode())


def running_mean(losses, window: int = 10) -> np.ndarray:
    """Trailing-window mean; entry i averages losses[max(0, i-window+1) .. i]."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def load_state(path) -> tuple[dict, SiameseState]:
    """Rebuild a SiameseState from a checkpoint written by :func:`save_state`."""
    config, params = checkpoint.load(path)
    learn = config.get("encoder", {}).get("asc", {}).get("learnable_theta", True)
    online, target = {}, {}
    for k, a in params.items():
        if k.startswith("online."):
            name = k[len("online."):]
            online[name] = Tensor(a, requires_grad=learn or not name.endswith(".theta"))
        elif k.startswith("target."):
            target[k[len("target."):]] = Tensor(a)
    momentum = config.get("train", {}).get("ema_momentum", 0.996)
    return config, SiameseState(online, target, momentum)


def thread_cap(default: int = 1) -> int:
    """Worker count cap from ASC_THREADS."""
    try:
        return max(1, int(os.environ.get("ASC_THREADS", default)))
    except ValueError:
        return default
