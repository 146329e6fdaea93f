"""Linear probe on frozen features, ablation harness, and token-count benchmark."""
from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nm
from .config import ProbeConfig, RunConfig
from .data import generate_clip
from .encoder import encode_images
from .errors import ConfigError
from .grouping import OpCount, asc_layer, components, binarize, gate, similarity
from .ssl import SiameseState, subset
from .trainer import run_training, thread_cap


# -- linear probe -------------------------------------------------------------------

@dataclass
class ProbeResult:
    top1: float
    per_class: dict[int, float]
    n: int
    train_top1: float = float("nan")


def top1_accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float(np.mean(y_true == y_pred))


def probe_dataset(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(images, labels, is_train) for the probe split; one unaugmented frame per clip."""
    pc, dc = cfg.probe, cfg.data
    rng = np.random.default_rng(pc.seed)
    seeds = rng.integers(0, 2 ** 63 - 1, size=pc.n_clips)
    clips = [generate_clip(int(s), dc.clip_length, dc.image_size, classes=dc.classes,
                           max_speed=dc.max_speed) for s in seeds]
    images = np.stack([c.frames[0] for c in clips])
    labels = np.array([c.label for c in clips])
    is_train = np.zeros(pc.n_clips, bool)
    is_train[rng.permutation(pc.n_clips)[:int(round(pc.train_fraction * pc.n_clips))]] = True
    return images, labels, is_train


def extract_features(params: dict, cfg: RunConfig, images: np.ndarray, batch: int = 64) -> np.ndarray:
    """Pooled encoder representations, computed without recording gradients."""
    enc = subset(params, "encoder.") if any(k.startswith("encoder.") for k in params) else params
    out = []
    with nm.no_grad():
        for i in range(0, len(images), batch):
            out.append(encode_images(images[i:i + batch], enc, cfg.encoder).rep.data)
    return np.concatenate(out)


def fit_linear(x: np.ndarray, y: np.ndarray, n_classes: int, epochs: int = 100, lr: float = 0.1,
               momentum: float = 0.0, batch_size: int = 32, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Minibatch SGD on softmax cross-entropy; returns (W, b).

    Each epoch is one shuffled pass over the rows. ``batch_size >= len(x)`` gives full-batch GD.
    """
    n, d = x.shape
    rng = np.random.default_rng(seed)
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    onehot = np.eye(n_classes)[y]
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            logits = x[idx] @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[idx]) / len(idx)
            vw = momentum * vw + x[idx].T @ g
            vb = momentum * vb + g.sum(axis=0)
            w -= lr * vw
            b -= lr * vb
    return w, b


def linear_probe(features: np.ndarray, labels: np.ndarray, is_train: np.ndarray,
                 pc: ProbeConfig | None = None, n_classes: int | None = None) -> ProbeResult:
    """Train a linear softmax classifier on frozen features; report held-out top-1.

    Features are standardized with training-split statistics.
    """
    pc = pc or ProbeConfig()
    labels = np.asarray(labels)
    k = int(n_classes or labels.max() + 1)
    if set(np.unique(labels[~is_train])) - set(np.unique(labels[is_train])):
        raise ConfigError("a test class is absent from the probe training split")
    mu = features[is_train].mean(axis=0)
    sd = features[is_train].std(axis=0) + 1e-8
    x = (features - mu) / sd
    w, b = fit_linear(x[is_train], labels[is_train], k, pc.epochs, pc.lr, pc.momentum,
                      pc.batch_size, pc.seed)
    pred = (x @ w + b).argmax(axis=1)
    test = ~is_train
    per = {c: top1_accuracy(labels[test & (labels == c)], pred[test & (labels == c)])
           for c in range(k) if np.any(test & (labels == c))}
    return ProbeResult(top1_accuracy(labels[test], pred[test]), per, int(test.sum()),
                       top1_accuracy(labels[is_train], pred[is_train]))


def probe_state(state: SiameseState, cfg: RunConfig, shuffle_labels: bool = False) -> ProbeResult:
    images, labels, is_train = probe_dataset(cfg)
    feats = extract_features(state.online, cfg, images)
    if shuffle_labels:
        labels = np.random.default_rng(cfg.probe.seed + 1).permutation(labels)
    return linear_probe(feats, labels, is_train, cfg.probe, n_classes=len(cfg.data.classes))


# -- ablations ----------------------------------------------------------------------

# variant -> (table axis, overrides)
VARIANTS: dict[str, tuple[str, dict]] = {
    "full": ("superpixel_layer", {}),
    "no-ASC": ("superpixel_layer", {"encoder.asc_positions": []}),
    "fixed-theta": ("threshold", {"encoder.asc.learnable_theta": False}),
    "learnable-theta": ("threshold", {"encoder.asc.learnable_theta": True}),
    "DFS": ("grouping", {"encoder.asc.grouping": "dfs"}),
    "ToMe": ("grouping", {"encoder.asc.grouping": "tome"}),
    "mean": ("aggregation", {"encoder.asc.merge": "mean"}),
    "max": ("aggregation", {"encoder.asc.merge": "max"}),
}
REPORT_HEADER = ["variant", "axis", "seed", "top1", "tokens_ratio", "theta_final",
                 "final_loss", "sec_per_step", "config"]


def variant_config(base: RunConfig, variant: str, seed: int) -> RunConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {list(VARIANTS)}")
    _, overrides = VARIANTS[variant]
    return base.replace(**{"train.seed": seed, **overrides})


@dataclass
class AblationRow:
    variant: str
    axis: str
    seed: int
    top1: float
    tokens_ratio: float
    theta_final: str
    final_loss: float
    sec_per_step: float
    config: str
    theta_log: list[list[float]] = field(default_factory=list, repr=False)
    ratio_log: list[list[float]] = field(default_factory=list, repr=False)

    def csv_row(self) -> list[str]:
        return [self.variant, self.axis, str(self.seed), repr(self.top1), repr(self.tokens_ratio),
                self.theta_final, repr(self.final_loss), f"{self.sec_per_step:.4f}", self.config]


def _run_variant(args) -> AblationRow:
    base_dict, variant, seed, out_dir = args
    cfg = variant_config(RunConfig.from_dict(base_dict), variant, seed)
    sub = Path(out_dir) / f"{variant}_seed{seed}" if out_dir else None
    res = run_training(cfg, sub)
    probe = probe_state(res.state, cfg)
    n_asc = len(cfg.encoder.asc_positions)
    thetas = [[float(x) for x in r[3:3 + n_asc]] for r in res.rows]
    ratios = [[float(x) for x in r[3 + n_asc:]] for r in res.rows]
    mean_ratio = float(np.mean(ratios)) if n_asc and ratios else 1.0
    tail = ";".join(repr(t) for t in thetas[-1]) if thetas and n_asc else ""
    return AblationRow(variant, VARIANTS[variant][0], seed, probe.top1, mean_ratio, tail,
                       res.losses[-1] if res.losses else float("nan"), res.seconds_per_step,
                       json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")),
                       thetas, ratios)


def run_ablation(base: RunConfig, variants=None, seeds=(0, 1, 2), out_dir=None,
                 parallel: bool = False) -> list[AblationRow]:
    """Train and probe each variant under each seed; one row per (variant, seed)."""
    variants = list(variants or VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown ablation variant {v!r}")
    jobs = [(base.to_dict(), v, int(s), str(out_dir) if out_dir else None) for v in variants for s in seeds]
    if parallel and thread_cap() > 1:
        with ProcessPoolExecutor(max_workers=thread_cap()) as pool:
            return list(pool.map(_run_variant, jobs))
    return [_run_variant(j) for j in jobs]


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in rows:
        w.writerow(r.csv_row())
    return buf.getvalue()


# -- token benchmark ------------------------------------------------------------------

BENCH_HEADER = ["input", "N", "d", "theta", "components", "attention_cost", "asc_overhead",
                "op_count", "monotone"]


def cluster_tokens(rng: np.random.Generator, n: int, d: int, k: int = 2, noise: float = 0.01) -> np.ndarray:
    """n rows split evenly among k orthogonal unit directions, with uniform noise."""
    labels = np.arange(n) % k
    rng.shuffle(labels)
    z = np.zeros((n, d))
    z[np.arange(n), labels] = 1.0
    return z + rng.uniform(-noise, noise, (n, d))


def bench_tokens(thetas=None, ns=(16, 32, 64, 128), d: int = 16, seed: int = 0,
                 kinds=("two_cluster", "random")) -> list[dict]:
    """Component count and cost proxies over a (theta, N) sweep.

    ``attention_cost`` is N_out^2 d for the next attention layer; ``asc_overhead``
    is N^2 d for building the graph. ``monotone`` flags whether the component
    count has been non-decreasing in theta so far for that input.
    """
    rng = np.random.default_rng(seed)
    thetas = list(np.linspace(-0.5, 1.5, 21) if thetas is None else thetas)
    rows = []
    for kind in kinds:
        for n in ns:
            if kind == "two_cluster":
                z = cluster_tokens(rng, n, d)
            else:
                z = rng.normal(0, 1 / np.sqrt(d), (n, d))
            prev, mono = 0, True
            for t in sorted(thetas):
                c = OpCount()
                s = similarity(z, c)
                part = components(binarize(gate(s, t), 0.5, counter=c), c)
                mono = mono and part.count >= prev
                prev = part.count
                rows.append({"input": kind, "N": n, "d": d, "theta": float(t), "components": part.count,
                             "attention_cost": part.count ** 2 * d, "asc_overhead": n * n * d,
                             "op_count": c.total, "monotone": mono})
    return rows


def rows_csv(rows: list[dict], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def quadratic_fit_error(ns, counts) -> float:
    """Max relative residual of a least-squares a N^2 + b N + c fit."""
    ns = np.asarray(ns, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    x = np.stack([ns ** 2, ns, np.ones_like(ns)], axis=1)
    coef, *_ = np.linalg.lstsq(x, counts, rcond=None)
    return float(np.max(np.abs(x @ coef - counts) / counts))


def layer_diagnostics(state_params: dict, cfg: RunConfig, images: np.ndarray) -> list[str]:
    """Per-layer JSON lines from one encoder pass over ``images``."""
    enc = subset(state_params, "encoder.") if any(k.startswith("encoder.") for k in state_params) else state_params
    with nm.no_grad():
        out = encode_images(images, enc, cfg.encoder)
    return [g.diagnostics(layer) for layer, g in zip(cfg.encoder.asc_positions, out.layers)]
