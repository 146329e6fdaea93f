"""Finite-difference checks for every differentiable op and for the whole model."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import numeric as nm
from .encoder import EncoderConfig, attention, encode, init_encoder_params
from .grouping import AscConfig, Partition, asc_layer, gate, merge_mean, segment_max, similarity
from .numeric import Tensor, gradcheck, relative_error
from .patching import embed
from .ssl import head_forward, init_head, pair_loss

OP_TOL = 1e-4
MODEL_TOL = 1e-3


def _weighted(f: Callable, rng) -> Callable:
    """Reduce a tensor-valued f to a scalar with fixed random weights."""
    w = {}

    def g(*args):
        out = f(*args)
        if out.shape not in w:
            w[out.shape] = rng.normal(size=out.shape)
        return nm.sum(nm.mul(out, w[out.shape]))
    return g


def _t(rng, *shape):
    return Tensor(rng.normal(size=shape), True)


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    mask = np.ones((4, 5), bool)
    mask[1, 3:] = False
    part = Partition.from_labels(np.array([0, 1, 0, 2, 1, 2]))
    groups = [[[0, 2], [1, 4], [3, 5]], [[5], [0, 1, 2, 3, 4]]]
    head = init_head("h.", [6, 12, 6], rng, norm=True, std=0.3)
    for t in head.values():
        t.requires_grad = False
    att = {k: Tensor(rng.normal(0, 0.3, (8, 8)), True) for k in ("attn.wq", "attn.wk", "attn.wv", "attn.wo")}
    amask = np.ones((2, 5), bool)
    amask[0, 4] = False
    zt = nm.l2_normalize_rows(Tensor(rng.normal(size=(5, 6)))).data

    def surrogate(x, th):
        return asc_layer(x, th, AscConfig(surrogate_weight=1.0)).aux

    return {
        "add": (lambda a, b: nm.add(a, b), [_t(rng, 3, 4), _t(rng, 4)]),
        "sub": (lambda a, b: nm.sub(a, b), [_t(rng, 3, 4), _t(rng, 3, 1)]),
        "mul": (lambda a, b: nm.mul(a, b), [_t(rng, 3, 4), _t(rng, 3, 4)]),
        "neg": (lambda a: nm.neg(a), [_t(rng, 3, 4)]),
        "scale": (lambda a: nm.scale(a, -1.7), [_t(rng, 3, 4)]),
        "sigmoid": (lambda a: nm.sigmoid(a), [_t(rng, 3, 4)]),
        "gelu": (lambda a: nm.gelu(a), [_t(rng, 3, 4)]),
        "matmul": (lambda a, b: nm.matmul(a, b), [_t(rng, 2, 3, 4), _t(rng, 4, 5)]),
        "transpose": (lambda a: nm.transpose(a), [_t(rng, 2, 3, 4)]),
        "reshape": (lambda a: nm.reshape(a, (4, 6)), [_t(rng, 2, 3, 4)]),
        "sum": (lambda a: nm.sum(a, axis=1, keepdims=True), [_t(rng, 3, 4)]),
        "mean": (lambda a: nm.mean(a, axis=0), [_t(rng, 3, 4)]),
        "mean_rows": (lambda a: nm.mean_rows(a), [_t(rng, 5, 4)]),
        "softmax_rows": (lambda a: nm.softmax_rows(a, mask), [_t(rng, 4, 5)]),
        "layer_norm": (lambda a: nm.layer_norm(a), [_t(rng, 4, 6)]),
        "l2_normalize_rows": (lambda a: nm.l2_normalize_rows(a), [_t(rng, 6, 8)]),
        "similarity": (lambda a: similarity(a), [_t(rng, 5, 3)]),
        "gate": (lambda s, th: gate(s, th), [_t(rng, 4, 4), Tensor(np.array(0.2), True)]),
        "merge_mean": (lambda a: merge_mean(a, part), [_t(rng, 6, 3)]),
        "segment_max": (lambda a: segment_max(a, groups, 3), [_t(rng, 2, 6, 3)]),
        "surrogate": (surrogate, [Tensor(rng.normal(0, 0.5, (6, 4)), True), Tensor(np.array(0.1), True)]),
        "attention": (lambda x, wq: attention(x, amask, {**att, "attn.wq": wq}, 2)[0],
                      [_t(rng, 2, 5, 8), att["attn.wq"]]),
        "head": (lambda x: head_forward(x, head, "h."), [_t(rng, 3, 6)]),
        "pair_loss": (lambda p: pair_loss(nm.l2_normalize_rows(p), zt), [_t(rng, 5, 6)]),
    }


def check_ops(seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Max relative error of backward() against central differences, per op."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, (f, inputs) in _op_cases(rng).items():
        g = f if name in ("surrogate", "pair_loss") else _weighted(f, rng)
        out[name] = gradcheck(g, inputs, h)
    return out


def sampled_gradcheck(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], per_tensor: int,
                      rng: np.random.Generator, h: float = 1e-5) -> dict[str, float]:
    """Compare analytic and central-difference gradients on sampled coordinates of each tensor."""
    for t in params.values():
        t.grad = None
    nm.backward(loss_fn())
    errs = {}
    for name, t in params.items():
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        an = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)[picks]
        fd = np.empty(len(picks))
        with nm.no_grad():
            for j, i in enumerate(picks):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                fd[j] = (fp - fm) / (2 * h)
        errs[name] = relative_error(an, fd)
    return errs


def model_config(tokens: int = 16, dim: int = 32, depth: int = 2) -> EncoderConfig:
    # large init and a matching threshold so the grouping layer forms several
    # components of unequal counts across the batch (exercises padding too)
    side = int(np.ceil(np.sqrt(tokens)))
    return EncoderConfig(depth=depth, embed_dim=dim, heads=4, asc_positions=(0,), image_size=4 * side,
                         patch_size=4, init_std=0.3, asc=AscConfig(theta_init=60.0))


def check_model(tokens: int = 16, dim: int = 32, depth: int = 2, per_tensor: int = 8,
                seed: int = 0, h: float = 1e-5) -> tuple[float, dict[str, float]]:
    """Full encoder (patch embed, blocks, one grouping layer, pooling) plus the surrogate term."""
    rng = np.random.default_rng(seed)
    cfg = model_config(tokens, dim, depth)
    params = init_encoder_params(cfg, rng)
    patches = rng.uniform(-1, 1, (2, tokens, 3 * cfg.patch_size ** 2))
    w = rng.normal(size=(2, dim))

    def loss():
        out = encode(embed(patches, params), params, cfg)
        val = nm.sum(nm.mul(out.rep, w))
        return val if out.aux is None else nm.add(val, out.aux)

    errs = sampled_gradcheck(loss, params, per_tensor, rng, h)
    return max(errs.values()), errs


def run_suite(seed: int = 0) -> dict[str, float]:
    """Every op plus the full-model checks; keys are check names."""
    res = check_ops(seed)
    res["model[16 tokens, d=32, 2 blocks]"] = check_model(16, 32, 2, seed=seed)[0]
    res["model[8 tokens, d=32, 2 blocks]"] = check_model(8, 32, 2, seed=seed)[0]
    return res


def tolerance(name: str) -> float:
    return MODEL_TOL if name.startswith("model") else OP_TOL
