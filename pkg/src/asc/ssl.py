"""Siamese self-supervised objective with an EMA target branch.

The online branch is encoder -> projector -> predictor; the target branch is
an exponential moving average of the online encoder and projector and is
evaluated without recording gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .encoder import EncoderConfig, EncoderOutput, encode_images, init_encoder_params
from .errors import ContractError
from .numeric import Tensor

NORM_TOL = 1e-6


@dataclass
class SiameseState:
    online: dict[str, Tensor]
    target: dict[str, Tensor]
    momentum: float = 0.996

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.online.items() if v.requires_grad}

    def zero_grad(self) -> None:
        for t in self.online.values():
            t.grad = None


def subset(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# -- heads ----------------------------------------------------------------------

def init_head(prefix: str, dims: list[int], rng: np.random.Generator, norm: bool,
              std: float = 0.02) -> dict[str, Tensor]:
    """Linear layers dims[0] -> ... -> dims[-1]; hidden layers get (LN,) GELU."""
    p = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        p[f"{prefix}{i}.w"] = Tensor(rng.normal(0.0, std, (a, b)), True)
        p[f"{prefix}{i}.b"] = Tensor(np.zeros(b), True)
        if norm and i < len(dims) - 2:
            p[f"{prefix}{i}.ln.g"] = Tensor(np.ones(b), True)
            p[f"{prefix}{i}.ln.b"] = Tensor(np.zeros(b), True)
    return p


def head_forward(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    i = 0
    while f"{prefix}{i}.w" in p:
        x = nm.add(nm.matmul(x, p[f"{prefix}{i}.w"]), p[f"{prefix}{i}.b"])
        if f"{prefix}{i + 1}.w" in p:
            if f"{prefix}{i}.ln.g" in p:
                x = nm.add(nm.mul(nm.layer_norm(x), p[f"{prefix}{i}.ln.g"]), p[f"{prefix}{i}.ln.b"])
            x = nm.gelu(x)
        i += 1
    return x


def identity_predictor(d: int) -> dict[str, Tensor]:
    """Predictor weights computing exactly x: GELU(x) - GELU(-x) = x."""
    eye = np.eye(d)
    return {
        "predictor.0.w": Tensor(np.hstack([eye, -eye]), True),
        "predictor.0.b": Tensor(np.zeros(2 * d), True),
        "predictor.1.w": Tensor(np.vstack([eye, -eye]), True),
        "predictor.1.b": Tensor(np.zeros(d), True),
    }


def init_state(cfg: EncoderConfig, rng: np.random.Generator, momentum: float = 0.996,
               identity_pred: bool = False) -> SiameseState:
    d = cfg.embed_dim
    online = {"encoder." + k: v for k, v in init_encoder_params(cfg, rng).items()}
    online.update(init_head("projector.", [d, 2 * d, 2 * d, d], rng, norm=True, std=cfg.init_std * 5))
    if identity_pred:
        online.update(identity_predictor(d))
    else:
        online.update(init_head("predictor.", [d, 2 * d, d], rng, norm=False, std=cfg.init_std * 5))
    target = {k: Tensor(v.data, requires_grad=False) for k, v in online.items()
              if not k.startswith("predictor.")}
    return SiameseState(online, target, momentum)


def project_and_normalize(rep: Tensor, params: dict[str, Tensor], predictor: bool) -> Tensor:
    """Projector (and predictor, for the online branch), then unit L2 norm per row."""
    z = head_forward(rep, params, "projector.")
    if predictor:
        z = head_forward(z, params, "predictor.")
    return nm.l2_normalize_rows(z)


def degenerate_rows(z) -> np.ndarray:
    """Rows that came out of normalization as (near) zero vectors via the eps guard."""
    data = z.data if isinstance(z, Tensor) else np.asarray(z)
    return np.abs(np.linalg.norm(data, axis=-1) - 1.0) > NORM_TOL


# -- objective --------------------------------------------------------------------

def _check_unit(t: Tensor, what: str) -> None:
    dev = np.abs(np.linalg.norm(t.data, axis=-1) - 1.0).max()
    if dev > NORM_TOL:
        raise ContractError(f"{what} is not unit-norm (deviation {dev:.2e})")


def pair_loss(p: Tensor, z) -> Tensor:
    """2 - 2<p, z>, averaged over rows; ``z`` is treated as a constant."""
    p = p if isinstance(p, Tensor) else Tensor(p)
    z = z.detach() if isinstance(z, Tensor) else Tensor(z)
    _check_unit(p, "prediction")
    _check_unit(z, "target")
    dots = nm.sum(nm.mul(p, z), axis=-1)
    return nm.sub(2.0, nm.scale(nm.mean(dots), 2.0))


def branch(images: np.ndarray, params: dict[str, Tensor], cfg: EncoderConfig,
           predictor: bool) -> tuple[Tensor, EncoderOutput]:
    enc = encode_images(images, subset(params, "encoder."), cfg)
    return project_and_normalize(enc.rep, params, predictor), enc


@dataclass
class StepResult:
    loss: float
    aux: float
    tokens_ratio: list[float] = field(default_factory=list)
    theta: list[float] = field(default_factory=list)


def loss_terms(fi: np.ndarray, fj: np.ndarray, state: SiameseState, cfg: EncoderConfig):
    """Symmetrized pair loss plus the grouping surrogate; returns (total, pair, encodings)."""
    pi, enc_i = branch(fi, state.online, cfg, predictor=True)
    pj, enc_j = branch(fj, state.online, cfg, predictor=True)
    with nm.no_grad():
        zi, _ = branch(fi, state.target, cfg, predictor=False)
        zj, _ = branch(fj, state.target, cfg, predictor=False)
    pair = nm.scale(nm.add(pair_loss(pi, zj), pair_loss(pj, zi)), 0.5)
    total = pair
    for enc in (enc_i, enc_j):
        if enc.aux is not None:
            total = nm.add(total, nm.scale(enc.aux, 0.5))
    return total, pair, (enc_i, enc_j)


def training_step(fi: np.ndarray, fj: np.ndarray, state: SiameseState, cfg: EncoderConfig,
                  optimizer=None, rate: float | None = None) -> StepResult:
    """Forward both views, backprop into the online parameters, optionally update them."""
    state.zero_grad()
    total, pair, (enc_i, enc_j) = loss_terms(fi, fj, state, cfg)
    nm.backward(total)
    if optimizer is not None:
        optimizer.step(state.trainable(), rate)
    ratios = [0.5 * (a.stats["tokens_ratio"] + b.stats["tokens_ratio"])
              for a, b in zip(enc_i.layers, enc_j.layers)]
    thetas = [float(state.online[k].data) for k in sorted(state.online) if k.endswith(".theta")]
    return StepResult(pair.item(), total.item() - pair.item(), ratios, thetas)


def ema_update(state: SiameseState, m: float | None = None) -> SiameseState:
    """target <- m * target + (1 - m) * online, in place."""
    m = state.momentum if m is None else m
    if not 0.0 <= m < 1.0:
        raise ContractError("momentum must lie in [0, 1)")
    for k, t in state.target.items():
        src = state.online.get(k)
        if src is None or src.shape != t.shape:
            raise ContractError(f"target parameter {k!r} has no online counterpart of shape {t.shape}")
    extra = [k for k in state.online if not k.startswith("predictor.") and k not in state.target]
    if extra:
        raise ContractError(f"online parameters missing from target: {extra}")
    for k, t in state.target.items():
        t.data = m * t.data + (1.0 - m) * state.online[k].data
    return state
