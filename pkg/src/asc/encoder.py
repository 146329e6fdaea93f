"""Pre-norm ViT encoder with adaptive superpixel layers after attention."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import ConfigError, ContractError
from .grouping import AscConfig, AscOutput, OpCount, asc_layer
from .numeric import Tensor
from .patching import PatchEmbedConfig, embed, extract_patches, init_patch_params


@dataclass
class EncoderConfig:
    depth: int = 4
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    asc_positions: tuple[int, ...] = (0, 2)
    image_size: int = 32
    patch_size: int = 4
    use_pos_embed: bool = True
    init_std: float = 0.02
    asc: AscConfig = field(default_factory=AscConfig)

    def __post_init__(self):
        self.asc_positions = tuple(sorted(set(int(i) for i in self.asc_positions)))
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ConfigError("depth must be non-negative")
        if any(not 0 <= i < self.depth for i in self.asc_positions):
            raise ConfigError(f"asc_positions {self.asc_positions} outside 0..{self.depth - 1}")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if isinstance(self.asc, dict):
            self.asc = AscConfig(**self.asc)

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def patch_config(self) -> PatchEmbedConfig:
        return PatchEmbedConfig(self.patch_size, self.embed_dim, self.num_tokens,
                                self.use_pos_embed, self.init_std)


@dataclass
class EncoderOutput:
    rep: Tensor
    aux: Tensor | None
    layers: list[AscOutput]
    token_trace: list[float]


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, h = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    std = cfg.init_std
    params = init_patch_params(cfg.patch_config(), rng)
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        params[pre + "ln1.g"] = Tensor(np.ones(d), True)
        params[pre + "ln1.b"] = Tensor(np.zeros(d), True)
        for w in ("wq", "wk", "wv", "wo"):
            params[pre + "attn." + w] = Tensor(rng.normal(0.0, std, (d, d)), True)
        params[pre + "ln2.g"] = Tensor(np.ones(d), True)
        params[pre + "ln2.b"] = Tensor(np.zeros(d), True)
        params[pre + "mlp.w1"] = Tensor(rng.normal(0.0, std, (d, h)), True)
        params[pre + "mlp.b1"] = Tensor(np.zeros(h), True)
        params[pre + "mlp.w2"] = Tensor(rng.normal(0.0, std, (h, d)), True)
        params[pre + "mlp.b2"] = Tensor(np.zeros(d), True)
        if i in cfg.asc_positions:
            params[pre + "theta"] = Tensor(cfg.asc.theta_init, cfg.asc.learnable_theta)
    return params


def block_params(params: dict[str, Tensor], i: int) -> dict[str, Tensor]:
    pre = f"blocks.{i}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def _affine_ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return nm.add(nm.mul(nm.layer_norm(x), g), b)


def attention(x: Tensor, mask: np.ndarray, p: dict[str, Tensor], heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product self-attention over valid tokens.

    Returns the output (before the residual) and the merged-head keys.
    """
    bsz, n, d = x.shape
    if d % heads:
        raise ConfigError(f"width {d} is not divisible by heads {heads}")
    dh = d // heads

    def split(t):
        return nm.transpose(nm.reshape(t, (bsz, n, heads, dh)), (0, 2, 1, 3))

    k = nm.matmul(x, p["attn.wk"])
    q, kh, v = split(nm.matmul(x, p["attn.wq"])), split(k), split(nm.matmul(x, p["attn.wv"]))
    logits = nm.scale(nm.matmul(q, nm.transpose(kh)), 1.0 / np.sqrt(dh))
    att = nm.softmax_rows(logits, mask[:, None, None, :])
    out = nm.reshape(nm.transpose(nm.matmul(att, v), (0, 2, 1, 3)), (bsz, n, d))
    out = nm.matmul(out, p["attn.wo"])
    return nm.mul(out, mask[:, :, None].astype(np.float64)), k


def mlp(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    h = nm.gelu(nm.add(nm.matmul(x, p["mlp.w1"]), p["mlp.b1"]))
    return nm.add(nm.matmul(h, p["mlp.w2"]), p["mlp.b2"])


def block_forward(x: Tensor, mask: np.ndarray, p: dict[str, Tensor], heads: int,
                  asc_cfg: AscConfig | None = None, counter: OpCount | None = None):
    """x <- x + attn(LN x); optional ASC merge; x <- x + MLP(LN x).

    Returns (tokens, mask, AscOutput or None). Padded rows leave the block as zeros.
    """
    a, keys = attention(_affine_ln(x, p["ln1.g"], p["ln1.b"]), mask, p, heads)
    x = nm.add(x, a)
    grouped = None
    if "theta" in p:
        grouped = asc_layer(x, p["theta"], asc_cfg or AscConfig(), mask, keys=keys, counter=counter)
        x, mask = grouped.tokens, grouped.mask
    x = nm.add(x, mlp(_affine_ln(x, p["ln2.g"], p["ln2.b"]), p))
    x = nm.mul(x, mask[:, :, None].astype(np.float64))
    return x, mask, grouped


def encode(tokens: Tensor, params: dict[str, Tensor], cfg: EncoderConfig,
           mask: np.ndarray | None = None, counter: OpCount | None = None) -> EncoderOutput:
    """Run every block and mean-pool the surviving tokens into one vector per sample."""
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    squeeze = tokens.ndim == 2
    x = nm.reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
    bsz, n, _ = x.shape
    mask = np.ones((bsz, n), bool) if mask is None else np.asarray(mask, bool).reshape(bsz, n)
    x = nm.mul(x, mask[:, :, None].astype(np.float64))
    layers, trace = [], [float(mask.sum(axis=1).mean())]
    aux = None
    for i in range(cfg.depth):
        x, mask, grouped = block_forward(x, mask, block_params(params, i), cfg.heads, cfg.asc, counter)
        trace.append(float(mask.sum(axis=1).mean()))
        if grouped is not None:
            layers.append(grouped)
            if grouped.aux is not None:
                aux = grouped.aux if aux is None else nm.add(aux, grouped.aux)
    count = mask.sum(axis=1, keepdims=True).astype(np.float64)
    if np.any(count == 0):
        raise ContractError("no surviving tokens to pool")
    rep = nm.mul(nm.sum(x, axis=1), 1.0 / count)
    if squeeze:
        rep = nm.reshape(rep, rep.shape[1:])
    return EncoderOutput(rep, aux, layers, trace)


def normalize_pixels(images: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to [-1, 1] so patch dot products are not dominated by brightness."""
    return np.asarray(images, dtype=np.float64) * 2.0 - 1.0


def encode_images(images: np.ndarray, params: dict[str, Tensor], cfg: EncoderConfig,
                  counter: OpCount | None = None) -> EncoderOutput:
    """(B, H, W, 3) images in [0, 1] -> pooled representations (B, d)."""
    patches = extract_patches(normalize_pixels(images), cfg.patch_size)
    return encode(embed(patches, params), params, cfg, counter=counter)
