"""Image -> initial token sequence: raster-order patches, linear projection, positions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .errors import CapacityError, DimensionError
from .numeric import Tensor


@dataclass
class PatchEmbedConfig:
    patch_size: int = 4
    embed_dim: int = 64
    max_tokens: int = 64
    use_pos_embed: bool = True
    init_std: float = 0.02

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


def extract_patches(img: np.ndarray, p: int = 4) -> np.ndarray:
    """Split ``img`` of shape (..., H, W, 3) into (..., N, 3p^2) rows in raster order.

    Each row flattens a p x p x 3 patch in (row, col, channel) order.
    """
    img = np.asarray(img, dtype=np.float64)
    *lead, h, w, c = img.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = img.reshape(*lead, gh, p, gw, p, c)
    k = len(lead)
    x = np.moveaxis(x, k + 2, k + 1)  # (..., gh, gw, p, p, c)
    return x.reshape(*lead, gh * gw, p * p * c)


def assemble_patches(patches: np.ndarray, h: int, w: int, p: int = 4) -> np.ndarray:
    """Inverse of :func:`extract_patches`."""
    patches = np.asarray(patches)
    *lead, n, _ = patches.shape
    gh, gw = h // p, w // p
    if n != gh * gw:
        raise DimensionError(f"{n} patches cannot tile a {h}x{w} image with p={p}")
    k = len(lead)
    x = patches.reshape(*lead, gh, gw, p, p, 3)
    x = np.moveaxis(x, k + 1, k + 2)
    return x.reshape(*lead, h, w, 3)


def init_patch_params(cfg: PatchEmbedConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {
        "patch.w": Tensor(rng.normal(0.0, cfg.init_std, (cfg.patch_dim, cfg.embed_dim)), True),
        "patch.b": Tensor(np.zeros(cfg.embed_dim), True),
    }
    if cfg.use_pos_embed:
        params["patch.pos"] = Tensor(rng.normal(0.0, cfg.init_std, (cfg.max_tokens, cfg.embed_dim)), True)
    return params


def embed(patches, params: dict[str, Tensor]) -> Tensor:
    """tokens = patches @ W + b (+ positional rows 0..N-1)."""
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    w = params["patch.w"]
    if patches.shape[-1] != w.shape[0]:
        raise DimensionError(f"patch length {patches.shape[-1]} != projection input {w.shape[0]}")
    out = nm.add(nm.matmul(patches, w), params["patch.b"])
    pos = params.get("patch.pos")
    if pos is not None:
        n = patches.shape[-2]
        if n > pos.shape[0]:
            raise CapacityError(f"{n} tokens exceed positional table of {pos.shape[0]}")
        if n < pos.shape[0]:
            pos = _rows(pos, n)
        out = nm.add(out, pos)
    return out


def _rows(t: Tensor, n: int) -> Tensor:
    # leading-rows slice with a gradient that scatters back into the table
    sel = np.eye(t.shape[0])[:n]
    return nm.matmul(sel, t)


def load_image(buf, height: int, width: int) -> np.ndarray:
    """Decode a row-major 8-bit RGB buffer (PPM payload, decoded PNG) into [0, 1] floats."""
    arr = np.frombuffer(bytes(buf), dtype=np.uint8) if not isinstance(buf, np.ndarray) else buf
    arr = np.asarray(arr)
    if arr.size != height * width * 3:
        raise DimensionError(f"buffer of {arr.size} values is not {height}x{width}x3")
    return arr.reshape(height, width, 3).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6, maxval 255) PPM file."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only P6 PPM with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    return load_image(data[pos + 1:pos + 1 + w * h * 3], h, w)


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    h, w, _ = img.shape
    px = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(px.tobytes())
