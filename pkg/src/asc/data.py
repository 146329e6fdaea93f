"""Synthetic moving-shape clips and the two-view augmentation pipeline.

Each clip shows one coloured shape (circle, square or triangle) drifting at
constant velocity over a static, low-saturation textured background. The
shape kind is the clip's class label for the linear probe; each kind draws
its colour from its own hue band, so the classes are separable from raw pixel
statistics alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

SHAPES = ("circle", "square", "triangle")


@dataclass
class SyntheticClip:
    frames: np.ndarray  # (T, H, W, 3)
    kind: str
    label: int
    color: np.ndarray
    velocity: tuple[float, float]
    seed: int
    masks: np.ndarray = field(repr=False, default=None)  # (T, H, W) shape coverage


@dataclass
class DataConfig:
    image_size: int = 32
    clip_length: int = 8
    classes: tuple[str, ...] = SHAPES
    max_speed: float = 1.5

    def __post_init__(self):
        self.classes = tuple(self.classes)
        bad = [c for c in self.classes if c not in SHAPES]
        if bad:
            raise ConfigError(f"unknown shape classes {bad}; choose from {SHAPES}")
        if self.clip_length < 4:
            raise ConfigError("clip_length must be at least 4")


@dataclass
class AugmentConfig:
    scale: tuple[float, float] = (0.2, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    gray_p: float = 0.2
    blur_sigma: float = 0.5
    output_size: int | None = None

    def __post_init__(self):
        self.scale = tuple(self.scale)
        self.ratio = tuple(self.ratio)
        self.jitter = tuple(self.jitter)
        for name in ("flip_p", "gray_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        lo, hi = self.scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError("scale range must lie within (0, 1]")
        if len(self.jitter) != 4 or min(self.jitter) < 0:
            raise ConfigError("jitter needs four non-negative factors")

    def blur_radius(self, size: int) -> int:
        # the 23x23 kernel only makes sense at full resolution
        return 11 if size >= 224 else int(math.ceil(3 * self.blur_sigma))


# -- clip generation ----------------------------------------------------------

def _shape_mask(kind: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # upward triangle with circumradius 1.25 r
    R = 1.25 * r
    top, base = -R, 0.5 * R
    half = math.sqrt(3) / 2 * R
    inside_y = (dy >= top) & (dy <= base)
    frac = (dy - top) / (base - top)
    return inside_y & (np.abs(dx) <= frac * half)


def _reflect(p: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    if span <= 0:
        return np.full_like(p, (lo + hi) / 2)
    q = np.mod(p - lo, 2 * span)
    return lo + np.where(q > span, 2 * span - q, q)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    # low-saturation base so the shape's hue always stands out
    base = rng.uniform(0.3, 0.7) + rng.uniform(-0.05, 0.05, 3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    tex = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rng.uniform(1, 4, 2)
        ph = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    tex /= 3.0
    img = base[None, None, :] + 0.06 * tex[:, :, None] * rng.uniform(0.5, 1.0, 3)
    return np.clip(img, 0.0, 1.0)


def _class_color(k: int, rng: np.random.Generator) -> np.ndarray:
    """Saturated colour from a hue band centred on k/3 turns (+-0.05)."""
    hsv = np.array([(k / 3.0 + rng.uniform(-0.05, 0.05)) % 1.0,
                    rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0)])
    return hsv_to_rgb(hsv[None, None])[0, 0]


def generate_clip(seed: int, T: int = 8, size: int = 32, kind: str | None = None,
                  velocity: tuple[float, float] | None = None,
                  classes: tuple[str, ...] = SHAPES, max_speed: float = 1.5) -> SyntheticClip:
    """A clip fully determined by ``seed`` (and the optional overrides)."""
    if T < 4:
        raise ValueError("a clip needs at least 4 frames")
    rng = np.random.default_rng(seed)
    if kind is None:
        kind = classes[int(rng.integers(len(classes)))]
    elif kind not in SHAPES:
        raise ValueError(f"unknown shape {kind!r}")
    bg = _background(rng, size)
    r = rng.uniform(0.2, 0.28) * size
    color = _class_color(SHAPES.index(kind), rng)
    if velocity is None:
        velocity = tuple(rng.uniform(-max_speed, max_speed, 2))
    c0 = rng.uniform(r, size - r, 2)
    t = np.arange(T)
    cx = _reflect(c0[0] + velocity[0] * t, r, size - r)
    cy = _reflect(c0[1] + velocity[1] * t, r, size - r)
    frames = np.empty((T, size, size, 3))
    masks = np.empty((T, size, size), bool)
    for i in range(T):
        m = _shape_mask(kind, cx[i], cy[i], r, size)
        masks[i] = m
        frames[i] = np.where(m[:, :, None], color[None, None, :], bg)
    label = classes.index(kind) if kind in classes else SHAPES.index(kind)
    return SyntheticClip(frames, kind, label, color, (float(velocity[0]), float(velocity[1])),
                         int(seed), masks)


def export_clip(clip: SyntheticClip, directory) -> list[Path]:
    """Write frames as numbered binary PPM files for inspection."""
    from .patching import write_ppm

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(clip.frames):
        p = out / f"frame_{i:03d}.ppm"
        write_ppm(p, f)
        paths.append(p)
    return paths


# -- temporal sampling ----------------------------------------------------------

def segment_indices(T: int) -> list[np.ndarray]:
    """Frame indices split into 4 contiguous, near-equal segments."""
    if T < 4:
        raise ValueError(f"need at least 4 frames, got {T}")
    return np.array_split(np.arange(T), 4)


def sample_frames(T: int, rng) -> np.ndarray:
    """One uniformly drawn index from each of the 4 segments."""
    rng = np.random.default_rng(rng)
    return np.array([seg[rng.integers(seg.size)] for seg in segment_indices(T)])


def sample_pair(clip: SyntheticClip, rng) -> tuple[np.ndarray, np.ndarray]:
    """Frames from the first and last of the four drawn indices."""
    idx = sample_frames(len(clip.frames), rng)
    return clip.frames[idx[0]], clip.frames[idx[3]]


# -- augmentation ---------------------------------------------------------------

def _crop_box(h: int, w: int, cfg: AugmentConfig, rng) -> tuple[float, float, float, float]:
    area = h * w
    lo, hi = np.log(cfg.ratio[0]), np.log(cfg.ratio[1])
    for _ in range(10):
        target = area * rng.uniform(*cfg.scale)
        ar = math.exp(rng.uniform(lo, hi))
        cw = math.sqrt(target * ar)
        ch = math.sqrt(target / ar)
        if 0 < cw <= w and 0 < ch <= h:
            top = rng.uniform(0, h - ch)
            left = rng.uniform(0, w - cw)
            return top, left, ch, cw
    return 0.0, 0.0, float(h), float(w)


def resize_bilinear(img: np.ndarray, box, out: int) -> np.ndarray:
    """Sample the (top, left, height, width) region onto an out x out grid."""
    top, left, ch, cw = box
    h, w, _ = img.shape
    ys = np.clip(top + (np.arange(out) + 0.5) * ch / out - 0.5, 0, h - 1)
    xs = np.clip(left + (np.arange(out) + 0.5) * cw / out - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top_row = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot_row = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top_row * (1 - wy) + bot_row * wy


def luminance(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    mx = img.max(axis=-1)
    mn = img.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(hsv.shape)
    for k, (rr, gg, bb) in enumerate(choices):
        sel = i == k
        out[..., 0] = np.where(sel, rr, out[..., 0])
        out[..., 1] = np.where(sel, gg, out[..., 1])
        out[..., 2] = np.where(sel, bb, out[..., 2])
    return out


def color_jitter(img: np.ndarray, factors, rng) -> np.ndarray:
    """Brightness, contrast, saturation (multiplicative) then hue rotation, fixed order."""
    b, c, s, hue = factors
    if b > 0:
        img = np.clip(img * rng.uniform(1 - b, 1 + b), 0, 1)
    if c > 0:
        m = luminance(img).mean()
        img = np.clip(m + rng.uniform(1 - c, 1 + c) * (img - m), 0, 1)
    if s > 0:
        g = luminance(img)[..., None]
        img = np.clip(g + rng.uniform(1 - s, 1 + s) * (img - g), 0, 1)
    if hue > 0:
        hsv = rgb_to_hsv(img)
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-hue, hue)) % 1.0
        img = hsv_to_rgb(hsv)
    return img


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    """Separable blur; taps falling off the image are dropped and the rest renormalized."""
    if sigma <= 0 or radius <= 0:
        return img
    k = gaussian_kernel(sigma, radius)

    def conv(a, axis):
        n = a.shape[axis]
        num = np.zeros_like(a)
        den = np.zeros(n)
        for off, wt in zip(range(-radius, radius + 1), k):
            lo, hi = max(0, -off), min(n, n - off)
            src = [slice(None)] * a.ndim
            dst = [slice(None)] * a.ndim
            dst[axis] = slice(lo, hi)
            src[axis] = slice(lo + off, hi + off)
            num[tuple(dst)] += wt * a[tuple(src)]
            den[lo:hi] += wt
        shape = [1] * a.ndim
        shape[axis] = n
        return num / den.reshape(shape)

    return conv(conv(img, 0), 1)


def augment(img: np.ndarray, cfg: AugmentConfig | None = None, seed=None) -> np.ndarray:
    """Crop-resize, flip, colour jitter, grayscale, blur; output clamped to [0, 1].

    ``seed`` may be an int or a numpy Generator (which is then advanced).
    """
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    h, w, _ = img.shape
    out = cfg.output_size or h
    x = resize_bilinear(img, _crop_box(h, w, cfg, rng), out)
    if rng.uniform() < cfg.flip_p:
        x = x[:, ::-1]
    x = color_jitter(x, cfg.jitter, rng)
    if rng.uniform() < cfg.gray_p:
        x = np.repeat(luminance(x)[..., None], 3, axis=-1)
    x = gaussian_blur(x, cfg.blur_sigma, cfg.blur_radius(out))
    return np.clip(x, 0.0, 1.0)


def training_pair(clip_seed: int, aug_seed, data: DataConfig, aug: AugmentConfig):
    """Two augmented views of one clip, determined by the two seeds."""
    clip = generate_clip(clip_seed, data.clip_length, data.image_size,
                         classes=data.classes, max_speed=data.max_speed)
    rng = np.random.default_rng(aug_seed)
    fi, fj = sample_pair(clip, rng)
    return augment(fi, aug, rng), augment(fj, aug, rng), clip.label
