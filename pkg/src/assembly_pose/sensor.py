"""Simulation-to-reality image degradation and real-capture preprocessing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .render import DepthImage


@dataclass(frozen=True)
class SensorNoiseConfig:
    pixel_noise_sigma_range: tuple[float, float] = (0.005, 0.03)  # m
    blur_sigma_range: tuple[float, float] = (2.0, 5.0)  # px
    depth_min: float = 0.20
    depth_max: float = 0.80
    dropout_enabled: bool = False
    dropout_gradient_threshold: float = 0.01  # m / px

    def __post_init__(self):
        for name in ("pixel_noise_sigma_range", "blur_sigma_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be an ordered non-negative range")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not self.depth_min < self.depth_max:
            raise ValueError("depth_min must be below depth_max")

    @classmethod
    def noiseless(cls, **kw) -> "SensorNoiseConfig":
        return cls(pixel_noise_sigma_range=(0.0, 0.0), blur_sigma_range=(0.0, 0.0), **kw)

    @property
    def depth_step(self) -> float:
        """Depth covered by one gray level."""
        return (self.depth_max - self.depth_min) / 255.0


@dataclass(frozen=True, eq=False)
class NormalizedImage:
    data: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise ValueError("normalized image must be 2-D")
        if d.dtype != np.uint8:
            if d.size and (d.min() < 0 or d.max() > 255):
                raise ValueError("normalized values must lie in [0, 255]")
            d = d.astype(np.uint8)
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


def normalize(depth: np.ndarray, depth_min: float, depth_max: float) -> np.ndarray:
    """Clamp to the window and stretch affinely to 0..255, rounding half up."""
    d = np.clip(np.asarray(depth, dtype=np.float64), depth_min, depth_max)
    scaled = (d - depth_min) * (255.0 / (depth_max - depth_min))
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def to_depth(img: NormalizedImage, cfg: SensorNoiseConfig) -> np.ndarray:
    """Invert the stretch (up to quantization)."""
    return cfg.depth_min + img.data.astype(np.float64) * cfg.depth_step


def gaussian_blur(data: np.ndarray, sigma: float) -> np.ndarray:
    """Edge-replicating Gaussian blur, kernel truncated at 3 sigma."""
    if sigma <= 0:
        return np.array(data, dtype=np.float64, copy=True)
    return ndimage.gaussian_filter(np.asarray(data, dtype=np.float64), sigma, mode="nearest", truncate=3.0)


def dropout_mask(depth: np.ndarray, threshold: float) -> np.ndarray:
    gy, gx = np.gradient(depth)
    return np.hypot(gx, gy) > threshold


def degrade(img: DepthImage, cfg: SensorNoiseConfig, seed: int) -> NormalizedImage:
    """Noise, blur, optional dropout, then clamp-and-stretch to 8 bits.

    Per image, the noise sigma and blur sigma are drawn uniformly from their
    ranges; the same ``(img, cfg, seed)`` always yields the same output.
    """
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF))
    sigma_n = rng.uniform(*cfg.pixel_noise_sigma_range)
    noise = rng.standard_normal(img.data.shape)
    d = img.data + sigma_n * noise
    sigma_b = rng.uniform(*cfg.blur_sigma_range)
    d = gaussian_blur(d, sigma_b)
    if cfg.dropout_enabled:
        d = np.where(dropout_mask(d, cfg.dropout_gradient_threshold), 0.0, d)
    return NormalizedImage(normalize(d, cfg.depth_min, cfg.depth_max))


def expand_grayscale(img: NormalizedImage) -> np.ndarray:
    """(H, W, 3) image with three identical channels."""
    return np.repeat(img.data[:, :, None], 3, axis=2)


class PreprocessError(ValueError):
    pass


def _offset_groups(max_radius: int):
    """Neighbour offsets grouped by equal Euclidean distance, nearest first."""
    r = np.arange(-max_radius, max_radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    d2 = (dx ** 2 + dy ** 2).ravel()
    dx, dy = dx.ravel(), dy.ravel()
    groups = []
    for v in np.unique(d2):
        if v == 0:
            continue
        sel = d2 == v
        groups.append((dy[sel], dx[sel]))
    return groups


def fill_zeros(data: np.ndarray) -> np.ndarray:
    """Replace zero pixels with the mean of the nearest non-zero pixels.

    The search grows outward in rings of equal Euclidean distance; the first
    ring containing valid pixels supplies the average.
    """
    out = np.array(data, dtype=np.float64, copy=True)
    holes = np.argwhere(out == 0)
    if len(holes) == 0:
        return out
    valid = out != 0
    if not valid.any():
        raise PreprocessError("image has no valid pixels")
    h, w = out.shape
    max_r = int(np.ceil(np.hypot(h, w)))
    pending = holes
    radius = 1
    while len(pending):
        groups = _offset_groups(radius)
        done = np.zeros(len(pending), dtype=bool)
        for gy, gx in groups:
            if done.all():
                break
            todo = ~done
            py = pending[todo, 0][:, None] + gy[None, :]
            px = pending[todo, 1][:, None] + gx[None, :]
            inb = (py >= 0) & (py < h) & (px >= 0) & (px < w)
            pyc, pxc = np.clip(py, 0, h - 1), np.clip(px, 0, w - 1)
            ok = inb & valid[pyc, pxc]
            cnt = ok.sum(axis=1)
            tot = np.where(ok, data[pyc, pxc], 0.0).sum(axis=1)
            hit = cnt > 0
            idx = np.flatnonzero(todo)[hit]
            out[pending[idx, 0], pending[idx, 1]] = tot[hit] / cnt[hit]
            done[idx] = True
        pending = pending[~done]
        if radius >= max_r:
            break
        radius = min(radius * 2, max_r)
    return out


def preprocess_capture(stack) -> DepthImage:
    """Average repeated captures over their non-zero pixels, then fill holes."""
    frames = np.stack([np.asarray(f.data if isinstance(f, DepthImage) else f, dtype=np.float64) for f in stack])
    if frames.ndim != 3:
        raise PreprocessError("frames must share one 2-D shape")
    valid = frames != 0
    count = valid.sum(axis=0)
    if not count.any():
        raise PreprocessError("every frame is entirely zero")
    # deviations from a per-pixel reference keep equal frames exact
    ref = frames.max(axis=0)
    dev = np.where(valid, frames - ref, 0.0).sum(axis=0)
    mean = np.where(count > 0, ref + dev / np.maximum(count, 1), 0.0)
    return DepthImage(fill_zeros(mean))
