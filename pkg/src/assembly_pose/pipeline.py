"""Two-stage pose estimation with a classical template-matching reference estimator.

Stage 1 looks at the whole workspace from far away and yields a class, a
coarse position and an angle inside each part's stage-1 angular domain.
Stage 2 looks at one part from close up through a camera yawed to the
stage-1 angle, resolves near-symmetries and refines position and angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .dataset import STAGE1_HEIGHT, STAGE2_HEIGHT
from .geometry import (
    DEFAULT_INTRINSICS, Camera, CameraIntrinsics, PlanarPose, RigidTransform, look_down_pose,
    normalize_angle,
)
from .parts import PartClass, PartSpec
from .render import Placement, Scene, render_camera
from .sensor import NormalizedImage, SensorNoiseConfig, degrade, normalize, to_depth

FOREGROUND_THRESHOLD = 0.003  # m above the table
EDGE_MARGIN_FRACTION = 0.10
DUPLICATE_RADIUS = 0.025  # m
RESIDUAL_RANGE = 10.0  # deg
RESIDUAL_STEP = 0.5  # deg
COARSE_STEP = 1.0  # deg
TRIM_FRACTION = 0.10
SEGMENT_NOISE = 0.0015  # m, table noise tolerated in the foreground mask
BLUR_CANDIDATES = tuple(0.5 * i for i in range(13))
BORDER_BAND = 12  # px without hysteresis seeds in noisy frames
STAGE2_MARGIN = 33  # px; leaves room for blur tails around close-up patches
MASK_FLOOR = 0.0015  # m
SEED_FLOOR = 0.002  # m
SEGMENT_SIGMAS = (0.0, 1.0, 1.5, 2.0, 2.5)  # px, extra mask smoothing tried in order
SHAFTS = (PartClass.SHAFT_1, PartClass.SHAFT_2)


class LostPartError(RuntimeError):
    """The close-up shows no foreground near its centre."""


@dataclass(frozen=True)
class Detection:
    class_id: PartClass
    bbox: tuple[float, float, float, float]  # u, v, width, height
    score: float
    coarse_theta: float
    source_view: int
    world_position: tuple[float, float]
    domain: float = 360.0

    def __post_init__(self):
        if not 0.0 < self.score <= 1.0:
            raise ValueError(f"score must lie in (0, 1], got {self.score}")
        if not 0.0 <= self.coarse_theta < self.domain:
            raise ValueError(f"coarse_theta {self.coarse_theta} outside [0, {self.domain})")


@dataclass(frozen=True)
class Stage2Result:
    position: tuple[float, float]
    subclass_scores: tuple[float, ...]
    subclass: int
    residual: float
    saturated: bool


@dataclass(frozen=True)
class RefinedPose:
    class_id: PartClass
    position: tuple[float, float]
    subclass: int
    residual_dtheta: float
    final_theta: float
    baseline: float = 0.0
    score: float = 1.0
    saturated: bool = False
    stage1_position: tuple[float, float] | None = None

    def __post_init__(self):
        if not -RESIDUAL_RANGE - 1e-9 <= self.residual_dtheta <= RESIDUAL_RANGE + 1e-9:
            raise ValueError("residual outside the stage-2 range")
        if not 0.0 <= self.final_theta < 360.0:
            raise ValueError("final_theta outside [0, 360)")


class EstimatorInterface(Protocol):
    def stage1(self, image: NormalizedImage, camera: Camera, view: int = 0) -> list[Detection]: ...

    def stage2(self, image: NormalizedImage, camera: Camera, prior: Detection, part: PartSpec) -> Stage2Result: ...


# --------------------------------------------------------------------------
# image helpers


def height_map(image: NormalizedImage, camera: Camera, sensor: SensorNoiseConfig) -> np.ndarray:
    return camera.heights_from_depth(to_depth(image, sensor))


def table_stats(h: np.ndarray, clip: float = 0.008) -> tuple[float, float]:
    """Sigma-clipped mean and standard deviation of near-table heights."""
    v = h[np.abs(h) < clip]
    if v.size < 2:
        return 0.0, 0.0
    for _ in range(3):
        m, sd = v.mean(), v.std()
        if sd == 0:
            return float(m), 0.0
        v = v[np.abs(v - m) < 3.0 * sd]
    return float(v.mean()), float(v.std())


def table_noise(h: np.ndarray) -> float:
    return table_stats(h)[1]


def weighted_centroid(h: np.ndarray, mask: np.ndarray) -> tuple[float, float] | None:
    """Height-weighted centroid ``(u, v)`` over ``mask``."""
    w = np.where(mask, h, 0.0)
    total = w.sum()
    if total <= 0:
        return None
    return (float(w.sum(axis=0) @ np.arange(h.shape[1]) / total),
            float(w.sum(axis=1) @ np.arange(h.shape[0]) / total))


def centered_patch(h: np.ndarray, center, size: int) -> np.ndarray:
    """``size`` x ``size`` bilinear resample of ``h`` centred on ``center = (u, v)``."""
    r = (size - 1) / 2.0
    g = np.arange(size, dtype=float) - r
    vv, uu = np.meshgrid(g + center[1], g + center[0], indexing="ij")
    return ndimage.map_coordinates(h, [vv, uu], order=1, mode="constant", cval=0.0)


def trimmed_mad(obs: np.ndarray, tmpl: np.ndarray, roi: np.ndarray, trim: float = TRIM_FRACTION) -> np.ndarray:
    """Mean absolute difference over ``roi`` with the largest ``trim`` fraction dropped.

    ``tmpl`` may carry leading batch axes; the result has those axes.
    """
    d = np.abs(tmpl[..., roi] - obs[roi])
    n = d.shape[-1]
    keep = max(1, int(math.floor((1.0 - trim) * n)))
    if keep < n:
        d = np.partition(d, keep - 1, axis=-1)[..., :keep]
    return d.mean(axis=-1)


def warp_rigid(img: np.ndarray, du: float, dv: float, angle: float) -> np.ndarray:
    """Rotate ``img`` by ``angle`` (rad) about its centre, then shift by ``(du, dv)`` px."""
    c = (img.shape[0] - 1) / 2.0
    g = np.arange(img.shape[0], dtype=float) - c
    vv, uu = np.meshgrid(g, g, indexing="ij")
    x, y = uu - du, vv - dv
    ca, sa = math.cos(angle), math.sin(angle)
    return ndimage.map_coordinates(img, [-sa * x + ca * y + c, ca * x + sa * y + c], order=1, mode="constant")


def align_rigid(obs: np.ndarray, tmpl: np.ndarray, roi: np.ndarray, iterations: int = 6) -> np.ndarray:
    """Gauss-Newton least-squares ``(du, dv, angle)`` warping ``tmpl`` onto ``obs``."""
    p = np.zeros(3)
    c = (tmpl.shape[0] - 1) / 2.0
    g = np.arange(tmpl.shape[0], dtype=float) - c
    vv, uu = np.meshgrid(g, g, indexing="ij")
    for _ in range(iterations):
        t = warp_rigid(tmpl, *p)
        gy, gx = np.gradient(t)
        ga = gy * (uu - p[0]) - gx * (vv - p[1])
        jac = -np.stack([gx[roi], gy[roi], ga[roi]], axis=1)
        step, *_ = np.linalg.lstsq(jac, (obs - t)[roi], rcond=None)
        p += step
        if np.abs(step).max() < 1e-3:
            break
    return p


def noise_spectrum(size: int, pixel_sigma: float, blur: float, smooth: float, quant_sigma: float) -> np.ndarray:
    """Power spectrum of blurred, smoothed pixel noise plus white quantization noise."""
    f = np.fft.fftfreq(size)
    f2 = f[:, None] ** 2 + f[None, :] ** 2
    gain = np.exp(-4.0 * math.pi ** 2 * (blur ** 2 + smooth ** 2) * f2)
    return pixel_sigma ** 2 * gain + quant_sigma ** 2


def pixel_noise_from_table(table_sigma: float, blur: float, smooth: float, quant_sigma: float) -> float:
    """Pre-blur pixel noise implied by the observed table noise."""
    var_q = quant_sigma ** 2 / (4.0 * math.pi * smooth ** 2) if smooth > 0 else quant_sigma ** 2
    spread = 4.0 * math.pi * (blur ** 2 + smooth ** 2) if blur or smooth else 1.0
    return math.sqrt(max(table_sigma ** 2 - var_q, 0.0) * spread)


def whitened_energy(resid: np.ndarray, psd: np.ndarray) -> float:
    """Chi-square of ``resid`` under stationary noise with power spectrum ``psd``."""
    spec = np.fft.fft2(resid)
    return float((np.abs(spec) ** 2 / psd).sum() / resid.size)


def ncc(obs: np.ndarray, tmpl: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation of ``obs`` against a batch of templates."""
    o = obs.ravel() - obs.mean()
    t = tmpl.reshape(tmpl.shape[0], -1)
    t = t - t.mean(axis=1, keepdims=True)
    denom = np.linalg.norm(t, axis=1) * np.linalg.norm(o)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (t @ o) / denom
    return np.nan_to_num(out, nan=-1.0)


def parabolic_offset(a: float, b: float, c: float) -> float:
    """Vertex offset in ``[-0.5, 0.5]`` of the parabola through (-1,a), (0,b), (1,c)."""
    den = a - 2.0 * b + c
    if den == 0 or not math.isfinite(den):
        return 0.0
    return float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))


def window(h: np.ndarray, u0: int, v0: int, size: int) -> np.ndarray:
    """``size`` x ``size`` block of ``h`` at ``(u0, v0)``, zero outside the image."""
    out = np.zeros((size, size))
    H, W = h.shape
    ua, va = max(u0, 0), max(v0, 0)
    ub, vb = min(u0 + size, W), min(v0 + size, H)
    if ua < ub and va < vb:
        out[va - v0:vb - v0, ua - u0:ub - u0] = h[va:vb, ua:ub]
    return out


def _peaks(values: np.ndarray, count: int) -> list[int]:
    """Indices of the ``count`` largest circular local maxima."""
    prev, nxt = np.roll(values, 1), np.roll(values, -1)
    idx = np.flatnonzero((values >= prev) & (values >= nxt))
    if not len(idx):
        idx = np.array([int(np.argmax(values))])
    return [int(i) for i in idx[np.argsort(-values[idx], kind="stable")][:count]]


def disk(size: int, radius: float) -> np.ndarray:
    g = np.arange(size, dtype=float) - (size - 1) / 2.0
    return g[None, :] ** 2 + g[:, None] ** 2 <= radius ** 2


# --------------------------------------------------------------------------
# template bank


@dataclass(frozen=True, eq=False)
class TemplateSet:
    angles: np.ndarray  # (N,) image-plane angles
    patches: np.ndarray  # (N, S, S) heights, centred on their weighted centroid
    offsets: np.ndarray  # (N, 2) centroid minus projected part origin, pixels
    areas: np.ndarray  # (N,) foreground pixel counts
    size: int
    radius_px: float


class TemplateBank:
    """Renders and caches part templates; read-only once warmed up."""

    def __init__(self, sensor: SensorNoiseConfig, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
                 smooth_sigma: float = 1.0, threshold: float = FOREGROUND_THRESHOLD):
        self.sensor = sensor
        self.intrinsics = intrinsics
        self.smooth_sigma = smooth_sigma
        self.threshold = threshold
        self._cache: dict = {}

    def observe(self, depth: np.ndarray, camera: Camera) -> np.ndarray:
        """Noise-free sensor path: quantize like the sensor, then smooth."""
        q = to_depth(NormalizedImage(normalize(depth, self.sensor.depth_min, self.sensor.depth_max)), self.sensor)
        return self.smooth(camera.heights_from_depth(q)) - self.table_level(camera)

    def table_level(self, camera: Camera) -> float:
        """Height the quantizer reports for the bare table under ``camera``."""
        key = ("table", round(camera.height, 12))
        if key not in self._cache:
            q = to_depth(NormalizedImage(normalize(np.array([[camera.height]]), self.sensor.depth_min,
                                                   self.sensor.depth_max)), self.sensor)
            self._cache[key] = float(camera.height - q[0, 0])
        return self._cache[key]

    def smooth(self, h: np.ndarray) -> np.ndarray:
        if self.smooth_sigma <= 0:
            return h
        return ndimage.gaussian_filter(h, self.smooth_sigma, mode="nearest", truncate=3.0)

    def patch_size(self, part: PartSpec, height: float, margin: int = 9) -> tuple[int, float]:
        k = self.intrinsics
        radius_px = part.bounding_radius * k.fx / (height - part.top_height)
        return 2 * int(math.ceil(radius_px)) + margin, radius_px

    def render_local(self, part: PartSpec, pose: PlanarPose, camera: Camera, size: int):
        """Heights of ``part`` alone in a ``size`` window around its projection.

        Returns the window and the window's top-left pixel in ``camera``.
        """
        u, v = camera.world_to_pixel([pose.x, pose.y, 0.0])
        u0 = int(math.floor(u)) - size // 2
        v0 = int(math.floor(v)) - size // 2
        sub = _safe_crop(camera, u0, v0, size)
        depth = render_camera(Scene((Placement(part, pose),), camera.height), sub).data
        return self.observe(depth, sub), (u0, v0)

    def templates(self, part: PartSpec, height: float, angles: Sequence[float], margin: int = 9) -> TemplateSet:
        key = (id(part), round(height, 9), tuple(np.round(angles, 9)), margin)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        size, radius_px = self.patch_size(part, height, margin)
        render_size = size + 16
        camera = Camera.looking_down(0.0, 0.0, height, 0.0, self.intrinsics)
        patches, offsets, areas = [], [], []
        for a in angles:
            h, (u0, v0) = self.render_local(part, PlanarPose(0.0, 0.0, a), camera, render_size)
            mask = h > self.threshold
            c = weighted_centroid(h, mask)
            origin = camera.world_to_pixel([0.0, 0.0, 0.0]) - np.array([u0, v0])
            patches.append(centered_patch(h, c, size))
            offsets.append((c[0] - origin[0], c[1] - origin[1]))
            areas.append(int(mask.sum()))
        ts = TemplateSet(np.asarray(angles, dtype=float), np.stack(patches), np.asarray(offsets),
                         np.asarray(areas, dtype=float), size, radius_px)
        for arr in (ts.angles, ts.patches, ts.offsets, ts.areas):
            arr.setflags(write=False)
        self._cache[key] = ts
        return ts


def _safe_crop(camera: Camera, u0: int, v0: int, size: int) -> Camera:
    """Crop that tolerates a principal point outside the window."""
    k = camera.intrinsics
    return Camera(_FreeIntrinsics(k.fx, k.fy, k.cx - u0, k.cy - v0, size, size), camera.pose)


@dataclass(frozen=True)
class _FreeIntrinsics(CameraIntrinsics):
    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")


# --------------------------------------------------------------------------
# reference estimator


@dataclass
class TemplateEstimator:
    """Classical stand-in for the learned estimators.

    Stage 1: threshold heights above the table, label connected components,
    classify each by the best template residual and take the angle with the
    highest normalized cross-correlation. Stage 2: score (subclass, residual)
    templates by trimmed mean absolute height difference, interpolate the
    residual, and correct the position by re-rendering at the estimate.
    """

    catalog: list[PartSpec]
    sensor: SensorNoiseConfig = field(default_factory=SensorNoiseConfig)
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    stage1_height: float = STAGE1_HEIGHT
    stage2_height: float = STAGE2_HEIGHT
    smooth_sigma: float = 1.0
    threshold: float = FOREGROUND_THRESHOLD
    score_scale: float = 0.002  # m of residual per e-fold of score
    refine_iterations: int = 3
    min_area_fraction: float = 0.3
    trim: float = TRIM_FRACTION

    def __post_init__(self):
        self.bank = TemplateBank(self.sensor, self.intrinsics, self.smooth_sigma, self.threshold)
        self._by_class = {p.class_id: p for p in self.catalog}

    # ---- shared -------------------------------------------------------

    def _heights(self, image: NormalizedImage, camera: Camera) -> np.ndarray:
        """Smoothed heights relative to the observed table level."""
        h = self.bank.smooth(height_map(image, camera, self.sensor))
        return h - table_stats(h)[0]

    def _stage1_templates(self, part: PartSpec) -> TemplateSet:
        n = int(round(part.angular_domain / COARSE_STEP))
        return self.bank.templates(part, self.stage1_height, [i * COARSE_STEP for i in range(n)])

    def _stage2_templates(self, part: PartSpec) -> TemplateSet:
        steps = int(round(2 * RESIDUAL_RANGE / RESIDUAL_STEP)) + 1
        residuals = [-RESIDUAL_RANGE + i * RESIDUAL_STEP for i in range(steps)]
        angles = [s * part.angular_domain + r for s in range(part.subclass_count) for r in residuals]
        return self.bank.templates(part, self.stage2_height, angles, STAGE2_MARGIN)

    def refine_position(self, h_obs: np.ndarray, mask: np.ndarray, camera: Camera, part: PartSpec,
                        pose: PlanarPose, iterations: int | None = None) -> PlanarPose:
        """Move ``pose`` until its rendering has the observed weighted centroid."""
        c_obs = weighted_centroid(h_obs, mask & (h_obs > self.threshold))
        if c_obs is None:
            return pose
        size, _ = self.bank.patch_size(part, camera.height)
        size += 16
        for _ in range(self.refine_iterations if iterations is None else iterations):
            h, (u0, v0) = self.bank.render_local(part, pose, camera, size)
            c = weighted_centroid(h, h > self.threshold)
            if c is None:
                break
            du, dv = c_obs[0] - (c[0] + u0), c_obs[1] - (c[1] + v0)
            here = camera.world_to_pixel([pose.x, pose.y, 0.0])
            target = camera.pixel_to_table(here + np.array([du, dv]))
            pose = PlanarPose(float(target[0]), float(target[1]), pose.theta)
            if math.hypot(du, dv) < 1e-3:
                break
        return pose

    # ---- stage 1 ------------------------------------------------------

    def segment(self, h: np.ndarray, noise: float | None = None) -> tuple[np.ndarray, int, int]:
        """Label foreground blobs; returns labels, count and a support dilation.

        Noisy images get extra smoothing (for the mask only) until the table
        noise is below ``SEGMENT_NOISE``. Blobs above 2.5 noise standard
        deviations are kept if they reach 4.5 away from the frame border. The floors
        sit below ``threshold`` because sensor blur flattens thin shafts to a
        single quantization step.
        """
        extra, seg, resid = 0.0, h, 0.0
        for extra in SEGMENT_SIGMAS:
            if extra:
                seg = ndimage.gaussian_filter(h, extra, mode="nearest", truncate=3.0)
                resid = table_noise(seg)
            else:
                seg, resid = h, table_noise(h) if noise is None else noise
            if resid <= SEGMENT_NOISE:
                break
        lo = max(MASK_FLOOR, 2.5 * resid)
        hi = np.full(h.shape, max(SEED_FLOOR, 4.5 * resid))
        if resid > 0:
            # replicated borders leave extra noise along the frame edge
            b = BORDER_BAND
            hi[:b], hi[-b:], hi[:, :b], hi[:, -b:] = np.inf, np.inf, np.inf, np.inf
        labels, count = ndimage.label(seg > lo, structure=np.ones((3, 3), dtype=int))
        if count:
            seeded = np.zeros(count + 1, dtype=bool)
            seeded[np.unique(labels[seg > hi])] = True
            seeded[0] = False
            keep = np.cumsum(seeded) * seeded
            labels, count = keep[labels], int(seeded.sum())
        return labels, count, 2 + int(math.ceil(2.0 * extra))

    def components(self, h: np.ndarray) -> tuple[list[np.ndarray], int]:
        labels, count, grow = self.segment(h)
        if count == 0:
            return [], grow
        sizes = np.bincount(labels.ravel(), minlength=count + 1)
        smallest = min(self._stage1_templates(p).areas.min() for p in self.catalog)
        floor = self.min_area_fraction * smallest
        return [labels == i for i in range(1, count + 1) if sizes[i] >= floor], grow

    def stage1(self, image: NormalizedImage, camera: Camera, view: int = 0) -> list[Detection]:
        h = self._heights(image, camera)
        out = []
        comps, grow = self.components(h)
        for comp in comps:
            det = self._classify(h, comp, camera, view, grow)
            if det is not None:
                out.append(det)
        return out

    def _classify(self, h: np.ndarray, comp: np.ndarray, camera: Camera, view: int,
                  grow: int = 2) -> Detection | None:
        support = ndimage.binary_dilation(comp, iterations=grow)
        hm = np.where(support, h, 0.0)
        c_obs = weighted_centroid(hm, comp)
        if c_obs is None:
            return None
        area = float(comp.sum())
        candidates = []
        for part in self.catalog:
            ts = self._stage1_templates(part)
            ratio = area / ts.areas.mean()
            candidates.append((part, ts, 0.6 <= ratio <= 1.6))
        if any(c[2] for c in candidates):
            candidates = [c for c in candidates if c[2]]
        best = None
        for part, ts, _ in candidates:
            patch = centered_patch(hm, c_obs, ts.size)
            corr = ncc(patch, ts.patches)
            i = int(np.argmax(corr))
            roi = disk(ts.size, ts.radius_px + 2)
            resid = float(trimmed_mad(patch, ts.patches[i], roi))
            if best is None or resid < best[0]:
                best = (resid, part, ts, corr, i)
        _, part, ts, corr, _ = best
        size = ts.size + 16
        # Centred templates ignore parallax, so the strongest correlation peaks
        # are re-ranked by rendering the part where it actually lies.
        ranked = []
        for i in _peaks(corr, 3):
            a = float(ts.angles[i]) - camera.yaw
            origin_px = np.array(c_obs) - ts.offsets[i]
            guess = camera.pixel_to_table(origin_px)
            pose = self.refine_position(h, support, camera, part, PlanarPose(guess[0], guess[1], a), 2)
            ranked.append((self.rendered_residual(hm, camera, part, pose, size), pose))
        resid, pose = min(ranked, key=lambda t: t[0])
        lo = self.rendered_residual(hm, camera, part, PlanarPose(pose.x, pose.y, pose.theta - COARSE_STEP), size)
        hi = self.rendered_residual(hm, camera, part, PlanarPose(pose.x, pose.y, pose.theta + COARSE_STEP), size)
        theta = pose.theta + parabolic_offset(lo, resid, hi) * COARSE_STEP
        pose = self.refine_position(h, support, camera, part, PlanarPose(pose.x, pose.y, theta))
        u, v = camera.world_to_pixel([pose.x, pose.y, 0.0])
        w, hh = part.fixed_bbox_size(camera.height, camera.intrinsics)
        score = float(np.clip(math.exp(-resid / self.score_scale), 1e-12, 1.0))
        return Detection(part.class_id, (float(u), float(v), float(w), float(hh)), score,
                         normalize_angle(pose.theta, part.angular_domain), view, (pose.x, pose.y), part.angular_domain)

    def match_blur(self, patch: np.ndarray, tmpl: np.ndarray, roi: np.ndarray) -> float:
        """Gaussian blur (px) that best reconciles a sharp template with the observation."""
        best, best_score = 0.0, math.inf
        for sigma in BLUR_CANDIDATES:
            t = ndimage.gaussian_filter(tmpl, sigma, mode="constant", truncate=3.0) if sigma else tmpl
            score = float(trimmed_mad(patch, t, roi, self.trim))
            if score < best_score:
                best, best_score = sigma, score
        return best

    def rendered_residual(self, hm: np.ndarray, camera: Camera, part: PartSpec, pose: PlanarPose,
                          size: int) -> float:
        """Trimmed mean absolute height difference against a rendering at ``pose``."""
        h, (u0, v0) = self.bank.render_local(part, pose, camera, size)
        obs = window(hm, u0, v0, size)
        roi = (h > self.threshold) | (obs > self.threshold)
        if not roi.any():
            return math.inf
        return float(trimmed_mad(obs, h, roi))

    # ---- stage 2 ------------------------------------------------------

    def _resolve_subclass(self, patch: np.ndarray, stack: np.ndarray, roi: np.ndarray, per: np.ndarray,
                          blur: float, table_sigma: float) -> tuple[int, int, np.ndarray]:
        """Pick the subclass whose aligned template best explains the patch.

        Each subclass keeps its best grid residual; its template is rigidly
        aligned to the patch and the residual is scored under the sensor noise
        spectrum (blurred pixel noise over a white quantization floor).
        Returns the subclass, its grid index and per-subclass chi-square.
        """
        steps = per.shape[1]
        best_i = per.argmin(axis=1)
        sq = self.sensor.depth_step / math.sqrt(12.0)
        sn = pixel_noise_from_table(table_sigma, blur, self.smooth_sigma, sq)
        psd = noise_spectrum(patch.shape[0], sn, blur, self.smooth_sigma, sq)
        chi2 = np.empty(per.shape[0])
        for j, i in enumerate(best_i):
            tmpl = stack[j * steps + i]
            params = align_rigid(patch, tmpl, roi)
            chi2[j] = whitened_energy((patch - warp_rigid(tmpl, *params)) * roi, psd)
        s = int(np.argmin(chi2))
        return s, int(best_i[s]), chi2

    def stage2(self, image: NormalizedImage, camera: Camera, prior: Detection, part: PartSpec) -> Stage2Result:
        h = self._heights(image, camera)
        noise = table_noise(h)
        labels, count, grow = self.segment(h, noise)
        if count == 0:
            raise LostPartError(f"no foreground in the close-up of {part.name}")
        expected = camera.world_to_pixel([prior.world_position[0], prior.world_position[1], 0.0])
        ts = self._stage2_templates(part)
        v, u = np.ogrid[:h.shape[0], :h.shape[1]]
        near = (u - expected[0]) ** 2 + (v - expected[1]) ** 2 <= ts.radius_px ** 2
        overlap = np.bincount(labels[near], minlength=count + 1)
        overlap[0] = 0
        if overlap.max() == 0:
            raise LostPartError(f"{part.name} not found near the expected position")
        comp = labels == int(np.argmax(overlap))
        support = ndimage.binary_dilation(comp, iterations=grow)
        hm = np.where(support, h, 0.0)
        c_obs = weighted_centroid(hm, comp)
        # blur tails of this part stay; neighbours are blanked
        others = ndimage.binary_dilation((labels > 0) & ~comp, iterations=grow + STAGE2_MARGIN // 2)
        patch = centered_patch(np.where(others, 0.0, h), c_obs, ts.size)
        roi = disk(ts.size, ts.radius_px + STAGE2_MARGIN // 2 - 2)
        stack = ts.patches
        scores = trimmed_mad(patch, stack, roi, self.trim)
        blur = self.match_blur(patch, stack[int(np.argmin(scores))], roi)
        if blur > 0:
            stack = ndimage.gaussian_filter(stack, (0.0, blur, blur), mode="constant", truncate=3.0)
            scores = trimmed_mad(patch, stack, roi, self.trim)
        k = part.subclass_count
        per = scores.reshape(k, -1)
        s, i, chi2 = self._resolve_subclass(patch, stack, roi, per, blur, noise)
        steps = per.shape[1]
        saturated = i == 0 or i == steps - 1
        frac = 0.0 if saturated else parabolic_offset(per[s, i - 1], per[s, i], per[s, i + 1])
        residual = -RESIDUAL_RANGE + (i + frac) * RESIDUAL_STEP
        image_angle = s * part.angular_domain + residual
        origin_px = np.array(c_obs) - ts.offsets[s * steps + i]
        guess = camera.pixel_to_table(origin_px)
        pose = self.refine_position(h, support, camera, part,
                                    PlanarPose(guess[0], guess[1], image_angle - camera.yaw))
        sub_scores = tuple(float(x) for x in np.exp(-0.5 * (chi2 - chi2.min())))
        return Stage2Result((pose.x, pose.y), sub_scores, int(s), float(residual), bool(saturated))


# --------------------------------------------------------------------------
# pipeline operations


def world_pose_from_detection(d: Detection, camera: Camera, table_depth: float) -> tuple[float, float]:
    """De-project the bbox centre at ``table_depth`` into the world."""
    p = camera.pixel_to_world((d.bbox[0], d.bbox[1]), table_depth)
    return float(p[0]), float(p[1])


def _is_edge(d: Detection, width: int, height: int, margin_fraction: float) -> bool:
    m = margin_fraction * width
    u, v = d.bbox[0], d.bbox[1]
    return u < m or v < m or u > width - 1 - m or v > height - 1 - m


def _priority(d: Detection):
    return (-d.score, d.source_view, d.class_id.value, d.world_position)


def _near(a: Detection, b: Detection, radius: float) -> bool:
    return math.hypot(a.world_position[0] - b.world_position[0],
                      a.world_position[1] - b.world_position[1]) <= radius


def filter_detections(detections: Sequence[Detection], width: int = DEFAULT_INTRINSICS.width,
                      height: int = DEFAULT_INTRINSICS.height, radius: float = DUPLICATE_RADIUS,
                      margin_fraction: float = EDGE_MARGIN_FRACTION) -> list[Detection]:
    """Multi-view clean-up: edge shafts, cross-class and same-class duplicates.

    1. A shaft whose bbox centre lies in the edge band of its view is dropped
       when another view has a non-edge shaft of the same class nearby.
    2. Of nearby detections with different classes the higher score wins.
    3. Of nearby detections with the same class the higher score wins.
    """
    dets = sorted(detections, key=_priority)
    edge = [d.class_id in SHAFTS and _is_edge(d, width, height, margin_fraction) for d in dets]
    kept = []
    for d, e in zip(dets, edge):
        if e and any(o.class_id == d.class_id and o.source_view != d.source_view and not oe
                     and _near(d, o, radius) for o, oe in zip(dets, edge)):
            continue
        kept.append(d)
    for same in (False, True):
        survivors = []
        for d in kept:
            if any((o.class_id == d.class_id) == same and _near(d, o, radius) for o in survivors):
                continue
            survivors.append(d)
        # survivors of a rule are a subset in priority order; rule 3 sees rule 2's output
        removed = {id(d) for d in kept} - {id(d) for d in survivors}
        kept = [d for d in kept if id(d) not in removed]
    return kept


def canonical_camera_pose(prior: Detection, stage2_height: float = STAGE2_HEIGHT) -> RigidTransform:
    """Camera above the prior, yawed so the part shows at its canonical angle."""
    return look_down_pose(prior.world_position[0], prior.world_position[1], stage2_height, -prior.coarse_theta)


def refine_stage2_reference(image: NormalizedImage, camera: Camera, prior: Detection, part: PartSpec,
                            estimator: TemplateEstimator | None = None) -> RefinedPose:
    estimator = estimator or TemplateEstimator([part])
    return compose_refined(prior, part, estimator.stage2(image, camera, prior, part))


def compose_refined(prior: Detection, part: PartSpec, r: Stage2Result) -> RefinedPose:
    final = normalize_angle(prior.coarse_theta + r.subclass * part.angular_domain + r.residual)
    return RefinedPose(part.class_id, r.position, r.subclass, r.residual, final, prior.coarse_theta,
                       prior.score, r.saturated, prior.world_position)


def detect_stage1_reference(image: NormalizedImage, camera: Camera, catalog: list[PartSpec],
                            estimator: TemplateEstimator | None = None) -> list[Detection]:
    estimator = estimator or TemplateEstimator(catalog)
    return estimator.stage1(image, camera)


Capture = Callable[[Camera], NormalizedImage]


@dataclass
class PipelineResult:
    detections: list[Detection]
    poses: list[RefinedPose]
    lost: list[Detection]


def estimate_all(views: Sequence[NormalizedImage], cameras: Sequence[Camera], estimator: EstimatorInterface,
                 catalog: list[PartSpec], capture: Capture,
                 stage2_height: float = STAGE2_HEIGHT) -> PipelineResult:
    """Stage 1 on every view, multi-view filtering, then one close-up per part."""
    if len(views) != len(cameras):
        raise ValueError("one camera per view is required")
    dets = []
    for i, (img, cam) in enumerate(zip(views, cameras)):
        dets.extend(estimator.stage1(img, cam, i))
    k = cameras[0].intrinsics if cameras else DEFAULT_INTRINSICS
    kept = filter_detections(dets, k.width, k.height)
    by_class = {p.class_id: p for p in catalog}
    poses, lost = [], []
    for d in kept:
        part = by_class[d.class_id]
        cam = Camera(k, canonical_camera_pose(d, stage2_height))
        try:
            r = estimator.stage2(capture(cam), cam, d, part)
        except LostPartError:
            lost.append(d)
            continue
        poses.append(compose_refined(d, part, r))
    return PipelineResult(kept, poses, lost)


class SimulatedRobot:
    """Stands in for moving the real camera: renders the true scene and degrades it."""

    def __init__(self, scene: Scene, noise: SensorNoiseConfig, seed: int):
        self.scene = scene
        self.noise = noise
        self.seed = int(seed)
        self.captures = 0

    def capture(self, camera: Camera) -> NormalizedImage:
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, 0xC0FFEE, self.captures])
        self.captures += 1
        depth = render_camera(self.scene, camera)
        return degrade(depth, self.noise, int(ss.generate_state(1, np.uint64)[0]))


def workspace_cameras(center=(0.0, 0.0), height: float = STAGE1_HEIGHT, grid: int = 3, overlap: float = 0.2,
                      intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS) -> list[Camera]:
    """``grid`` x ``grid`` stage-1 views tiling the workspace with fractional ``overlap``."""
    fw = intrinsics.width * height / intrinsics.fx
    fh = intrinsics.height * height / intrinsics.fy
    step_x, step_y = fw * (1 - overlap), fh * (1 - overlap)
    off = (grid - 1) / 2.0
    return [Camera.looking_down(center[0] + (i - off) * step_x, center[1] + (off - j) * step_y, height, 0.0,
                                intrinsics)
            for j in range(grid) for i in range(grid)]


# --------------------------------------------------------------------------
# serialization


def detection_to_dict(d: Detection) -> dict:
    return {"class_id": d.class_id.value, "bbox": list(d.bbox), "score": d.score,
            "coarse_theta": d.coarse_theta, "source_view": d.source_view,
            "world_position": list(d.world_position), "domain": d.domain}


def detection_from_dict(d: dict) -> Detection:
    return Detection(PartClass(d["class_id"]), tuple(d["bbox"]), d["score"], d["coarse_theta"],
                     d["source_view"], tuple(d["world_position"]), d["domain"])


def refined_to_dict(p: RefinedPose) -> dict:
    return {"class_id": p.class_id.value, "position": list(p.position), "subclass": p.subclass,
            "residual_dtheta": p.residual_dtheta, "final_theta": p.final_theta, "baseline": p.baseline,
            "score": p.score, "saturated": p.saturated,
            "stage1_position": None if p.stage1_position is None else list(p.stage1_position)}


def refined_from_dict(d: dict) -> RefinedPose:
    s1 = d.get("stage1_position")
    return RefinedPose(PartClass(d["class_id"]), tuple(d["position"]), d["subclass"], d["residual_dtheta"],
                       d["final_theta"], d["baseline"], d["score"], d["saturated"],
                       None if s1 is None else tuple(s1))


def result_to_dict(r: PipelineResult) -> dict:
    return {"detections": [detection_to_dict(d) for d in r.detections],
            "poses": [refined_to_dict(p) for p in r.poses],
            "lost": [detection_to_dict(d) for d in r.lost]}


def result_from_dict(d: dict) -> PipelineResult:
    return PipelineResult([detection_from_dict(x) for x in d["detections"]],
                          [refined_from_dict(x) for x in d["poses"]],
                          [detection_from_dict(x) for x in d["lost"]])
