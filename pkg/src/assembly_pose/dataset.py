"""Labelled stage-1 and stage-2 scene generation."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .geometry import DEFAULT_INTRINSICS, Camera, CameraIntrinsics, PlanarPose, normalize_angle
from .parts import CLASS_ORDER, PartSpec, builtin_catalog, catalog_by_class, part_class
from .render import DepthImage, Placement, Scene, render_camera, write_depth_pgm, write_gray_pgm
from .sensor import NormalizedImage, SensorNoiseConfig, degrade

STAGE1_HEIGHT = 0.53
STAGE2_HEIGHT = 0.31
# probabilities of 1..5 parts per scene; mean 3.2
PART_COUNT_WEIGHTS = (0.1, 0.2, 0.3, 0.2, 0.2)

_STREAM_STAGE1 = 1
_STREAM_STAGE2 = 2
_STREAM_NOISE = 3


class PlacementError(RuntimeError):
    """Rejection sampling ran out of attempts for one scene."""

    def __init__(self, index: int, attempts: int):
        super().__init__(f"scene {index}: no non-overlapping layout after {attempts} attempts")
        self.index = index


@dataclass(frozen=True)
class GenConfig:
    stage1_height: float = STAGE1_HEIGHT
    stage2_height: float = STAGE2_HEIGHT
    min_parts: int = 1
    max_parts: int = 5
    part_count_weights: tuple = PART_COUNT_WEIGHTS
    scene_count: int = 100
    delta_xy: float = 0.010  # m, uniform in [-delta_xy, delta_xy]
    delta_theta: float = 10.0  # deg
    master_seed: int = 0
    separation_margin: float = 0.005  # m between bounding circles
    placement_attempts: int = 1000
    render_images: bool = True

    def __post_init__(self):
        if not (self.stage1_height > 0 and self.stage2_height > 0):
            raise ValueError("capture heights must be positive")
        if not (1 <= self.min_parts <= self.max_parts <= 5):
            raise ValueError("parts per scene must lie within [1, 5]")
        w = tuple(float(x) for x in self.part_count_weights)
        if len(w) != self.max_parts - self.min_parts + 1 or min(w) < 0 or sum(w) <= 0:
            raise ValueError("part_count_weights must give one weight per allowed count")
        object.__setattr__(self, "part_count_weights", w)
        if self.delta_xy < 0 or not 0 <= self.delta_theta <= 10.0:
            raise ValueError("perturbation ranges must be non-negative, delta_theta at most 10 deg")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Stage1Label:
    class_id: str
    bbox: tuple[float, float, float, float]  # u, v, width, height (pixels)
    orientation_pair: tuple[float, float]  # sin(n theta), cos(n theta)
    pose: PlanarPose

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "bbox": list(self.bbox),
                "orientation_pair": list(self.orientation_pair),
                "pose": {"x": self.pose.x, "y": self.pose.y, "theta": self.pose.theta}}


@dataclass(frozen=True)
class Stage2Label:
    class_id: str
    subclass: int
    residual_dtheta: float
    perturbed_bbox: tuple[float, float, float, float]
    true_planar_pose: PlanarPose
    prior_pose: PlanarPose
    delta: tuple[float, float, float]

    def to_dict(self) -> dict:
        p, q = self.true_planar_pose, self.prior_pose
        return {"class_id": self.class_id, "subclass": self.subclass,
                "residual_dtheta": self.residual_dtheta, "perturbed_bbox": list(self.perturbed_bbox),
                "true_planar_pose": {"x": p.x, "y": p.y, "theta": p.theta},
                "prior_pose": {"x": q.x, "y": q.y, "theta": q.theta},
                "delta": list(self.delta)}


@dataclass(frozen=True, eq=False)
class Sample:
    index: int
    scene: Scene
    camera: Camera
    depth: DepthImage | None
    image: NormalizedImage | None
    labels: list


# --------------------------------------------------------------------------
# orientation conventions


def canonical_angle(theta: float, part: PartSpec) -> tuple[int, float]:
    """Split ``theta`` into (subclass, residual in the stage-1 angular domain)."""
    domain = part.angular_domain
    t = normalize_angle(theta)
    residual = normalize_angle(t, domain)
    if part.subclass_count == 1:
        return 0, residual
    sub = int(math.floor((t - residual) / domain + 0.5)) % part.subclass_count
    return sub, residual


def compose_angle(subclass: int, residual: float, part: PartSpec, baseline: float = 0.0) -> float:
    return normalize_angle(baseline + subclass * part.angular_domain + residual)


def encode_orientation(theta: float, n_eff: int) -> tuple[float, float]:
    if n_eff < 1:
        raise ValueError("n_eff must be >= 1")
    # reduce first so large multiples of the period do not lose precision
    a = math.radians(n_eff * normalize_angle(theta, 360.0 / n_eff))
    return math.sin(a), math.cos(a)


def decode_orientation(s: float, c: float, n_eff: int) -> float:
    """Inverse of :func:`encode_orientation`, in ``[0, 360/n_eff)``."""
    if n_eff < 1:
        raise ValueError("n_eff must be >= 1")
    if math.hypot(s, c) < 0.1:
        raise ValueError("orientation pair too close to zero to decode")
    return normalize_angle(math.degrees(math.atan2(s, c)) / n_eff, 360.0 / n_eff)


# --------------------------------------------------------------------------
# scene sampling


def scene_rng(master_seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, stream, int(index)]))


def noise_seed(master_seed: int, stream: int, index: int) -> int:
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, _STREAM_NOISE, stream, int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def placement_region(part: PartSpec, camera: Camera) -> tuple[float, float, float, float]:
    """Rectangle of part centres that keep the whole part inside the frame.

    The visible footprint shrinks with height, so the bound is evaluated at
    the part's top surface.
    """
    k = camera.intrinsics
    z = camera.height - part.top_height
    half_w = min(k.cx, k.width - 1 - k.cx) * z / k.fx
    half_h = min(k.cy, k.height - 1 - k.cy) * z / k.fy
    cx, cy = float(camera.pose.translation[0]), float(camera.pose.translation[1])
    r = part.bounding_radius
    return cx - half_w + r, cx + half_w - r, cy - half_h + r, cy + half_h - r


def _draw_count(rng: np.random.Generator, cfg: GenConfig) -> int:
    w = np.asarray(cfg.part_count_weights)
    return cfg.min_parts + int(rng.choice(len(w), p=w / w.sum()))


def layout_stage1(index: int, cfg: GenConfig, catalog: list[PartSpec],
                  camera: Camera) -> list[Placement]:
    """Random non-overlapping placements for one stage-1 scene.

    The classes present are the first ``count`` entries of a per-scene random
    permutation of the catalog, so each class appears in any scene with the
    same probability.
    """
    rng = scene_rng(cfg.master_seed, _STREAM_STAGE1, index)
    count = min(_draw_count(rng, cfg), len(catalog))
    order = rng.permutation(len(catalog))[:count]
    # largest first keeps rejection sampling efficient
    chosen = sorted((catalog[i] for i in order), key=lambda p: -p.bounding_radius)
    for _ in range(cfg.placement_attempts):
        placed: list[Placement] = []
        ok = True
        for part in chosen:
            x0, x1, y0, y1 = placement_region(part, camera)
            if x0 > x1 or y0 > y1:
                raise PlacementError(index, 0)
            x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
            if any(math.hypot(x - p.pose.x, y - p.pose.y)
                   < part.bounding_radius + p.part.bounding_radius + cfg.separation_margin for p in placed):
                ok = False
                break
            placed.append(Placement(part, PlanarPose(x, y, rng.uniform(0.0, 360.0))))
        if ok:
            return placed
    raise PlacementError(index, cfg.placement_attempts)


def stage1_label(pl: Placement, camera: Camera) -> Stage1Label:
    u, v = camera.world_to_pixel([pl.pose.x, pl.pose.y, 0.0])
    w, h = pl.part.fixed_bbox_size(camera.height, camera.intrinsics)
    _, residual = canonical_angle(pl.pose.theta, pl.part)
    pair = encode_orientation(residual, pl.part.effective_order)
    return Stage1Label(pl.part.name, (float(u), float(v), float(w), float(h)), pair, pl.pose)


def stage1_camera(cfg: GenConfig, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS) -> Camera:
    return Camera.looking_down(0.0, 0.0, cfg.stage1_height, 0.0, intrinsics)


def make_stage1_sample(index: int, cfg: GenConfig, catalog: list[PartSpec],
                       noise: SensorNoiseConfig | None = None,
                       intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS) -> Sample:
    camera = stage1_camera(cfg, intrinsics)
    placements = layout_stage1(index, cfg, catalog, camera)
    scene = Scene(tuple(placements), cfg.stage1_height)
    labels = [stage1_label(p, camera) for p in placements]
    depth = image = None
    if cfg.render_images:
        depth = render_camera(scene, camera)
        image = degrade(depth, noise or SensorNoiseConfig(), noise_seed(cfg.master_seed, _STREAM_STAGE1, index))
    return Sample(index, scene, camera, depth, image, labels)


def gen_stage1_scenes(cfg: GenConfig, catalog: list[PartSpec] | None = None,
                      noise: SensorNoiseConfig | None = None,
                      intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
                      start: int = 0) -> Iterator[Sample]:
    """Scenes ``start .. scene_count-1``; each depends only on (seed, index)."""
    catalog = catalog if catalog is not None else builtin_catalog()
    for i in range(start, cfg.scene_count):
        yield make_stage1_sample(i, cfg, catalog, noise, intrinsics)


def canonical_camera(prior: PlanarPose, part: PartSpec, height: float,
                     intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS) -> Camera:
    """Close-up camera above the prior position, yawed so the prior appears at angle 0."""
    _, residual = canonical_angle(prior.theta, part)
    return Camera.looking_down(prior.x, prior.y, height, -residual, intrinsics)


def make_stage2_sample(part: PartSpec, subclass: int, index: int, cfg: GenConfig,
                       noise: SensorNoiseConfig | None = None,
                       intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS) -> Sample:
    if not 0 <= subclass < part.subclass_count:
        raise ValueError(f"subclass {subclass} out of range for {part.name}")
    stream = _STREAM_STAGE2 + 16 * (CLASS_ORDER.index(part.class_id) * 8 + subclass + 1)
    rng = scene_rng(cfg.master_seed, stream, index)
    domain = part.angular_domain
    theta = subclass * domain + rng.uniform(0.0, domain)
    x, y = rng.uniform(-0.05, 0.05, size=2)
    prior = PlanarPose(x, y, theta)
    dx, dy = rng.uniform(-cfg.delta_xy, cfg.delta_xy, size=2) if cfg.delta_xy > 0 else (0.0, 0.0)
    dth = rng.uniform(-cfg.delta_theta, cfg.delta_theta) if cfg.delta_theta > 0 else 0.0
    true_pose = PlanarPose(x + dx, y + dy, theta + dth)
    camera = canonical_camera(prior, part, cfg.stage2_height, intrinsics)
    scene = Scene((Placement(part, true_pose),), cfg.stage2_height)
    u, v = camera.world_to_pixel([true_pose.x, true_pose.y, 0.0])
    w, h = part.fixed_bbox_size(cfg.stage2_height, intrinsics)
    label = Stage2Label(part.name, subclass, float(dth), (float(u), float(v), float(w), float(h)),
                        true_pose, prior, (float(dx), float(dy), float(dth)))
    depth = image = None
    if cfg.render_images:
        depth = render_camera(scene, camera)
        image = degrade(depth, noise or SensorNoiseConfig(), noise_seed(cfg.master_seed, stream, index))
    return Sample(index, scene, camera, depth, image, [label])


def gen_stage2_samples(part: PartSpec, subclass: int, cfg: GenConfig,
                       noise: SensorNoiseConfig | None = None,
                       intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS) -> Iterator[Sample]:
    for i in range(cfg.scene_count):
        yield make_stage2_sample(part, subclass, i, cfg, noise, intrinsics)


# --------------------------------------------------------------------------
# on-disk datasets


def scene_to_dict(scene: Scene) -> dict:
    return {"table_depth": scene.table_depth,
            "placements": [{"class_id": p.part.name, "x": p.pose.x, "y": p.pose.y, "theta": p.pose.theta}
                           for p in scene.placements]}


def scene_from_dict(d: dict, catalog: list[PartSpec]) -> Scene:
    by_class = catalog_by_class(catalog)
    return Scene(tuple(Placement(by_class[part_class(p["class_id"])], PlanarPose(p["x"], p["y"], p["theta"]))
                       for p in d["placements"]), float(d["table_depth"]))


def camera_to_dict(camera: Camera) -> dict:
    return {"intrinsics": camera.intrinsics.to_dict(), "pose": camera.pose.to_row_major()}


def camera_from_dict(d: dict) -> Camera:
    from .geometry import RigidTransform
    return Camera(CameraIntrinsics(**d["intrinsics"]), RigidTransform.from_row_major(d["pose"]))


def write_sample(directory: Path, sample: Sample):
    """``<index>.json`` label record, plus raw depth and normalized PGMs when rendered."""
    stem = f"{sample.index:06d}"
    record = {"index": sample.index, "scene": scene_to_dict(sample.scene),
              "camera": camera_to_dict(sample.camera), "labels": [lb.to_dict() for lb in sample.labels]}
    if sample.depth is not None:
        write_depth_pgm(directory / f"{stem}_depth.pgm", sample.depth)
        write_gray_pgm(directory / f"{stem}.pgm", sample.image.data)
        record["image"] = f"{stem}.pgm"
        record["depth"] = f"{stem}_depth.pgm"
    (directory / f"{stem}.json").write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")
