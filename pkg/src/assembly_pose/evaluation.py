"""Pose error metrics, ground-truth matching and per-part report tables."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .parts import CLASS_ORDER, PartClass, PartSpec
from .pipeline import Detection, PipelineResult, RefinedPose
from .render import Scene

METRIC_FIELDS = ("detection_rate", "translation_mm_mean", "translation_mm_std",
                 "rotation_deg_mean", "rotation_deg_std", "isometry_accuracy")
AVERAGE_POOLED = "Average"
AVERAGE_PER_PART = "Average (per-part mean)"


def rotation_error(est: float, gt: float, domain: float) -> float:
    """Circular distance between two angles (deg) modulo ``domain``."""
    if not domain > 0:
        raise ValueError("domain must be positive")
    d = math.fmod(abs(est - gt), domain)
    return min(d, domain - d)


def translation_error(est, gt) -> float:
    """Planar distance in millimetres between two ``(x, y)`` points in metres."""
    return math.hypot(est[0] - gt[0], est[1] - gt[1]) * 1e3


@dataclass(frozen=True)
class PoseSample:
    """Outcome for one ground-truth part at one stage.

    ``translation_mm`` and ``rotation_deg`` are ``None`` when the part was
    missed. ``isometry_correct`` is ``None`` where no near-symmetry exists.
    """

    part: str
    detected: bool
    translation_mm: float | None = None
    rotation_deg: float | None = None
    isometry_correct: bool | None = None

    def __post_init__(self):
        if self.detected != (self.translation_mm is not None):
            raise ValueError("a detected sample needs a translation error and a missed one none")
        for v in (self.translation_mm, self.rotation_deg):
            if v is not None and not v >= 0:
                raise ValueError("errors must be non-negative")


@dataclass(frozen=True)
class PartMetrics:
    part: str
    count: int
    detection_rate: float
    translation_mm_mean: float | None
    translation_mm_std: float | None
    rotation_deg_mean: float | None
    rotation_deg_std: float | None
    isometry_accuracy: float | None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_FIELDS}


def _mean_std(values: Sequence[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std())


def _metrics(part: str, rows: Sequence[PoseSample]) -> PartMetrics:
    found = [r for r in rows if r.detected]
    t = _mean_std([r.translation_mm for r in found])
    rot = _mean_std([r.rotation_deg for r in found if r.rotation_deg is not None])
    iso = [r.isometry_correct for r in found if r.isometry_correct is not None]
    return PartMetrics(part, len(rows), len(found) / len(rows), *t, *rot,
                       sum(iso) / len(iso) if iso else None)


def _mean_or_none(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(samples: Iterable[PoseSample], order: Sequence[str] | None = None) -> list[PartMetrics]:
    """Per-part rows followed by the two Average rows.

    ``Average`` takes the unweighted mean of per-part rates and pools the
    errors of all samples; ``Average (per-part mean)`` averages every column
    over the part rows. Standard deviations are population ones.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to aggregate")
    groups: dict[str, list[PoseSample]] = {}
    for s in samples:
        groups.setdefault(s.part, []).append(s)
    names = [n for n in (order or ()) if n in groups] + sorted(n for n in groups if n not in (order or ()))
    rows = [_metrics(n, groups[n]) for n in names]
    pooled = _metrics(AVERAGE_POOLED, samples)
    pooled = PartMetrics(AVERAGE_POOLED, len(samples), _mean_or_none(r.detection_rate for r in rows),
                         pooled.translation_mm_mean, pooled.translation_mm_std,
                         pooled.rotation_deg_mean, pooled.rotation_deg_std,
                         _mean_or_none(r.isometry_accuracy for r in rows))
    per_part = PartMetrics(AVERAGE_PER_PART, len(samples),
                           *(_mean_or_none(getattr(r, f) for r in rows) for f in METRIC_FIELDS))
    return rows + [pooled, per_part]


# --------------------------------------------------------------------------
# matching estimates to ground truth


def _part_name(class_id: PartClass) -> str:
    return class_id.value


def _nearest(candidates, x: float, y: float, gate: float, position):
    best, best_d = None, gate
    for c in candidates:
        px, py = position(c)
        d = math.hypot(px - x, py - y)
        if d <= best_d:
            best, best_d = c, d
    return best


def evaluate_scene(scene: Scene, result: PipelineResult, gate: float | None = None
                   ) -> tuple[list[PoseSample], list[PoseSample], dict]:
    """Score one pipeline run against the scene it observed.

    Each ground-truth part is matched to the nearest same-class estimate
    within ``gate`` (default: the part's bounding radius). Stage-1 angles are
    compared inside the stage-1 angular domain, stage-2 angles inside the
    true symmetry domain. Returns stage-1 samples, stage-2 samples and
    classification counts.
    """
    s1, s2 = [], []
    counts = {"located": 0, "correct_class": 0, "false_positives": 0}
    used_dets: set[int] = set()
    for pl in scene.placements:
        part, pose = pl.part, pl.pose
        g = part.bounding_radius if gate is None else gate
        name = _part_name(part.class_id)
        near = _nearest(result.detections, pose.x, pose.y, g, lambda d: d.world_position)
        if near is not None:
            counts["located"] += 1
            counts["correct_class"] += near.class_id == part.class_id
        det = _nearest([d for d in result.detections if d.class_id == part.class_id], pose.x, pose.y, g,
                       lambda d: d.world_position)
        if det is None:
            s1.append(PoseSample(name, False))
        else:
            used_dets.add(id(det))
            s1.append(detection_sample(part, det, pose.x, pose.y, pose.theta))
        ref = _nearest([p for p in result.poses if p.class_id == part.class_id], pose.x, pose.y, g,
                       lambda p: p.position)
        if ref is None:
            s2.append(PoseSample(name, False))
        else:
            s2.append(stage2_sample(part, ref, pose.x, pose.y, pose.theta))
    counts["false_positives"] = sum(id(d) not in used_dets for d in result.detections)
    return s1, s2, counts


def stage2_sample(part: PartSpec, ref: RefinedPose, x: float, y: float, theta: float) -> PoseSample:
    """A refined pose scored against the truth; the branch is right when within half a step."""
    err = rotation_error(ref.final_theta, theta, part.symmetry_domain)
    iso = err < part.angular_domain / 2.0 if part.subclass_count > 1 else None
    return PoseSample(_part_name(part.class_id), True, translation_error(ref.position, (x, y)), err, iso)


def detection_sample(part: PartSpec, det: Detection, x: float, y: float, theta: float) -> PoseSample:
    return PoseSample(_part_name(part.class_id), True, translation_error(det.world_position, (x, y)),
                      rotation_error(det.coarse_theta, theta, part.angular_domain))


# --------------------------------------------------------------------------
# reports


PART_ORDER = tuple(c.value for c in CLASS_ORDER)


@dataclass(frozen=True)
class Report:
    stage1: list[PartMetrics]
    stage2: list[PartMetrics]
    classification_accuracy: float | None = None
    false_positives: int = 0
    seed: int | None = None
    config_hash: str | None = None
    version: str | None = None

    def to_dict(self) -> dict:
        out = {"stage1": {r.part: r.to_dict() for r in self.stage1},
               "stage2": {r.part: r.to_dict() for r in self.stage2},
               "classification_accuracy": self.classification_accuracy,
               "false_positives": self.false_positives}
        for k in ("seed", "config_hash", "version"):
            if getattr(self, k) is not None:
                out[k] = getattr(self, k)
        return out

    def to_json(self) -> str:
        # insertion order keeps the table row order; it is deterministic
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        return format_table(self.stage1, self.stage2)


def build_report(stage1: Sequence[PoseSample], stage2: Sequence[PoseSample], counts: dict | None = None,
                 **meta) -> Report:
    counts = counts or {}
    located = counts.get("located", 0)
    acc = counts["correct_class"] / located if located else None
    return Report(aggregate(stage1, PART_ORDER), aggregate(stage2, PART_ORDER), acc,
                  counts.get("false_positives", 0), **meta)


def _pct(v: float | None) -> str:
    return "-" if v is None else f"{100.0 * v:.2f}%"


def _pm(mean: float | None, std: float | None) -> str:
    return "-" if mean is None else f"{mean:.2f} ({std:.2f})"


def format_table(stage1: Sequence[PartMetrics], stage2: Sequence[PartMetrics]) -> str:
    """Aligned text table: stage-1 detection, translation, rotation; stage-2 translation, isometry, rotation."""
    header = ["Part", "S1 Detection", "S1 Translation (mm)", "S1 Rotation (deg)",
              "S2 Translation (mm)", "S2 Isometry", "S2 Rotation (deg)"]
    by_part = {r.part: r for r in stage2}
    lines = [header]
    for a in stage1:
        b = by_part.get(a.part)
        lines.append([a.part, _pct(a.detection_rate),
                      _pm(a.translation_mm_mean, a.translation_mm_std),
                      _pm(a.rotation_deg_mean, a.rotation_deg_std),
                      _pm(b.translation_mm_mean, b.translation_mm_std) if b else "-",
                      _pct(b.isometry_accuracy) if b else "-",
                      _pm(b.rotation_deg_mean, b.rotation_deg_std) if b else "-"])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    out = []
    for row in lines:
        out.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(out) + "\n"


def samples_to_records(samples: Sequence[PoseSample]) -> list[dict]:
    return [asdict(s) for s in samples]
