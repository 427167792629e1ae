"""Grasp/place pose composition and the force-feedback insertion search."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import RigidTransform, compose

DEFAULT_SEARCH_AREA = (0.010, 0.010)
# Distance comparisons on the lattice are exact up to float rounding only.
CONTACT_TOL = 1e-12


@dataclass(frozen=True)
class InsertionSpec:
    """A peg of radius ``r`` going into a hole of radius ``R``."""

    R: float
    r: float
    search_area: tuple[float, float] = DEFAULT_SEARCH_AREA

    def __post_init__(self):
        if not (self.R > self.r > 0):
            raise ValueError(f"need R > r > 0, got R={self.R}, r={self.r}")
        if not (self.search_area[0] > 0 and self.search_area[1] > 0):
            raise ValueError("search area must be positive")

    @property
    def clearance(self) -> float:
        return self.R - self.r


@dataclass(frozen=True, eq=False)
class SearchLattice:
    offsets: np.ndarray  # (N, 2) meters, visiting order
    spacing: float
    area: tuple[float, float]

    def __len__(self):
        return len(self.offsets)

    def to_csv(self, unit: float = 1e-3) -> str:
        """One headerless ``dx,dy`` row per offset in visiting order, in ``unit`` (mm by default)."""
        return "".join(f"{_fmt(dx)},{_fmt(dy)}\n" for dx, dy in self.offsets / unit)


def _fmt(x: float) -> str:
    x = round(float(x), 9)
    if x == 0:
        x = 0.0
    s = f"{x:.9f}".rstrip("0").rstrip(".")
    return s if s not in ("", "-0") else "0"


@dataclass(frozen=True)
class AssemblyTrial:
    true_offset: tuple[float, float]
    attempts: int
    success: bool

    @property
    def feedback_invoked(self) -> bool:
        return self.attempts > 1


def grasp_pose(part_world: RigidTransform, grasp_in_part: RigidTransform) -> RigidTransform:
    """End-effector pose in the world for picking the part."""
    return compose(part_world, grasp_in_part)


def place_pose(plate_world: RigidTransform, target_in_plate: RigidTransform) -> RigidTransform:
    """World pose the part must reach, given the base plate's pose."""
    return compose(plate_world, target_in_plate)


def place_effector_pose(plate_world: RigidTransform, target_in_plate: RigidTransform,
                        grasp_in_part: RigidTransform) -> RigidTransform:
    return compose(place_pose(plate_world, target_in_plate), grasp_in_part)


def build_lattice(spec: InsertionSpec, spacing_override: float | None = None,
                  margin: float | None = None) -> SearchLattice:
    """Triangular lattice of descend offsets, nearest-first.

    Default spacing is ``2 (R - r)``. Points are kept when they lie inside the
    search area grown by ``margin`` on every side (default ``R - r``): a point
    farther out than the clearance cannot succeed for any hole inside the area.
    Ordering is by distance from the origin, ties by polar angle from +x.
    """
    d = 2.0 * spec.clearance if spacing_override is None else float(spacing_override)
    if not d > 0:
        raise ValueError("lattice spacing must be positive")
    if margin is None:
        margin = spec.clearance
    half_w = spec.search_area[0] / 2.0 + margin
    half_h = spec.search_area[1] / 2.0 + margin
    row_h = d * math.sqrt(3.0) / 2.0
    jmax = int(math.floor(half_h / row_h + 1e-9))
    pts = []
    for j in range(-jmax, jmax + 1):
        y = j * row_h
        shift = (j % 2) * d / 2.0
        imin = int(math.ceil((-half_w - shift) / d - 1e-9))
        imax = int(math.floor((half_w - shift) / d + 1e-9))
        for i in range(imin, imax + 1):
            x = i * d + shift
            if abs(x) <= half_w + 1e-15 and abs(y) <= half_h + 1e-15:
                pts.append((x, y))
    pts = np.array(pts, dtype=float).reshape(-1, 2)
    dist = np.round(np.hypot(pts[:, 0], pts[:, 1]), 12)
    ang = np.round(np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2.0 * math.pi), 12)
    order = np.lexsort((ang, dist))
    return SearchLattice(pts[order], d, (spec.search_area[0], spec.search_area[1]))


def _first_success(true_offset, clearance: float, lattice: SearchLattice) -> int:
    """Index of the first lattice point within the clearance, or -1."""
    delta = lattice.offsets - np.asarray(true_offset, dtype=float)
    ok = np.hypot(delta[:, 0], delta[:, 1]) <= clearance + CONTACT_TOL
    hits = np.flatnonzero(ok)
    return int(hits[0]) if len(hits) else -1


def simulate_insertion(true_offset, spec: InsertionSpec, lattice: SearchLattice) -> AssemblyTrial:
    """Visit lattice offsets in order until the peg drops into the hole.

    The contact sensor is ideal: any attempt farther than ``R - r`` from the
    hole centre is sensed as a collision. Exhausting the lattice is a failure.
    """
    idx = _first_success(true_offset, spec.clearance, lattice)
    off = (float(true_offset[0]), float(true_offset[1]))
    if idx < 0:
        return AssemblyTrial(off, len(lattice), False)
    return AssemblyTrial(off, idx + 1, True)


ErrorModel = Callable[[np.random.Generator], tuple[float, float]]


def zero_error() -> ErrorModel:
    return lambda rng: (0.0, 0.0)


def uniform_disk_error(radius: float) -> ErrorModel:
    def sample(rng):
        rho = radius * math.sqrt(rng.random())
        phi = 2.0 * math.pi * rng.random()
        return rho * math.cos(phi), rho * math.sin(phi)
    return sample


def gaussian_error(sigma: float) -> ErrorModel:
    def sample(rng):
        dx, dy = rng.normal(0.0, sigma, size=2)
        return float(dx), float(dy)
    return sample


def empirical_error(offsets) -> ErrorModel:
    """Resample measured planar position errors (e.g. from a pose evaluation)."""
    pts = np.asarray(offsets, dtype=float).reshape(-1, 2)
    if not len(pts):
        raise ValueError("empirical error model needs at least one sample")

    def sample(rng):
        dx, dy = pts[rng.integers(len(pts))]
        return float(dx), float(dy)
    return sample


def trial_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0xA55E, int(index)]))


def run_assembly_campaign(error_model: ErrorModel, spec: InsertionSpec, n_trials: int, seed: int,
                          lattice: SearchLattice | None = None) -> dict:
    """Monte-Carlo insertion trials; every trial has its own derived seed."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if lattice is None:
        lattice = build_lattice(spec)
    attempts = np.empty(n_trials, dtype=np.int64)
    success = np.empty(n_trials, dtype=bool)
    for i in range(n_trials):
        offset = error_model(trial_rng(seed, i))
        t = simulate_insertion(offset, spec, lattice)
        attempts[i] = t.attempts
        success[i] = t.success
    invoked = attempts > 1
    return {
        "trials": int(n_trials),
        "success_rate": float(success.mean()),
        "first_attempt_success_rate": float(np.mean(success & ~invoked)),
        "feedback_rate": float(invoked.mean()),
        "mean_attempts_when_invoked": float(attempts[invoked].mean()) if invoked.any() else 0.0,
        "lattice_points": int(len(lattice)),
        "spacing_mm": float(lattice.spacing * 1e3),
        "clearance_mm": float(spec.clearance * 1e3),
    }


def lattice_coverage(lattice: SearchLattice, clearance: float, step: float = 1e-5) -> float:
    """Fraction of a ``step`` grid over the search area that some lattice point covers."""
    hw, hh = lattice.area[0] / 2.0, lattice.area[1] / 2.0
    xs = np.linspace(-hw, hw, int(round(2 * hw / step)) + 1)
    ys = np.linspace(-hh, hh, int(round(2 * hh / step)) + 1)
    covered = 0
    pts = lattice.offsets
    for y in ys:
        dy2 = (y - pts[:, 1]) ** 2
        d2 = (xs[:, None] - pts[None, :, 0]) ** 2 + dy2[None, :]
        covered += int(np.count_nonzero(d2.min(axis=1) <= (clearance + CONTACT_TOL) ** 2))
    return covered / (len(xs) * len(ys))
