import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import cKDTree

from assembly_pose.assembly import (
    InsertionSpec, build_lattice, gaussian_error, grasp_pose, lattice_coverage, place_pose,
    run_assembly_campaign, simulate_insertion, uniform_disk_error, zero_error,
)
from assembly_pose.geometry import RigidTransform

SPEC = InsertionSpec(R=0.0105, r=0.010)


def brute_force_lattice(d: float, half_w: float, half_h: float) -> set:
    """Every i*a + j*b with a = (d, 0), b = (d/2, d*sqrt(3)/2) inside the rectangle."""
    pts = set()
    n = int(2 * max(half_w, half_h) / d) + 4
    for j in range(-n, n + 1):
        for i in range(-2 * n, 2 * n + 1):
            x, y = (i + j / 2.0) * d, j * d * math.sqrt(3.0) / 2.0
            if abs(x) <= half_w + 1e-12 and abs(y) <= half_h + 1e-12:
                pts.add((round(x, 12), round(y, 12)))
    return pts


def as_set(lattice) -> set:
    return {(round(x, 12), round(y, 12)) for x, y in lattice.offsets}


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-180, 180))
def test_grasp_and_place_compose(x, y, theta):
    part = RigidTransform.rot_z(theta) @ RigidTransform.from_translation(x, y, 0.02)
    offset = RigidTransform.rot_z(30.0) @ RigidTransform.from_translation(0.0, 0.01, 0.05)
    assert grasp_pose(part, RigidTransform.identity()).almost_equal(part, 1e-15)
    assert grasp_pose(RigidTransform.identity(), offset).almost_equal(offset, 1e-15)
    for f in (grasp_pose, place_pose):
        np.testing.assert_allclose(f(part, offset).matrix(), part.matrix() @ offset.matrix(), atol=1e-12)


def test_default_spacing():
    lat = build_lattice(SPEC)
    assert lat.spacing == pytest.approx(0.001, abs=1e-15)
    assert tuple(lat.offsets[0]) == (0.0, 0.0)


@pytest.mark.parametrize("margin", [0.0, None])
def test_point_count_matches_enumeration(margin):
    lat = build_lattice(SPEC, margin=margin)
    grow = SPEC.clearance if margin is None else margin
    oracle = brute_force_lattice(0.001, 0.005 + grow, 0.005 + grow)
    assert len(lat) == len(oracle)
    assert as_set(lat) == oracle


def test_strict_lattice_stays_in_area():
    lat = build_lattice(SPEC, margin=0.0)
    assert np.all(np.abs(lat.offsets) <= 0.005 + 1e-15)


@pytest.mark.parametrize("spacing", [None, math.sqrt(3) * 0.0005, 0.0007])
def test_lattice_geometry(spacing):
    lat = build_lattice(SPEC, spacing)
    d = lat.spacing
    dist, _ = cKDTree(lat.offsets).query(lat.offsets, k=2)
    np.testing.assert_allclose(dist[:, 1], d, atol=1e-12)
    r = np.hypot(lat.offsets[:, 0], lat.offsets[:, 1])
    assert np.all(np.diff(r) >= -1e-12)
    # ties ordered by polar angle from +x
    ang = np.mod(np.arctan2(lat.offsets[:, 1], lat.offsets[:, 0]), 2 * math.pi)
    same = np.isclose(r[1:], r[:-1], atol=1e-12)
    assert np.all(ang[1:][same] > ang[:-1][same])


def test_insertion_at_estimate():
    t = simulate_insertion((0.0, 0.0), SPEC, build_lattice(SPEC))
    assert (t.success, t.attempts, t.feedback_invoked) == (True, 1, False)


def test_insertion_needs_ring_one():
    lat = build_lattice(SPEC)
    # just past the clearance from the origin, close to the ring-1 point at angle 0
    t = simulate_insertion((0.0006, 0.0), SPEC, lat)
    assert t.success and t.attempts > 1 and t.feedback_invoked
    assert tuple(lat.offsets[t.attempts - 1]) == pytest.approx((0.001, 0.0), abs=1e-15)


def test_insertion_outside_search_area_fails():
    lat = build_lattice(SPEC)
    t = simulate_insertion((0.005 + 2 * SPEC.clearance + 1e-4, 0.0), SPEC, lat)
    assert not t.success
    assert t.attempts == len(lat)


@given(st.floats(-0.006, 0.006), st.floats(-0.006, 0.006), st.floats(1e-4, 8e-4), st.floats(0, 5e-4))
@settings(max_examples=60)
def test_insertion_monotone_in_clearance(dx, dy, c, extra):
    lat = build_lattice(SPEC)
    small = InsertionSpec(R=0.01 + c, r=0.01)
    large = InsertionSpec(R=0.01 + c + extra, r=0.01)
    if simulate_insertion((dx, dy), small, lat).success:
        assert simulate_insertion((dx, dy), large, lat).success


def test_covering_spacing_gives_full_coverage():
    lat = build_lattice(SPEC, math.sqrt(3.0) * SPEC.clearance)
    assert lattice_coverage(lat, SPEC.clearance, step=1e-4) == 1.0


def test_default_spacing_leaves_gaps():
    # covering radius d / sqrt(3) exceeds the clearance
    lat = build_lattice(SPEC)
    cov = lattice_coverage(lat, SPEC.clearance, step=1e-4)
    assert 0.8 < cov < 1.0
    assert cov == lattice_coverage(build_lattice(SPEC), SPEC.clearance, step=1e-4)


def test_zero_error_campaign():
    stats = run_assembly_campaign(zero_error(), SPEC, 50, 1)
    assert stats["success_rate"] == 1.0
    assert stats["feedback_rate"] == 0.0


def test_campaign_deterministic():
    a = run_assembly_campaign(gaussian_error(0.001), SPEC, 300, 9)
    b = run_assembly_campaign(gaussian_error(0.001), SPEC, 300, 9)
    assert a == b
    assert a != run_assembly_campaign(gaussian_error(0.001), SPEC, 300, 10)
    assert {"success_rate", "feedback_rate", "mean_attempts_when_invoked", "trials"} <= a.keys()


def test_first_attempt_matches_area_ratio():
    rho, n = 0.002, 5000
    stats = run_assembly_campaign(uniform_disk_error(rho), SPEC, n, 3)
    p = (SPEC.clearance / rho) ** 2
    se = math.sqrt(p * (1 - p) / n)
    assert abs(stats["first_attempt_success_rate"] - p) < 3 * se
    assert stats["feedback_rate"] == pytest.approx(1 - stats["first_attempt_success_rate"])


def test_spec_invariants():
    with pytest.raises(ValueError):
        InsertionSpec(R=0.01, r=0.01)
    with pytest.raises(ValueError):
        build_lattice(SPEC, 0.0)
    with pytest.raises(ValueError):
        run_assembly_campaign(zero_error(), SPEC, 0, 0)
