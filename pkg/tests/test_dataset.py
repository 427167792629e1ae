import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from assembly_pose.dataset import (
    GenConfig, PlacementError, canonical_angle, decode_orientation, encode_orientation, gen_stage1_scenes,
    gen_stage2_samples, layout_stage1, make_stage1_sample, make_stage2_sample, scene_from_dict, scene_to_dict,
    stage1_camera, stage1_label,
)
from assembly_pose.geometry import normalize_angle
from assembly_pose.parts import PartClass, builtin_catalog, catalog_by_class
from assembly_pose.sensor import SensorNoiseConfig

CATALOG = builtin_catalog()
BY_CLASS = catalog_by_class(CATALOG)
LAYOUT_ONLY = GenConfig(render_images=False)


def test_gear1_canonical_angle():
    g = BY_CLASS[PartClass.GEAR_1]
    assert canonical_angle(215.0, g) == (2, 35.0)
    for p in CATALOG:
        assert canonical_angle(0.0, p) == (0, 0.0)


@given(st.floats(-1e4, 1e4, allow_nan=False), st.sampled_from(CATALOG))
def test_canonical_angle_reconstructs_theta(theta, part):
    sub, res = canonical_angle(theta, part)
    assert 0 <= sub < part.subclass_count
    assert 0.0 <= res < part.angular_domain
    t = normalize_angle(theta)
    if part.subclass_count > 1:
        assert normalize_angle(sub * part.angular_domain + res, part.symmetry_domain) == t
    else:
        assert res == normalize_angle(t, part.angular_domain)


def test_encode_examples():
    assert encode_orientation(0.0, 4) == (0.0, 1.0)
    s, c = encode_orientation(35.0, 4)
    # oracle: sin/cos of 140 deg via the complementary angle 40 deg
    assert s == pytest.approx(math.sin(math.radians(40.0)), abs=1e-12)
    assert c == pytest.approx(-math.cos(math.radians(40.0)), abs=1e-12)
    assert (round(s, 4), round(c, 4)) == (0.6428, -0.766)


@given(st.floats(-720, 720, allow_nan=False), st.sampled_from([1, 2, 4, 12]))
def test_encode_periodic_and_unit(theta, n):
    a = encode_orientation(theta, n)
    b = encode_orientation(theta + 360.0 / n, n)
    assert a[0] ** 2 + a[1] ** 2 == pytest.approx(1.0, abs=1e-9)
    assert a == pytest.approx(b, abs=1e-12)


def test_decode_examples():
    assert decode_orientation(0.0, 1.0, 4) == 0.0
    assert decode_orientation(0.6428, -0.7660, 4) == pytest.approx(35.0, abs=1e-3)
    with pytest.raises(ValueError):
        decode_orientation(0.01, 0.02, 4)


def test_decode_round_trip_sweep():
    rng = np.random.default_rng(0)
    worst = 0.0
    for theta in rng.uniform(-720, 720, 10_000):
        for n in (1, 2, 4, 12):
            d = 360.0 / n
            back = decode_orientation(*encode_orientation(theta, n), n)
            diff = abs(back - normalize_angle(theta, d))
            worst = max(worst, min(diff, d - diff))
    assert worst < 1e-9


def test_stage1_balance_and_mean():
    cam = stage1_camera(LAYOUT_ONLY)
    counts, total = Counter(), 0
    n = 2000
    for i in range(n):
        pl = layout_stage1(i, LAYOUT_ONLY, CATALOG, cam)
        assert 1 <= len(pl) <= 5
        total += len(pl)
        counts.update(p.part.class_id for p in pl)
    assert 3.0 <= total / n <= 3.4
    mean = total / len(CATALOG)
    assert all(abs(c - mean) <= 0.1 * mean for c in counts.values())


def test_mean_parts_large_run():
    cfg = replace(LAYOUT_ONLY, master_seed=3)
    rng_counts = [len(layout_stage1(i, cfg, CATALOG, stage1_camera(cfg))) for i in range(10_000)]
    assert np.mean(rng_counts) == pytest.approx(3.2, abs=0.1)


def test_layout_non_overlapping_and_in_frame():
    cam = stage1_camera(LAYOUT_ONLY)
    for i in range(300):
        pl = layout_stage1(i, LAYOUT_ONLY, CATALOG, cam)
        for a in range(len(pl)):
            for b in range(a + 1, len(pl)):
                d = math.hypot(pl[a].pose.x - pl[b].pose.x, pl[a].pose.y - pl[b].pose.y)
                assert d >= pl[a].part.bounding_radius + pl[b].part.bounding_radius + 0.005
        for p in pl:
            lb = stage1_label(p, cam)
            # bbox centre de-projected onto the table lands near the true centre
            x, y, _ = cam.pixel_to_table(lb.bbox[:2])
            assert math.hypot(x - p.pose.x, y - p.pose.y) <= p.part.bounding_radius
            w, h = p.part.fixed_bbox_size(cam.height, cam.intrinsics)
            assert lb.bbox[2:] == (w, h)
            s, c = lb.orientation_pair
            assert s * s + c * c == pytest.approx(1.0, abs=1e-9)


def test_overcrowded_layout_reported():
    cfg = GenConfig(render_images=False, min_parts=5, max_parts=5, part_count_weights=(1.0,),
                    separation_margin=0.3, placement_attempts=20)
    with pytest.raises(PlacementError) as err:
        layout_stage1(4, cfg, CATALOG, stage1_camera(cfg))
    assert err.value.index == 4


def test_stage1_determinism_and_order_independence():
    cfg = GenConfig(scene_count=3, master_seed=11)
    noise = SensorNoiseConfig()
    a = list(gen_stage1_scenes(cfg, CATALOG, noise))
    b = list(gen_stage1_scenes(cfg, CATALOG, noise))
    for x, y in zip(a, b):
        assert np.array_equal(x.depth.data, y.depth.data)
        assert np.array_equal(x.image.data, y.image.data)
    late = make_stage1_sample(2, cfg, CATALOG, noise)
    assert np.array_equal(late.image.data, a[2].image.data)
    assert [lb.to_dict() for lb in late.labels] == [lb.to_dict() for lb in a[2].labels]


def test_labels_reproduced_from_stored_scene():
    cfg = replace(LAYOUT_ONLY, scene_count=5)
    for s in gen_stage1_scenes(cfg, CATALOG):
        scene = scene_from_dict(scene_to_dict(s.scene), CATALOG)
        assert [stage1_label(p, s.camera).to_dict() for p in scene.placements] == [lb.to_dict() for lb in s.labels]


def test_stage2_zero_perturbation_centres_part():
    cfg = GenConfig(delta_xy=0.0, delta_theta=0.0, render_images=False)
    g = BY_CLASS[PartClass.GEAR_1]
    s = make_stage2_sample(g, 1, 0, cfg)
    lb = s.labels[0]
    k = s.camera.intrinsics
    assert lb.residual_dtheta == 0.0
    assert lb.perturbed_bbox[:2] == pytest.approx((k.cx, k.cy), abs=1e-9)
    assert lb.subclass == 1
    assert canonical_angle(lb.true_planar_pose.theta, g)[0] == 1


def test_stage2_label_is_the_draw():
    g = BY_CLASS[PartClass.GEAR_1]
    s = make_stage2_sample(g, 2, 7, LAYOUT_ONLY)
    lb = s.labels[0]
    assert lb.residual_dtheta == lb.delta[2]
    assert lb.true_planar_pose.theta == pytest.approx(lb.prior_pose.theta + lb.delta[2], abs=1e-12)
    assert lb.true_planar_pose.x == pytest.approx(lb.prior_pose.x + lb.delta[0], abs=1e-15)
    assert -10.0 <= lb.residual_dtheta <= 10.0


def test_stage2_subclass_range_checked():
    with pytest.raises(ValueError):
        make_stage2_sample(BY_CLASS[PartClass.GEAR_1], 4, 0, LAYOUT_ONLY)


def test_stage2_delta_theta_uniform():
    cfg = replace(LAYOUT_ONLY, scene_count=10_000)
    draws = [s.labels[0].residual_dtheta for s in gen_stage2_samples(BY_CLASS[PartClass.SHAFT_1], 0, cfg)]
    ks = stats.kstest(draws, stats.uniform(loc=-10.0, scale=20.0).cdf).statistic
    assert ks < 0.02


def test_config_invariants():
    with pytest.raises(ValueError):
        GenConfig(stage1_height=0.0)
    with pytest.raises(ValueError):
        GenConfig(min_parts=0)
    with pytest.raises(ValueError):
        GenConfig(delta_theta=12.0)
