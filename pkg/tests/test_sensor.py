import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from assembly_pose.render import DepthImage
from assembly_pose.sensor import (
    NormalizedImage, PreprocessError, SensorNoiseConfig, degrade, expand_grayscale, fill_zeros,
    gaussian_blur, normalize, preprocess_capture,
)

CLEAN = SensorNoiseConfig.noiseless()


def test_clamp_endpoints():
    img = DepthImage(np.array([[0.2, 0.8], [0.1, 0.9]]))
    out = degrade(img, CLEAN, 1).data
    assert out.tolist() == [[0, 255], [0, 255]]


def test_round_half_up():
    step = (0.8 - 0.2) / 255.0
    # exact half steps are awkward in binary; probe slightly either side
    assert normalize(np.array([0.2 + 0.5 * step * (1 + 1e-9)]), 0.2, 0.8)[0] == 1
    assert normalize(np.array([0.2 + 0.5 * step * (1 - 1e-9)]), 0.2, 0.8)[0] == 0


def test_constant_image_stays_constant():
    img = DepthImage(np.full((20, 30), 0.5))
    cfg = SensorNoiseConfig(pixel_noise_sigma_range=(0.0, 0.0), blur_sigma_range=(2.0, 5.0))
    out = degrade(img, cfg, 3).data
    assert np.unique(out).size == 1


def test_seed_determinism():
    img = DepthImage(np.full((32, 32), 0.5))
    cfg = SensorNoiseConfig()
    a, b, c = degrade(img, cfg, 5), degrade(img, cfg, 5), degrade(img, cfg, 6)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_noise_sigma_drawn_from_range():
    # with blur off, the spread of the output reflects the drawn sigma
    img = DepthImage(np.full((200, 200), 0.5))
    cfg = SensorNoiseConfig(pixel_noise_sigma_range=(0.01, 0.01), blur_sigma_range=(0.0, 0.0))
    out = degrade(img, cfg, 0).data.astype(float) * CLEAN.depth_step
    assert out.std() == pytest.approx(0.01, rel=0.05)


def test_dropout_zeroes_gradients():
    d = np.full((20, 20), 0.5)
    d[:, 10:] = 0.3
    cfg = SensorNoiseConfig.noiseless(dropout_enabled=True, dropout_gradient_threshold=0.05)
    out = degrade(DepthImage(d), cfg, 0).data
    assert (out[:, 9:11] == 0).all()
    assert (out[:, :8] > 0).all()


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=50))
def test_noiseless_degrade_is_monotone(values):
    d = np.sort(np.array(values))[None, :]
    out = degrade(DepthImage(d), CLEAN, 0).data[0].astype(int)
    assert np.all(np.diff(out) >= 0)


def test_blur_kernel_is_normalized():
    d = np.zeros((61, 61))
    d[30, 30] = 1.0
    for s in (0.5, 2.0, 5.0):
        assert gaussian_blur(d, s).sum() == pytest.approx(1.0, abs=1e-6)


def test_blur_replicates_edges():
    d = np.tile(np.linspace(0.3, 0.6, 40), (40, 1))
    out = gaussian_blur(d, 3.0)
    # a linear ramp stays within its range; no dark border appears
    assert out.min() >= 0.3 - 1e-12 and out.max() <= 0.6 + 1e-12


def test_config_invariants():
    with pytest.raises(ValueError):
        SensorNoiseConfig(pixel_noise_sigma_range=(0.03, 0.005))
    with pytest.raises(ValueError):
        SensorNoiseConfig(depth_min=0.8, depth_max=0.2)


def test_expand_grayscale():
    img = NormalizedImage(np.arange(12, dtype=np.uint8).reshape(3, 4))
    rgb = expand_grayscale(img)
    assert rgb.shape == (3, 4, 3)
    for c in range(3):
        assert np.abs(rgb[:, :, c].astype(int) - img.data).max() == 0
    with pytest.raises(ValueError):
        NormalizedImage(np.array([[300]]))


def test_identical_frames_average_exactly():
    rng = np.random.default_rng(0)
    frame = rng.uniform(0.3, 0.6, (8, 8))
    assert np.array_equal(preprocess_capture([frame] * 10).data, frame)


def test_zero_in_one_frame_ignored():
    frames = [np.full((4, 4), 0.42) for _ in range(10)]
    frames[3] = frames[3].copy()
    frames[3][1, 2] = 0.0
    assert preprocess_capture(frames).data[1, 2] == 0.42


def test_all_zero_pixel_takes_neighbour_mean():
    frames = [np.full((5, 5), 0.5) for _ in range(10)]
    for f in frames:
        f[2, 2] = 0.0
    assert preprocess_capture(frames).data[2, 2] == 0.5


def test_fill_uses_nearest_ring_only():
    d = np.zeros((5, 5))
    d[2, 3] = 1.0
    d[2, 1] = 3.0
    d[0, 0] = 100.0
    out = fill_zeros(d)
    assert out[2, 2] == 2.0


def test_all_zero_stack_rejected():
    with pytest.raises(PreprocessError):
        preprocess_capture([np.zeros((3, 3))] * 10)


@given(st.permutations(range(10)), st.integers(0, 2**32 - 1))
@settings(max_examples=20)
def test_preprocess_permutation_invariant(perm, seed):
    rng = np.random.default_rng(seed)
    frames = [np.where(rng.random((6, 6)) < 0.3, 0.0, rng.uniform(0.3, 0.6, (6, 6))) for _ in range(10)]
    frames[0][0, 0] = 0.5
    a = preprocess_capture(frames).data
    b = preprocess_capture([frames[i] for i in perm]).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)
