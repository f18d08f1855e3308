import numpy as np
import pytest

from radfp.ssim import mse, ssim3d
from radfp.volume import Volume


def test_self_similarity_is_one():
    rng = np.random.default_rng(0)
    v = Volume(rng.random((8, 9, 10)))
    assert ssim3d(v, v) == 1.0


def test_constant_self_similarity():
    v = Volume(np.full((7, 7, 7), 4.2))
    assert ssim3d(v, v) == pytest.approx(1.0)


def test_mse_examples():
    rng = np.random.default_rng(1)
    a = Volume(rng.random((5, 5, 5)))
    assert mse(a, a) == 0.0
    shifted = Volume(a.data + 0.25)
    assert mse(a, shifted) == pytest.approx(0.0625, abs=1e-12)


def test_independent_noise_near_zero():
    rng = np.random.default_rng(2)
    scores = []
    for _ in range(20):
        a = Volume(rng.standard_normal((12, 12, 12)))
        b = Volume(rng.standard_normal((12, 12, 12)))
        scores.append(ssim3d(a, b))
    assert abs(float(np.mean(scores))) < 0.1


def test_range_bounds():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = Volume(rng.random((8, 8, 8)))
        b = Volume(rng.random((8, 8, 8)))
        s = ssim3d(a, b)
        assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9


def test_degraded_copy_scores_lower():
    rng = np.random.default_rng(4)
    a = Volume(rng.random((10, 10, 10)))
    noisy = Volume(a.data + 0.3 * rng.standard_normal((10, 10, 10)))
    zeroed = a.data.copy()
    zeroed[3:7, 3:7, 3:7] = 0.0
    assert ssim3d(a, noisy) < 1.0
    assert ssim3d(a, Volume(zeroed)) < ssim3d(a, a)


def test_too_small_for_window():
    v = Volume(np.zeros((6, 7, 7)))
    with pytest.raises(ValueError, match="too small"):
        ssim3d(v, v)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        mse(Volume(np.zeros((2, 2, 2))), Volume(np.zeros((2, 2, 3))))
