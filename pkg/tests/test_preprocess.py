from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import binary_dilation, gaussian_filter

from histostack.errors import DataError
from histostack.grid import LABEL, Volume
from histostack.preprocess import (
    MaskParams,
    ball,
    estimate_background_threshold,
    foreground,
    make_brain_mask,
    truncated_sigma,
)
from histostack.simulate import make_curved_phantom


@pytest.fixture(scope="module")
def phantom():
    return make_curved_phantom((24, 40, 40), 60.0, 6.0)


def test_ball_shapes():
    assert ball(0).shape == (1, 1, 1) and ball(0).all()
    b = ball(1)
    assert b.sum() == 7 and b[1, 1, 1]
    assert ball(2).sum() == 33


def test_truncated_sigma_inverts_truncation():
    from scipy.stats import truncnorm

    for sigma, w in [(0.05, 0.1), (0.2, 0.1), (1.0, 3.0)]:
        var = truncnorm(-w / sigma, w / sigma, scale=sigma).var()
        assert truncated_sigma(var, w) == pytest.approx(sigma, rel=1e-8)
    assert truncated_sigma(0.0, 0.1) == 0.0


# --- threshold ------------------------------------------------------------------------------


def test_two_delta_histogram_threshold_is_foreground_level():
    data = np.zeros((8, 8, 8))
    data[4:] = 0.8
    t = estimate_background_threshold(Volume(data), MaskParams(band=0.1), np.random.default_rng(0))
    assert t == pytest.approx(0.8, abs=1e-12)


def test_normal_image_threshold_near_two_sigma_below_mean():
    ts = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        v = Volume(rng.normal(0.7, 0.05, (16, 32, 32)))
        ts.append(estimate_background_threshold(v, MaskParams(), np.random.default_rng(100 + seed)))
    assert np.all(np.abs(np.array(ts) - 0.6) <= 0.02)


def test_constant_image_rejected():
    with pytest.raises(DataError):
        estimate_background_threshold(Volume(np.full((4, 4, 4), 0.3)))


def test_threshold_deterministic_under_seed():
    rng = np.random.default_rng(3)
    v = Volume(np.concatenate([rng.normal(0.1, 0.02, 2000), rng.normal(0.7, 0.05, 2000)]).reshape(10, 20, 20))
    a = estimate_background_threshold(v, MaskParams(), np.random.default_rng(9))
    b = estimate_background_threshold(v, MaskParams(), np.random.default_rng(9))
    assert a == b
    assert 0.5 < a < 0.65


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
def test_raising_threshold_never_grows_foreground(seed, t1, t2):
    v = Volume(np.random.default_rng(seed).random((4, 5, 6)))
    lo, hi = sorted((t1, t2))
    assert not np.any(foreground(v, hi) & ~foreground(v, lo))


# --- mask ---------------------------------------------------------------------------------------


def test_zero_radii_give_phantom_support(phantom):
    m = make_brain_mask(phantom, MaskParams(opening_radius=0, closing_radius=0), np.random.default_rng(0))
    assert m.kind == LABEL
    assert np.array_equal(m.data, (phantom.data > 0).astype(np.uint8))


def _isolated_specks(support, count, rng):
    """Single voxels at least two voxels from the support and from each other."""
    blocked = binary_dilation(support, iterations=2)
    blocked[:2], blocked[-2:], blocked[:, :2], blocked[:, -2:], blocked[:, :, :2], blocked[:, :, -2:] = (True,) * 6
    out = []
    free = np.argwhere(~blocked)
    for i in rng.permutation(len(free)):
        p = tuple(free[i])
        if blocked[p]:
            continue
        out.append(p)
        lo = [max(0, c - 2) for c in p]
        blocked[lo[0]:p[0] + 3, lo[1]:p[1] + 3, lo[2]:p[2] + 3] = True
        if len(out) == count:
            break
    return out


def test_opening_removes_isolated_specks(phantom):
    support = phantom.data > 0
    rng = np.random.default_rng(1)
    background = np.argwhere(~support)
    specks = _isolated_specks(support, int(0.01 * len(background)), rng)
    assert len(specks) > 50
    data = phantom.data.copy()
    for p in specks:
        data[p] = 1.0
    m = make_brain_mask(Volume(data), MaskParams(opening_radius=1, closing_radius=1), np.random.default_rng(0))
    assert sum(int(m.data[p]) for p in specks) == 0
    assert m.data.sum() > 0.9 * support.sum()


def test_closing_fills_single_voxel_holes(phantom):
    support = phantom.data > 0
    interior = np.argwhere(np.pad(support, 0) & ~binary_dilation(~support, iterations=3))
    holes = [tuple(p) for p in interior[::97]]
    assert len(holes) >= 5
    data = phantom.data.copy()
    for p in holes:
        data[p] = 0.0
    m = make_brain_mask(Volume(data), MaskParams(opening_radius=0, closing_radius=1), np.random.default_rng(0))
    assert all(m.data[p] == 1 for p in holes)


def test_mask_is_idempotent(phantom):
    p = MaskParams()
    m1 = make_brain_mask(phantom, p, np.random.default_rng(0))
    m2 = make_brain_mask(Volume(m1.data.astype(np.float64)), p, np.random.default_rng(0))
    assert np.array_equal(m1.data, m2.data)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_mask_idempotent_on_random_blobs(seed):
    rng = np.random.default_rng(seed)
    blob = gaussian_filter(rng.standard_normal((12, 16, 16)), 2.0)
    v = Volume((blob > 0).astype(np.float64))
    if v.data.min() == v.data.max():
        return
    p = MaskParams()
    m1 = make_brain_mask(v, p, np.random.default_rng(0))
    if m1.data.min() == m1.data.max():
        return
    m2 = make_brain_mask(Volume(m1.data.astype(np.float64)), p, np.random.default_rng(0))
    assert np.array_equal(m1.data, m2.data)


def test_empty_after_opening_warns():
    data = np.zeros((8, 8, 8))
    data[4, 4, 4] = 1.0
    with pytest.warns(RuntimeWarning, match="empty"):
        m = make_brain_mask(Volume(data), MaskParams(), np.random.default_rng(0))
    assert m.data.sum() == 0


def test_params_validated():
    with pytest.raises(ValueError):
        MaskParams(iterations=0)
    with pytest.raises(ValueError):
        MaskParams(opening_radius=-1)
