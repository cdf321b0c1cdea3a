"""Foreground masks from a robust fit to the bright end of the histogram."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import brentq
from scipy.stats import norm

from .errors import DataError
from .grid import LABEL, Volume

MAD_TO_SIGMA = 1.482602218505602


@dataclass(frozen=True)
class MaskParams:
    """Settings for :func:`make_brain_mask`.

    ``band`` is the half-width of the inlier window in intensity units. When
    None it is set to twice the robust spread of the candidate intensities.
    """

    iterations: int = 64
    band: float | None = None
    opening_radius: int = 1
    closing_radius: int = 1
    subsample: int = 7
    n_sigma: float = 2.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.opening_radius < 0 or self.closing_radius < 0:
            raise ValueError("morphology radii must be nonnegative")
        if self.band is not None and not self.band >= 0:
            raise ValueError("band must be nonnegative")
        if self.subsample < 1:
            raise ValueError("subsample must be at least 1")


def ball(radius: int) -> np.ndarray:
    """Discrete 3D ball of the given radius in voxels."""
    r = int(radius)
    g = np.arange(-r, r + 1)
    z, y, x = np.meshgrid(g, g, g, indexing="ij")
    return z * z + y * y + x * x <= r * r


def truncated_sigma(var: float, half_width: float) -> float:
    """Standard deviation of a normal whose restriction to mean +- half_width has variance ``var``."""
    if var <= 0 or half_width <= 0:
        return 0.0

    def trunc_var(sigma):
        c = half_width / sigma
        return sigma * sigma * (1.0 - 2.0 * c * norm.pdf(c) / (2.0 * norm.cdf(c) - 1.0))

    # the truncated variance rises from 0 to half_width**2 / 3 (uniform limit)
    if var >= 0.999 * half_width ** 2 / 3.0:
        return math.sqrt(var)
    lo, hi = 1e-6 * half_width, half_width
    if trunc_var(lo) >= var:
        # far inside the window the truncation has no effect
        return math.sqrt(var)
    while trunc_var(hi) < var:
        hi *= 2.0
    return brentq(lambda s: trunc_var(s) - var, lo, hi, xtol=1e-14 * half_width)


def _window_fit(values, centre, band):
    inl = values[np.abs(values - centre) <= band]
    return inl


def estimate_background_threshold(v: Volume, p: MaskParams | None = None,
                                  rng: np.random.Generator | None = None) -> float:
    """Intensity below which voxels are treated as background.

    Seeds are medians of small random draws from the voxels at or above the
    image mean. Each seed opens a window of half-width ``band``; the seed
    whose window holds the most voxels wins (lowest draw index on ties). The
    winning window is re-centred on its mean and its spread corrected for the
    truncation, giving the foreground fit (mu, sigma). Returns
    ``mu - n_sigma * sigma``.
    """
    p = p or MaskParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    values = np.asarray(v.data, dtype=np.float64).ravel()
    if values.size == 0 or values.min() == values.max():
        raise DataError("cannot estimate a background threshold on a constant image")
    pool = values[values >= values.mean()]
    band = p.band
    if band is None:
        band = 2.0 * MAD_TO_SIGMA * float(np.median(np.abs(pool - np.median(pool))))
    sorted_vals = np.sort(values)

    best_score, best_seed = -1, None
    for _ in range(p.iterations):
        seed = float(np.median(rng.choice(pool, size=p.subsample, replace=True)))
        lo = np.searchsorted(sorted_vals, seed - band, side="left")
        hi = np.searchsorted(sorted_vals, seed + band, side="right")
        if hi - lo > best_score:
            best_score, best_seed = hi - lo, seed

    inl = _window_fit(values, best_seed, band)
    mu = float(inl.mean())
    inl = _window_fit(values, mu, band)
    if inl.size:
        mu = float(inl.mean())
    sigma = truncated_sigma(float(inl.var()) if inl.size else 0.0, band)
    return mu - p.n_sigma * sigma


def foreground(v: Volume, threshold: float) -> np.ndarray:
    """Voxels at or above ``threshold``."""
    return np.asarray(v.data) >= threshold


def _open(mask, r):
    if r == 0:
        return mask
    return ndimage.binary_opening(mask, structure=ball(r), border_value=0)


def _close(mask, r):
    if r == 0:
        return mask
    # pad so the dilation is not clipped by the array border
    padded = np.pad(mask, r)
    closed = ndimage.binary_closing(padded, structure=ball(r))
    return closed[r:-r, r:-r, r:-r] | mask


def make_brain_mask(v: Volume, p: MaskParams | None = None,
                    rng: np.random.Generator | None = None,
                    threshold: float | None = None) -> Volume:
    """Binary foreground mask: threshold, then opening, then closing."""
    p = p or MaskParams()
    if threshold is None:
        threshold = estimate_background_threshold(v, p, rng)
    m = _open(foreground(v, threshold), p.opening_radius)
    if not m.any():
        warnings.warn("foreground mask is empty after opening", RuntimeWarning, stacklevel=2)
    m = _close(m, p.closing_radius)
    return v.like(m.astype(np.uint8), kind=LABEL)
