"""Compiled linear-interpolation kernels.

All coordinates are in index units along (z, y, x) / (y, x). Points outside
the grid are clamped to the boundary; the derivative along a clamped axis is
zero, which keeps value, gradient and adjoint mutually consistent.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _cell(c, n):
    if n == 1:
        return 0, 0, 0.0, 0.0
    if c <= 0.0:
        return 0, 1, 0.0, 0.0
    if c >= n - 1:
        return n - 2, n - 1, 1.0, 0.0
    i0 = int(math.floor(c))
    return i0, i0 + 1, c - i0, 1.0


@njit(cache=True, inline="always")
def _tri(v, cz, cy, cx):
    nz, ny, nx = v.shape
    z0, z1, fz, _ = _cell(cz, nz)
    y0, y1, fy, _ = _cell(cy, ny)
    x0, x1, fx, _ = _cell(cx, nx)
    gz, gy, gx = 1.0 - fz, 1.0 - fy, 1.0 - fx
    return (
        gz * (gy * (gx * v[z0, y0, x0] + fx * v[z0, y0, x1]) + fy * (gx * v[z0, y1, x0] + fx * v[z0, y1, x1]))
        + fz * (gy * (gx * v[z1, y0, x0] + fx * v[z1, y0, x1]) + fy * (gx * v[z1, y1, x0] + fx * v[z1, y1, x1]))
    )


@njit(cache=True, inline="always")
def _on_node(c, n):
    # interior grid node, where the interpolant has a kink
    return 0.0 < c < n - 1 and c == math.floor(c)


@njit(cache=True)
def interp3(vol, pz, py, px):
    nc, nz, ny, nx = vol.shape
    m = pz.shape[0]
    out = np.empty((nc, m))
    for p in range(m):
        z0, z1, fz, _ = _cell(pz[p], nz)
        y0, y1, fy, _ = _cell(py[p], ny)
        x0, x1, fx, _ = _cell(px[p], nx)
        gz, gy, gx = 1.0 - fz, 1.0 - fy, 1.0 - fx
        for c in range(nc):
            v = vol[c]
            out[c, p] = (
                gz * (gy * (gx * v[z0, y0, x0] + fx * v[z0, y0, x1])
                      + fy * (gx * v[z0, y1, x0] + fx * v[z0, y1, x1]))
                + fz * (gy * (gx * v[z1, y0, x0] + fx * v[z1, y0, x1])
                        + fy * (gx * v[z1, y1, x0] + fx * v[z1, y1, x1]))
            )
    return out


@njit(cache=True)
def interp3_grad(vol, pz, py, px):
    """Values and index-space gradient (C, 3, M) of the trilinear interpolant."""
    nc, nz, ny, nx = vol.shape
    m = pz.shape[0]
    out = np.empty((nc, m))
    grad = np.empty((nc, 3, m))
    for p in range(m):
        z0, z1, fz, iz = _cell(pz[p], nz)
        y0, y1, fy, iy = _cell(py[p], ny)
        x0, x1, fx, ix = _cell(px[p], nx)
        gz, gy, gx = 1.0 - fz, 1.0 - fy, 1.0 - fx
        for c in range(nc):
            v = vol[c]
            a000 = v[z0, y0, x0]
            a001 = v[z0, y0, x1]
            a010 = v[z0, y1, x0]
            a011 = v[z0, y1, x1]
            a100 = v[z1, y0, x0]
            a101 = v[z1, y0, x1]
            a110 = v[z1, y1, x0]
            a111 = v[z1, y1, x1]
            b00 = gx * a000 + fx * a001
            b01 = gx * a010 + fx * a011
            b10 = gx * a100 + fx * a101
            b11 = gx * a110 + fx * a111
            c0 = gy * b00 + fy * b01
            c1 = gy * b10 + fy * b11
            out[c, p] = gz * c0 + fz * c1
            grad[c, 0, p] = iz * (c1 - c0)
            grad[c, 1, p] = iy * (gz * (b01 - b00) + fz * (b11 - b10))
            dx0 = gy * (a001 - a000) + fy * (a011 - a010)
            dx1 = gy * (a101 - a100) + fy * (a111 - a110)
            grad[c, 2, p] = ix * (gz * dx0 + fz * dx1)
            # on a node use the mean of the two one-sided slopes
            if _on_node(pz[p], nz):
                grad[c, 0, p] = 0.5 * (_tri(v, pz[p] + 1.0, py[p], px[p]) - _tri(v, pz[p] - 1.0, py[p], px[p]))
            if _on_node(py[p], ny):
                grad[c, 1, p] = 0.5 * (_tri(v, pz[p], py[p] + 1.0, px[p]) - _tri(v, pz[p], py[p] - 1.0, px[p]))
            if _on_node(px[p], nx):
                grad[c, 2, p] = 0.5 * (_tri(v, pz[p], py[p], px[p] + 1.0) - _tri(v, pz[p], py[p], px[p] - 1.0))
    return out, grad


@njit(cache=True)
def splat3(w, pz, py, px, nz, ny, nx):
    """Adjoint of :func:`interp3` with respect to the grid values."""
    nc, m = w.shape
    out = np.zeros((nc, nz, ny, nx))
    for p in range(m):
        z0, z1, fz, _ = _cell(pz[p], nz)
        y0, y1, fy, _ = _cell(py[p], ny)
        x0, x1, fx, _ = _cell(px[p], nx)
        gz, gy, gx = 1.0 - fz, 1.0 - fy, 1.0 - fx
        for c in range(nc):
            a = w[c, p]
            o = out[c]
            o[z0, y0, x0] += gz * gy * gx * a
            o[z0, y0, x1] += gz * gy * fx * a
            o[z0, y1, x0] += gz * fy * gx * a
            o[z0, y1, x1] += gz * fy * fx * a
            o[z1, y0, x0] += fz * gy * gx * a
            o[z1, y0, x1] += fz * gy * fx * a
            o[z1, y1, x0] += fz * fy * gx * a
            o[z1, y1, x1] += fz * fy * fx * a
    return out


@njit(cache=True, inline="always")
def _bi(v, cy, cx):
    ny, nx = v.shape
    y0, y1, fy, _ = _cell(cy, ny)
    x0, x1, fx, _ = _cell(cx, nx)
    gy, gx = 1.0 - fy, 1.0 - fx
    return gy * (gx * v[y0, x0] + fx * v[y0, x1]) + fy * (gx * v[y1, x0] + fx * v[y1, x1])


@njit(cache=True)
def interp2(img, py, px):
    nc, ny, nx = img.shape
    m = py.shape[0]
    out = np.empty((nc, m))
    for p in range(m):
        y0, y1, fy, _ = _cell(py[p], ny)
        x0, x1, fx, _ = _cell(px[p], nx)
        gy, gx = 1.0 - fy, 1.0 - fx
        for c in range(nc):
            v = img[c]
            out[c, p] = gy * (gx * v[y0, x0] + fx * v[y0, x1]) + fy * (gx * v[y1, x0] + fx * v[y1, x1])
    return out


@njit(cache=True)
def interp2_grad(img, py, px):
    nc, ny, nx = img.shape
    m = py.shape[0]
    out = np.empty((nc, m))
    grad = np.empty((nc, 2, m))
    for p in range(m):
        y0, y1, fy, iy = _cell(py[p], ny)
        x0, x1, fx, ix = _cell(px[p], nx)
        gy, gx = 1.0 - fy, 1.0 - fx
        for c in range(nc):
            v = img[c]
            b0 = gx * v[y0, x0] + fx * v[y0, x1]
            b1 = gx * v[y1, x0] + fx * v[y1, x1]
            out[c, p] = gy * b0 + fy * b1
            grad[c, 0, p] = iy * (b1 - b0)
            grad[c, 1, p] = ix * (gy * (v[y0, x1] - v[y0, x0]) + fy * (v[y1, x1] - v[y1, x0]))
            if _on_node(py[p], ny):
                grad[c, 0, p] = 0.5 * (_bi(v, py[p] + 1.0, px[p]) - _bi(v, py[p] - 1.0, px[p]))
            if _on_node(px[p], nx):
                grad[c, 1, p] = 0.5 * (_bi(v, py[p], px[p] + 1.0) - _bi(v, py[p], px[p] - 1.0))
    return out, grad


def nearest_index(c: np.ndarray, n: int) -> np.ndarray:
    # half-way ties round up, independent of numpy's banker's rounding
    return np.clip(np.floor(c + 0.5), 0, n - 1).astype(np.intp)


def as_points(coords) -> tuple[np.ndarray, ...]:
    return tuple(np.ascontiguousarray(np.asarray(c, dtype=np.float64).ravel()) for c in coords)
