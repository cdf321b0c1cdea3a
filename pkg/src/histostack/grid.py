"""Dense grids, interpolation, warping and the difference operators.

Array axis order is (z, y, x) everywhere: ``Volume.data`` has shape
``(nz, ny, nx)`` (x varies fastest in memory), and ``spacing``/``origin`` are
given in the same (z, y, x) order, in millimetres. Vector fields stack their
components as ``(3, nz, ny, nx)`` with component 0 along z.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np

from . import _interp
from .errors import DataError, DimensionMismatchError, InterpolationOnLabelsError

INTENSITY = "intensity"
LABEL = "label"


def _triple(v, name) -> tuple[float, float, float]:
    t = tuple(float(x) for x in v)
    if len(t) != 3:
        raise DataError(f"{name} must have 3 entries, got {len(t)}")
    return t


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: str = INTENSITY

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DataError(f"volume data must be 3D with positive dims, got shape {self.data.shape}")
        self.spacing = _triple(self.spacing, "spacing")
        self.origin = _triple(self.origin, "origin")
        if min(self.spacing) <= 0:
            raise DataError(f"spacing must be positive, got {self.spacing}")
        if self.kind not in (INTENSITY, LABEL):
            raise DataError(f"unknown volume kind {self.kind!r}")
        if self.kind == INTENSITY:
            if not np.issubdtype(self.data.dtype, np.floating):
                self.data = self.data.astype(np.float64)
            if not np.all(np.isfinite(self.data)):
                raise DataError("intensity samples must be finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def like(self, data, kind=None) -> "Volume":
        return Volume(data, self.spacing, self.origin, kind or self.kind)

    def index_to_physical(self, idx):
        return np.asarray(self.origin) + np.asarray(idx, dtype=float) * np.asarray(self.spacing)

    def physical_to_index(self, p):
        return (np.asarray(p, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)


@dataclass
class Section:
    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)
    mask: np.ndarray | None = None
    weight: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DataError(f"section data must be 2D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 2 or min(self.spacing) <= 0:
            raise DataError(f"section spacing must be 2 positive reals, got {self.spacing}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask).astype(bool)
            if self.mask.shape != self.data.shape:
                raise DimensionMismatchError(
                    f"mask shape {self.mask.shape} does not match section {self.data.shape}")
        self.weight = float(self.weight)
        if not self.weight >= 0:
            raise DataError(f"section weight must be nonnegative, got {self.weight}")

    @property
    def dims(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class SectionStack:
    sections: list
    z_positions: np.ndarray
    delta: float

    def __post_init__(self):
        self.sections = list(self.sections)
        self.z_positions = np.asarray(self.z_positions, dtype=np.float64).ravel()
        self.delta = float(self.delta)
        if not self.sections:
            raise DataError("a section stack needs at least one section")
        if len(self.sections) != self.z_positions.size:
            raise DimensionMismatchError(
                f"{len(self.sections)} sections but {self.z_positions.size} z positions")
        if self.delta <= 0:
            raise DataError(f"section spacing must be positive, got {self.delta}")
        d0, s0 = self.sections[0].dims, self.sections[0].spacing
        for i, s in enumerate(self.sections):
            if s.dims != d0:
                raise DimensionMismatchError(f"section {i} has dims {s.dims}, expected {d0}")
            if not np.allclose(s.spacing, s0, rtol=0, atol=1e-12):
                raise DimensionMismatchError(f"section {i} has spacing {s.spacing}, expected {s0}")
        steps = np.diff(self.z_positions)
        if np.any(steps <= 0):
            bad = int(np.nonzero(steps <= 0)[0][0]) + 1
            raise DataError(f"z positions must be strictly increasing (index {bad})")

    def __len__(self):
        return len(self.sections)

    @property
    def shape(self) -> tuple[int, int]:
        return self.sections[0].dims

    @property
    def spacing(self) -> tuple[float, float]:
        return self.sections[0].spacing

    @property
    def weights(self) -> np.ndarray:
        return np.array([s.weight for s in self.sections])

    @property
    def is_uniform(self) -> bool:
        if len(self) < 2:
            return True
        return bool(np.all(np.abs(np.diff(self.z_positions) - self.delta) <= 1e-9))

    def as_array(self) -> np.ndarray:
        return np.stack([s.data for s in self.sections])

    def masks(self) -> np.ndarray | None:
        if all(s.mask is None for s in self.sections):
            return None
        return np.stack([np.ones(s.dims, bool) if s.mask is None else s.mask for s in self.sections])

    def with_data(self, data: np.ndarray, masks=None) -> "SectionStack":
        secs = []
        for i, s in enumerate(self.sections):
            m = s.mask if masks is None else masks[i]
            secs.append(Section(data[i], s.spacing, m, s.weight))
        return SectionStack(secs, self.z_positions.copy(), self.delta)


@dataclass
class VectorField3D:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    units: str = field(default="mm")

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise DataError(f"vector field must have shape (3, nz, ny, nx), got {self.data.shape}")
        self.spacing = _triple(self.spacing, "spacing")
        if not np.all(np.isfinite(self.data)):
            raise DataError("vector field values must be finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


def _require_intensity(v: Volume):
    if v.kind != INTENSITY:
        raise InterpolationOnLabelsError("label volumes cannot be linearly interpolated")


def sample_trilinear(v: Volume, p: Sequence[float]) -> float:
    """Trilinear value of ``v`` at physical point ``p = (z, y, x)`` (mm), clamped at the border."""
    _require_intensity(v)
    idx = v.physical_to_index(p)
    pz, py, px = _interp.as_points(idx)
    return float(_interp.interp3(np.ascontiguousarray(v.data[None], dtype=np.float64), pz, py, px)[0, 0])


def identity_grid(dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Physical coordinates of every voxel, shape ``(3, nz, ny, nx)``."""
    axes = [o + s * np.arange(n) for n, s, o in zip(dims, spacing, origin)]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def warp_volume(v: Volume, disp: VectorField3D | np.ndarray) -> Volume:
    """Resample ``v`` at ``x + disp(x)``.

    ``disp`` is in mm. Intensity volumes use trilinear interpolation and label
    volumes nearest neighbour; both clamp outside the domain.
    """
    d = disp.data if isinstance(disp, VectorField3D) else np.asarray(disp, dtype=np.float64)
    if d.shape != (3,) + v.dims:
        raise DimensionMismatchError(f"displacement shape {d.shape} does not match volume {v.dims}")
    if not np.any(d):
        return v.like(v.data.copy())
    s = np.asarray(v.spacing)[:, None, None, None]
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in v.dims], indexing="ij")) + d / s
    if v.kind == LABEL:
        ii = [_interp.nearest_index(idx[a], v.dims[a]) for a in range(3)]
        return v.like(v.data[ii[0], ii[1], ii[2]])
    pz, py, px = _interp.as_points(idx)
    out = _interp.interp3(np.ascontiguousarray(v.data[None], dtype=np.float64), pz, py, px)[0]
    return v.like(out.reshape(v.dims))


def z_difference(v: Volume, delta: float, scheme: str = "centered") -> Volume:
    """Difference of a section stack along z.

    ``scheme="centered"`` evaluates ``(I[k+1] - I[k-1]) / (2*delta)`` on the
    lattice with the first and last slice forced to zero.
    ``scheme="staggered"`` evaluates ``(I[k+1] - I[k]) / delta`` at the
    mid-planes between adjacent sections (``nz - 1`` slices).
    """
    a = np.asarray(v.data, dtype=np.float64)
    nz = a.shape[0]
    if nz < 2:
        raise DataError("z difference needs at least 2 slices")
    if scheme == "centered":
        out = np.zeros_like(a)
        out[1:-1] = (a[2:] - a[:-2]) / (2.0 * delta)
        return v.like(out, INTENSITY)
    if scheme == "staggered":
        out = (a[1:] - a[:-1]) / delta
        origin = (v.origin[0] + 0.5 * v.spacing[0],) + tuple(v.origin[1:])
        return Volume(out, v.spacing, origin, INTENSITY)
    raise ValueError(f"unknown z-difference scheme {scheme!r}")


def smoothness_energy(v: Volume, delta: float, scheme: str = "centered") -> float:
    """Half the sum over sections of the in-plane L2 norm of the z difference."""
    d = z_difference(v, delta, scheme).data
    area = v.spacing[1] * v.spacing[2]
    return 0.5 * float(np.sum(d * d)) * area


def _inplane_derivative(a: np.ndarray, axis: int, h: float) -> np.ndarray:
    if a.shape[axis] < 2:
        return np.zeros_like(a)
    return np.gradient(a, h, axis=axis)


def sobolev_norm_hk(v: Volume, k: int) -> float:
    """Squared H^k norm: all mixed differences of total order <= k.

    In-plane derivatives are centred (one-sided at the border); the z
    derivative uses the centred rule with zeroed boundary slices.
    """
    if k not in (0, 1, 2):
        raise ValueError(f"unsupported Sobolev order {k}; expected 0, 1 or 2")
    _require_intensity(v)
    total = 0.0
    sz, sy, sx = v.spacing
    for hz, hy, hx in product(range(k + 1), repeat=3):
        if hz + hy + hx > k:
            continue
        a = np.asarray(v.data, dtype=np.float64)
        for _ in range(hx):
            a = _inplane_derivative(a, 2, sx)
        for _ in range(hy):
            a = _inplane_derivative(a, 1, sy)
        for _ in range(hz):
            a = z_difference(v.like(a), sz).data if a.shape[0] >= 2 else np.zeros_like(a)
        total += float(np.sum(a * a))
    return total * v.voxel_volume


def spatial_gradient(image, spacing=None) -> np.ndarray:
    """Centred-difference gradient (one-sided at the border) in intensity per mm.

    Accepts a :class:`Section`, a :class:`Volume` or a bare array; returns an
    array with one leading component per axis in (z,) y, x order.
    """
    if isinstance(image, (Section, Volume)):
        if isinstance(image, Volume):
            _require_intensity(image)
        spacing = image.spacing if spacing is None else spacing
        a = image.data
    else:
        a = np.asarray(image)
        spacing = (1.0,) * a.ndim if spacing is None else spacing
    a = np.asarray(a, dtype=np.float64)
    comps = [_inplane_derivative(a, ax, spacing[ax]) for ax in range(a.ndim)]
    return np.stack(comps)
