"""Velocity-field metric, smoothing kernel, flows and geodesic shooting.

The metric operator is ``A = L**(2*power)`` with ``L = 1 - a**2 * Laplacian``
(``power=2`` gives ``(-Laplacian + 1)**4``). ``K = A**-1`` is applied in the
Fourier domain using the symbol of the 7-point discrete Laplacian, so that
``A`` and ``K`` are exact inverses on the grid (periodic boundary).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from . import _interp
from .errors import DataError, InstabilityError
from .grid import VectorField3D

FOURIER = "fourier-operator"
SPATIAL = "spatial-greens"

FFT_WORKERS = 1


@dataclass(frozen=True)
class KernelSpec:
    mode: str = FOURIER
    length_scale: float | None = None
    power: int = 2

    def __post_init__(self):
        if self.mode not in (FOURIER, SPATIAL):
            raise ValueError(f"unknown kernel mode {self.mode!r}")
        if self.length_scale is not None and not self.length_scale > 0:
            raise ValueError("length scale must be positive")
        if int(self.power) < 1:
            raise ValueError("kernel power must be >= 1")

    def scale(self, spacing) -> float:
        """Length scale in mm; defaults to ten in-plane voxels."""
        if self.length_scale is not None:
            return float(self.length_scale)
        return 10.0 * float(spacing[-1])


# ---------------------------------------------------------------------------
# closed-form kernels


def greens_kernel_eval(r: float) -> float:
    """Closed-form radial kernel ``4 (3 + 3r + 3r^2) exp(-r)``, r in length-scale units.

    Kept for point evaluation only. This profile peaks at r = 1 and is not a
    positive-definite kernel; see :func:`matern_kernel_eval`.
    """
    r = float(r)
    if r < 0:
        raise ValueError("kernel radius must be nonnegative")
    return 4.0 * (3.0 + 3.0 * r + 3.0 * r * r) * math.exp(-r)


def matern_kernel_eval(r):
    """Green's function profile of ``(1 - Laplacian)**4`` in 3D, scaled to 12 at r = 0.

    Proportional to ``(3 + 3r + r^2) exp(-r)`` (Matern, smoothness 5/2); the
    unscaled Green's function is this divided by ``4 * 192 * pi``.
    """
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("kernel radius must be nonnegative")
    out = 4.0 * (3.0 + 3.0 * r + r * r) * np.exp(-r)
    return float(out) if out.ndim == 0 else out


def _matern_dprofile(r):
    # d/dr of matern_kernel_eval
    return -4.0 * r * (1.0 + r) * np.exp(-r)


# ---------------------------------------------------------------------------
# Fourier operator


@lru_cache(maxsize=16)
def _symbol(shape: tuple, spacing: tuple, a: float, power: int) -> np.ndarray:
    lap = None
    for axis, (n, s) in enumerate(zip(shape, spacing)):
        k = np.arange(n // 2 + 1) if axis == len(shape) - 1 else np.arange(n)
        term = 2.0 * (1.0 - np.cos(2.0 * np.pi * k / n)) / (s * s)
        sh = [1] * len(shape)
        sh[axis] = k.size
        term = term.reshape(sh)
        lap = term if lap is None else lap + term
    sym = (1.0 + a * a * lap) ** (2 * power)
    sym.flags.writeable = False
    return sym


def symbol(shape, spacing, spec: KernelSpec) -> np.ndarray:
    """Symbol of ``A`` on the real-FFT half grid."""
    shape = tuple(int(n) for n in shape)
    spacing = tuple(float(s) for s in spacing)
    return _symbol(shape, spacing, spec.scale(spacing), int(spec.power))


def _rfft(a):
    return sfft.rfftn(a, axes=(-3, -2, -1), workers=FFT_WORKERS)


def _irfft(a, shape):
    return sfft.irfftn(a, s=shape, axes=(-3, -2, -1), workers=FFT_WORKERS)


def apply_K(arr: np.ndarray, spacing, spec: KernelSpec) -> np.ndarray:
    """Apply ``K`` to the trailing three axes of ``arr``."""
    shape = arr.shape[-3:]
    return _irfft(_rfft(arr) / symbol(shape, spacing, spec), shape)


def apply_A(arr: np.ndarray, spacing, spec: KernelSpec) -> np.ndarray:
    shape = arr.shape[-3:]
    return _irfft(_rfft(arr) * symbol(shape, spacing, spec), shape)


def _half_weights(nx: int) -> np.ndarray:
    w = np.full(nx // 2 + 1, 2.0)
    w[0] = 1.0
    if nx % 2 == 0:
        w[-1] = 1.0
    return w


def norm_sq_array(arr: np.ndarray, spacing, spec: KernelSpec) -> float:
    """``<A v, v>`` for a (3, nz, ny, nx) array by Parseval."""
    shape = arr.shape[-3:]
    f = _rfft(arr)
    sym = symbol(shape, spacing, spec)
    w = _half_weights(shape[-1])
    power = (f.real ** 2 + f.imag ** 2) * (sym * w)
    n = shape[0] * shape[1] * shape[2]
    return float(np.sum(power)) * float(np.prod(spacing)) / n


def smooth_field(f: VectorField3D, spec: KernelSpec) -> VectorField3D:
    """Apply ``K = A^-1`` componentwise."""
    if spec.mode != FOURIER:
        raise ValueError("dense smoothing requires the fourier-operator kernel mode")
    if min(f.dims) < 1:
        raise DataError("field dims must be positive")
    return VectorField3D(apply_K(f.data, f.spacing, spec), f.spacing)


def v_norm_sq(v: VectorField3D, spec: KernelSpec) -> float:
    return norm_sq_array(v.data, v.spacing, spec)


# ---------------------------------------------------------------------------
# flows


@dataclass
class VelocityPath:
    fields: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    trajectory: np.ndarray | None = None

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float64)
        if self.fields.ndim != 5 or self.fields.shape[1] != 3 or self.fields.shape[0] < 1:
            raise DataError(f"velocity path must have shape (T, 3, nz, ny, nx), got {self.fields.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @classmethod
    def zeros(cls, T: int, dims, spacing=(1.0, 1.0, 1.0)) -> "VelocityPath":
        return cls(np.zeros((int(T), 3) + tuple(dims)), spacing)

    @property
    def T(self) -> int:
        return self.fields.shape[0]

    @property
    def dt(self) -> float:
        return 1.0 / self.T

    @property
    def dims(self):
        return self.fields.shape[2:]

    def energy(self, spec: KernelSpec) -> float:
        """Rectangle-rule action ``sum_t dt * ||v_t||_V^2``."""
        return self.dt * sum(norm_sq_array(v, self.spacing, spec) for v in self.fields)


@dataclass
class Diffeomorphism:
    forward_disp: np.ndarray
    inverse_disp: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    energy: float = 0.0
    norms: np.ndarray | None = None

    @classmethod
    def identity(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "Diffeomorphism":
        z = np.zeros((3,) + tuple(dims))
        return cls(z, z.copy(), tuple(spacing))

    @property
    def dims(self):
        return self.inverse_disp.shape[1:]


def _index_grid(dims) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))


def _sp(spacing):
    return np.asarray(spacing, dtype=np.float64)[:, None, None, None]


def inverse_steps(fields: np.ndarray, spacing) -> list[np.ndarray]:
    """Inverse displacements ``u_0 .. u_T`` (mm) of the semi-Lagrangian recursion.

    ``phi_{t+1}^-1(x) = phi_t^-1(x - dt v_t(x))``; also used by the matching
    gradient, which needs every intermediate step.
    """
    T = fields.shape[0]
    dt = 1.0 / T
    dims = fields.shape[2:]
    grid = _index_grid(dims)
    sp = _sp(spacing)
    us = [np.zeros((3,) + dims)]
    for t in range(T):
        q = grid - dt * fields[t] / sp
        pz, py, px = _interp.as_points(q)
        u = _interp.interp3(us[-1], pz, py, px).reshape((3,) + dims)
        us.append(u - dt * fields[t])
    return us


def forward_disp(fields: np.ndarray, spacing) -> np.ndarray:
    """Forward displacement by ``phi_{t+1}(x) = phi_t(x) + dt v_t(phi_t(x))``."""
    T = fields.shape[0]
    dt = 1.0 / T
    dims = fields.shape[2:]
    grid = _index_grid(dims)
    sp = _sp(spacing)
    u = np.zeros((3,) + dims)
    for t in range(T):
        pz, py, px = _interp.as_points(grid + u / sp)
        u = u + dt * _interp.interp3(np.ascontiguousarray(fields[t]), pz, py, px).reshape((3,) + dims)
    return u


def integrate_flow(path: VelocityPath, direction: str = "both", spec: KernelSpec | None = None) -> Diffeomorphism:
    """Integrate ``d/dt phi_t = v_t o phi_t`` from the identity over unit time.

    ``direction`` selects which displacement grids are computed (``"forward"``,
    ``"inverse"`` or ``"both"``); a skipped one is returned as zeros. With a
    kernel ``spec`` the path energy is recorded as well.
    """
    if direction not in ("forward", "inverse", "both"):
        raise ValueError(f"unknown flow direction {direction!r}")
    dims = path.dims
    fwd = forward_disp(path.fields, path.spacing) if direction in ("forward", "both") else np.zeros((3,) + dims)
    inv = inverse_steps(path.fields, path.spacing)[-1] if direction in ("inverse", "both") else np.zeros((3,) + dims)
    energy = 0.0
    norms = None
    if spec is not None:
        norms = np.array([norm_sq_array(v, path.spacing, spec) for v in path.fields])
        energy = float(path.dt * norms.sum())
    return Diffeomorphism(fwd, inv, path.spacing, energy, norms)


def compose_residual(d: Diffeomorphism) -> np.ndarray:
    """Displacement of ``phi(phi^-1(x)) - x`` in mm."""
    grid = _index_grid(d.dims)
    sp = _sp(d.spacing)
    pz, py, px = _interp.as_points(grid + d.inverse_disp / sp)
    fwd_at = _interp.interp3(np.ascontiguousarray(d.forward_disp), pz, py, px).reshape(d.inverse_disp.shape)
    return d.inverse_disp + fwd_at


# ---------------------------------------------------------------------------
# geodesic shooting


@dataclass
class MomentumField:
    """Initial momentum: a dense (3, nz, ny, nx) density or sparse particles.

    Sparse particles carry ``positions`` and ``momenta`` of shape (P, 3) in
    physical (z, y, x) mm; ``dims``/``spacing`` give the grid the resulting
    velocity path is sampled on.
    """

    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    dense: np.ndarray | None = None
    positions: np.ndarray | None = None
    momenta: np.ndarray | None = None

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.dense is not None:
            self.dense = np.asarray(self.dense, dtype=np.float64)
            if self.dense.shape != (3,) + self.dims:
                raise DataError("dense momentum shape does not match dims")
            if not np.all(np.isfinite(self.dense)):
                raise DataError("momentum must be finite")
        else:
            self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
            self.momenta = np.atleast_2d(np.asarray(self.momenta, dtype=np.float64))
            if self.positions.shape != self.momenta.shape or self.positions.shape[1] != 3:
                raise DataError("particle positions and momenta must both be (P, 3)")
            ext = (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
            if np.any(self.positions < 0) or np.any(self.positions > ext):
                raise DataError("particle positions must lie inside the domain")

    @property
    def is_sparse(self) -> bool:
        return self.dense is None


def _particle_velocity(points, pos, mom, a):
    """Kernel-weighted velocity at ``points`` (M, 3) from particles."""
    d = points[:, None, :] - pos[None, :, :]
    r = np.sqrt(np.sum(d * d, axis=-1)) / a
    return matern_kernel_eval(r) @ mom


def _shoot_particles(p0: MomentumField, spec: KernelSpec, T: int):
    a = spec.scale(p0.spacing)
    dt = 1.0 / T
    x = p0.positions.copy()
    p = p0.momenta.copy()
    grid = _index_grid(p0.dims).reshape(3, -1).T * np.asarray(p0.spacing)
    fields = np.empty((T, 3) + p0.dims)
    norms = np.empty(T)
    traj = [x.copy()]
    size = float(np.max((np.asarray(p0.dims) - 1) * np.asarray(p0.spacing)))
    for t in range(T):
        d = x[:, None, :] - x[None, :, :]
        dist = np.sqrt(np.sum(d * d, axis=-1))
        r = dist / a
        kmat = matern_kernel_eval(r)
        pp = p @ p.T
        norms[t] = float(np.sum(pp * kmat))
        xdot = kmat @ p
        # dH/dx_i = sum_j (p_i . p_j) k'(r_ij) (x_i - x_j) / (a * dist_ij)
        with np.errstate(invalid="ignore", divide="ignore"):
            coef = np.where(dist > 0, _matern_dprofile(r) / (a * dist), 0.0) * pp
        pdot = -np.sum(coef[:, :, None] * d, axis=1)
        fields[t] = _particle_velocity(grid, x, p, a).T.reshape((3,) + p0.dims)
        if not np.all(np.isfinite(xdot)) or np.max(np.abs(xdot)) > size:
            raise InstabilityError(f"particle velocity exceeded the domain size at step {t}")
        x = x + dt * xdot
        p = p + dt * pdot
        traj.append(x.copy())
    return fields, norms, np.stack(traj)


def _shoot_dense(p0: MomentumField, spec: KernelSpec, T: int):
    dims, spacing = p0.dims, p0.spacing
    dt = 1.0 / T
    sp = np.asarray(spacing)
    grid = _index_grid(dims).reshape(3, -1)
    pos = grid.copy()  # Lagrangian positions in index units
    p = p0.dense.reshape(3, -1).copy()
    fields = np.empty((T, 3) + dims)
    norms = np.empty(T)
    size = float(np.max((np.asarray(dims) - 1) * sp))
    dV = float(np.prod(sp))
    for t in range(T):
        m = _interp.splat3(p, pos[0].copy(), pos[1].copy(), pos[2].copy(), *dims)
        v = apply_K(m, spacing, spec)
        norms[t] = float(np.sum(m * v)) * dV
        fields[t] = v
        if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > size:
            raise InstabilityError(f"velocity exceeded the domain size at step {t}")
        vals, g = _interp.interp3_grad(np.ascontiguousarray(v), pos[0].copy(), pos[1].copy(), pos[2].copy())
        g = g / sp[None, :, None]  # dv^c / dx_d in 1/unit-time
        pdot = -np.einsum("cdm,cm->dm", g, p)
        pos = pos + dt * vals / sp[:, None]
        p = p + dt * pdot
    return fields, norms


def shoot_geodesic(p0: MomentumField, spec: KernelSpec, T: int = 10):
    """Integrate the geodesic (position, momentum, velocity) system by explicit Euler.

    Dense momentum uses the Fourier kernel with particle-in-cell transport;
    sparse particles use the closed-form Green's function. Returns the sampled
    velocity path and the flow it generates; ``diffeo.norms`` holds
    ``||v_t||_V^2`` per step and, for particles, ``path.trajectory`` holds
    the particle positions.
    """
    T = int(T)
    if T < 1:
        raise ValueError("T must be >= 1")
    if p0.is_sparse:
        fields, norms, traj = _shoot_particles(p0, spec, T)
    else:
        if spec.mode != FOURIER:
            raise ValueError("dense momentum requires the fourier-operator kernel")
        fields, norms = _shoot_dense(p0, spec, T)
        traj = None
    path = VelocityPath(fields, p0.spacing, trajectory=traj)
    diffeo = integrate_flow(path)
    diffeo.norms = norms
    diffeo.energy = float(norms.sum() / T)
    return path, diffeo


def metric_distance_sq(I, Iprime, cfg=None) -> float:
    """Upper estimate of the squared metric distance: the converged path action.

    ``cfg`` is a :class:`~histostack.lddmm.MatchConfig` (its channels are
    replaced); ``Iprime`` is matched slice by slice on its own z lattice.
    """
    from .lddmm import MatchConfig, lddmm_match, volume_as_stack

    if cfg is None:
        cfg = MatchConfig()
    cfg = cfg.with_channels([(I, volume_as_stack(Iprime), 1.0)])
    res = lddmm_match(cfg)
    return res.path.energy(cfg.kernel)
