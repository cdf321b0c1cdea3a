"""Dense LDDMM of a 3D template onto a stack of 2D sections.

The data term lives only on the section planes; the velocity path is
optimised by steepest descent in the V metric with a backtracking step.
Gradients are the exact derivative of the discretised energy (adjoint of the
semi-Lagrangian flow and of trilinear sampling), smoothed by ``K``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _interp
from .errors import FrameMismatchError, NonDiffeomorphicError, SolverStall, DataError
from .grid import INTENSITY, LABEL, Section, SectionStack, Volume, warp_volume
from .kernel import (
    Diffeomorphism,
    KernelSpec,
    VelocityPath,
    apply_K,
    integrate_flow,
    inverse_steps,
    norm_sq_array,
)

log = logging.getLogger(__name__)


@dataclass
class MatchConfig:
    kernel: KernelSpec = field(default_factory=KernelSpec)
    T: int = 10
    alpha: float | np.ndarray = 1.0
    step: float = 0.5
    max_iters: int = 100
    rel_tol: float = 1e-4
    channels: list = field(default_factory=list)
    cost_mask: Volume | None = None
    min_step: float = 1e-6
    max_step: float = 1.0

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step size must be positive")
        if np.any(np.asarray(self.alpha) < 0):
            raise ValueError("alpha must be nonnegative")
        for ch in self.channels:
            if ch[2] < 0:
                raise ValueError("channel weights must be nonnegative")

    def with_channels(self, channels) -> "MatchConfig":
        return dataclasses.replace(self, channels=list(channels))


@dataclass(frozen=True)
class MatchResult:
    path: VelocityPath
    diffeo: Diffeomorphism
    trace: tuple
    status: str = "converged"

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1

    @property
    def energy(self) -> float:
        return self.trace[-1][1] + self.trace[-1][2]

    @property
    def data_term(self) -> float:
        return self.trace[-1][2]


def volume_as_stack(v: Volume) -> SectionStack:
    """Every z slice of ``v`` as a section."""
    sz, sy, sx = v.spacing
    secs = [Section(np.asarray(v.data[k], dtype=np.float64), (sy, sx)) for k in range(v.dims[0])]
    z = v.origin[0] + sz * np.arange(v.dims[0])
    return SectionStack(secs, z, sz)


class _Planes:
    """Geometry of the section planes inside the template grid."""

    def __init__(self, template: Volume, stack: SectionStack):
        nz, ny, nx = template.dims
        sz, sy, sx = template.spacing
        if stack.shape != (ny, nx):
            raise FrameMismatchError(
                f"section dims {stack.shape} differ from template in-plane dims {(ny, nx)}")
        if not np.allclose(stack.spacing, (sy, sx), rtol=1e-9, atol=0):
            raise FrameMismatchError(
                f"section spacing {stack.spacing} differs from template in-plane spacing {(sy, sx)}")
        zeta = (stack.z_positions - template.origin[0]) / sz
        if np.any(zeta < -1e-9) or np.any(zeta > nz - 1 + 1e-9):
            raise FrameMismatchError(
                f"section z range [{stack.z_positions[0]}, {stack.z_positions[-1]}] mm lies outside "
                f"the template z extent [{template.origin[0]}, {template.origin[0] + (nz - 1) * sz}] mm")
        zeta = np.clip(zeta, 0.0, nz - 1)
        k0 = np.minimum(np.floor(zeta).astype(int), max(nz - 2, 0))
        self.k0 = k0
        self.k1 = np.minimum(k0 + 1, nz - 1)
        self.w = zeta - k0
        if nz == 1:
            self.w = np.zeros_like(zeta)
        self.zeta = zeta
        self.n = len(stack)
        self.shape = (ny, nx)
        self.spacing = np.asarray(template.spacing)
        jj, ii = np.meshgrid(np.arange(ny, dtype=float), np.arange(nx, dtype=float), indexing="ij")
        self.base = np.stack([np.broadcast_to(zeta[:, None, None], (self.n, ny, nx)),
                              np.broadcast_to(jj, (self.n, ny, nx)),
                              np.broadcast_to(ii, (self.n, ny, nx))])

    def gather(self, u: np.ndarray) -> np.ndarray:
        """Displacement on the planes, shape (3, n, ny, nx)."""
        w = self.w[None, :, None, None]
        return (1.0 - w) * u[:, self.k0] + w * u[:, self.k1]

    def scatter(self, g: np.ndarray, dims) -> np.ndarray:
        out = np.zeros((3,) + tuple(dims))
        w = self.w[None, :, None, None]
        np.add.at(out, (slice(None), self.k0), (1.0 - w) * g)
        np.add.at(out, (slice(None), self.k1), w * g)
        return out

    def points(self, U: np.ndarray):
        p = self.base + U / self.spacing[:, None, None, None]
        return _interp.as_points(p)


class MatchProblem:
    """Precomputed data term for a fixed set of channel targets."""

    def __init__(self, cfg: MatchConfig, targets=None):
        if not cfg.channels:
            raise ValueError("matching needs at least one channel")
        t0, s0, _ = cfg.channels[0]
        for tmpl, stack, _ in cfg.channels:
            if tmpl.kind != INTENSITY:
                raise DataError("channel templates must be intensity volumes")
            if tmpl.dims != t0.dims or not np.allclose(tmpl.spacing, t0.spacing) or not np.allclose(tmpl.origin, t0.origin):
                raise FrameMismatchError("all channel templates must share one grid")
            if len(stack) != len(s0) or not np.allclose(stack.z_positions, s0.z_positions):
                raise FrameMismatchError("all channel stacks must share section positions")
        self.cfg = cfg
        self.dims = t0.dims
        self.spacing = t0.spacing
        self.dV = float(np.prod(t0.spacing))
        self.planes = _Planes(t0, s0)
        self.templates = np.ascontiguousarray(np.stack([c[0].data for c in cfg.channels]), dtype=np.float64)
        n = len(s0)
        alpha = np.broadcast_to(np.asarray(cfg.alpha, dtype=np.float64), (n,))
        area = s0.spacing[0] * s0.spacing[1]
        weights = []
        for tmpl, stack, cw in cfg.channels:
            w = np.ones((n,) + stack.shape)
            w *= (alpha * stack.weights)[:, None, None] * cw * area
            masks = stack.masks()
            if masks is not None:
                w *= masks
            if cfg.cost_mask is not None:
                cm = np.asarray(cfg.cost_mask.data)
                if cm.shape != w.shape:
                    raise FrameMismatchError(f"cost mask dims {cm.shape} do not match stack {w.shape}")
                w *= cm != 0
            weights.append(w)
        self.weights = np.stack(weights)
        if targets is None:
            targets = np.stack([c[1].as_array() for c in cfg.channels])
        self.set_targets(targets)

    def set_targets(self, targets):
        self.targets = np.asarray(targets, dtype=np.float64)

    def deformed(self, u_T: np.ndarray) -> np.ndarray:
        """Template channels sampled through ``phi^-1`` on the planes: (C, n, ny, nx)."""
        U = self.planes.gather(u_T)
        pz, py, px = self.planes.points(U)
        out = _interp.interp3(self.templates, pz, py, px)
        return out.reshape((len(self.templates), self.planes.n) + self.planes.shape)

    def data_from_deformed(self, D: np.ndarray) -> float:
        r = D - self.targets
        return float(np.sum(self.weights * r * r))

    def prior(self, fields: np.ndarray) -> float:
        T = fields.shape[0]
        return 0.5 / T * sum(norm_sq_array(v, self.spacing, self.cfg.kernel) for v in fields)

    def energy(self, fields: np.ndarray):
        us = inverse_steps(fields, self.spacing)
        D = self.deformed(us[-1])
        prior = self.prior(fields)
        data = self.data_from_deformed(D)
        return prior + data, prior, data, us

    def l2_gradient(self, fields: np.ndarray, us=None):
        """Euclidean derivative of the data term with respect to each ``v_t`` array."""
        if us is None:
            us = inverse_steps(fields, self.spacing)
        T = fields.shape[0]
        dt = 1.0 / T
        dims = self.dims
        sp = np.asarray(self.spacing)
        U = self.planes.gather(us[-1])
        pz, py, px = self.planes.points(U)
        vals, g = _interp.interp3_grad(self.templates, pz, py, px)
        C = len(self.templates)
        resid = vals.reshape((C,) + self.targets.shape[1:]) - self.targets
        dD = 2.0 * self.weights * resid
        dU = np.einsum("cm,cdm->dm", dD.reshape(C, -1), g) / sp[:, None]
        lam = self.planes.scatter(dU.reshape((3,) + self.targets.shape[1:]), dims)
        grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))
        out = np.empty_like(fields)
        for t in range(T - 1, -1, -1):
            q = grid - dt * fields[t] / sp[:, None, None, None]
            qz, qy, qx = _interp.as_points(q)
            lam_flat = lam.reshape(3, -1)
            if t > 0:
                _, gu = _interp.interp3_grad(us[t], qz, qy, qx)
                chain = np.einsum("cm,cdm->dm", lam_flat, gu) / sp[:, None]
                out[t] = (-dt * (lam_flat + chain)).reshape((3,) + dims)
                lam = _interp.splat3(np.ascontiguousarray(lam_flat), qz, qy, qx, *dims)
            else:
                out[t] = -dt * lam
        return out

    def v_gradient(self, fields: np.ndarray, us=None) -> np.ndarray:
        """Gradient in the V metric: ``v_t + K G_t / (dt dV)``."""
        G = self.l2_gradient(fields, us)
        T = fields.shape[0]
        return fields + apply_K(G, self.spacing, self.cfg.kernel) * (T / self.dV)


def _as_fields(path, cfg: MatchConfig, dims, spacing):
    if path is None:
        return np.zeros((cfg.T, 3) + tuple(dims))
    f = path.fields if isinstance(path, VelocityPath) else np.asarray(path, dtype=np.float64)
    if f.shape[2:] != tuple(dims):
        raise FrameMismatchError(f"velocity grid {f.shape[2:]} does not match template {tuple(dims)}")
    return f


def matching_energy(path: VelocityPath | None, cfg: MatchConfig):
    """(total, prior, data) of the matching functional for ``path``."""
    prob = MatchProblem(cfg)
    fields = _as_fields(path, cfg, prob.dims, prob.spacing)
    total, prior, data, _ = prob.energy(fields)
    return total, prior, data


def det_jacobian_array(disp: np.ndarray, spacing) -> np.ndarray:
    """Determinant of the centred-difference Jacobian of ``x + disp(x)``."""
    J = np.empty((3, 3) + disp.shape[1:])
    for c in range(3):
        for d in range(3):
            if disp.shape[1 + d] < 2:
                g = np.zeros(disp.shape[1:])
            else:
                g = np.gradient(disp[c], spacing[d], axis=d)
            J[c, d] = g + (1.0 if c == d else 0.0)
    return (J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
            - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
            + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]))


def jacobian_determinant(d: Diffeomorphism, which: str = "forward") -> Volume:
    disp = d.forward_disp if which == "forward" else d.inverse_disp
    return Volume(det_jacobian_array(disp, d.spacing), d.spacing)


def lddmm_gradient(path: VelocityPath | None, cfg: MatchConfig) -> np.ndarray:
    """V-gradient of the matching energy, one (3, nz, ny, nx) field per time step."""
    prob = MatchProblem(cfg)
    fields = _as_fields(path, cfg, prob.dims, prob.spacing)
    us = inverse_steps(fields, prob.spacing)
    if np.any(det_jacobian_array(us[-1], prob.spacing) <= 0):
        raise NonDiffeomorphicError("inverse map has non-positive Jacobian determinant; reduce the step size")
    return prob.v_gradient(fields, us)


def descend(prob: MatchProblem, fields: np.ndarray, cfg: MatchConfig, trace_offset: int = 0):
    """Backtracking steepest descent; returns (fields, trace, status).

    Accepted steps strictly decrease the energy and keep the inverse map's
    Jacobian determinant positive.
    """
    total, prior, data, us = prob.energy(fields)
    trace = [(trace_offset, prior, data)]
    eps = cfg.step
    status = "max-iters"
    for it in range(1, cfg.max_iters + 1):
        if total == 0.0:
            status = "converged"
            break
        grad = prob.v_gradient(fields, us)
        if not np.any(grad):
            status = "converged"
            break
        accepted = False
        while eps >= cfg.min_step:
            trial = fields - eps * grad
            t_total, t_prior, t_data, t_us = prob.energy(trial)
            if t_total < total and np.all(det_jacobian_array(t_us[-1], prob.spacing) > 0):
                accepted = True
                break
            eps *= 0.5
        if not accepted:
            if it == 1:
                raise SolverStall("LDDMM: no descent step accepted at the minimum step size", trace)
            status = "line-search-exhausted"
            break
        rel = (total - t_total) / total
        fields, total, prior, data, us = trial, t_total, t_prior, t_data, t_us
        trace.append((trace_offset + it, prior, data))
        eps = min(eps * 1.5, cfg.max_step)
        if rel < cfg.rel_tol:
            status = "converged"
            break
    return fields, trace, status


def lddmm_match(cfg: MatchConfig, init: VelocityPath | None = None) -> MatchResult:
    """Minimise ``1/2 int ||v_t||_V^2 dt + sum_i alpha_i ||I_i - I0 o phi^-1(., z_i)||^2``."""
    prob = MatchProblem(cfg)
    fields = _as_fields(init, cfg, prob.dims, prob.spacing).copy()
    fields, trace, status = descend(prob, fields, cfg)
    path = VelocityPath(fields, prob.spacing)
    diffeo = integrate_flow(path, "both", cfg.kernel)
    log.debug("lddmm: %d iterations, status %s, energy %.6g", len(trace) - 1, status, trace[-1][1] + trace[-1][2])
    return MatchResult(path, diffeo, tuple(trace), status)


def transport_labels(labels: Volume, d: Diffeomorphism) -> Volume:
    """Carry a label volume through ``phi`` (nearest-neighbour pull-back by ``phi^-1``)."""
    if labels.kind != LABEL:
        raise DataError("transport_labels expects a label volume")
    return warp_volume(labels, d.inverse_disp)


def deform_template(template: Volume, d: Diffeomorphism) -> Volume:
    """``I0 o phi^-1`` on the template grid."""
    return warp_volume(template, d.inverse_disp)
