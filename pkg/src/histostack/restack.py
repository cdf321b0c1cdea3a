"""Per-section rigid motions and the restacking subproblem.

A motion ``R = (theta, tx, ty)`` acts on centred physical section coordinates
as ``R(x, y) = (cos t x + sin t y + tx, -sin t x + cos t y + ty)`` and the
restacked section is ``J o R``. The rotation centre is the section centre.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _interp
from .errors import DimensionMismatchError, SolverStall
from .grid import Section, SectionStack, Volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RigidMotion:
    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.theta, self.tx, self.ty)):
            raise ValueError("rigid motion parameters must be finite")

    @property
    def is_identity(self) -> bool:
        return self.theta == 0.0 and self.tx == 0.0 and self.ty == 0.0

    def inverse(self) -> "RigidMotion":
        c, s = math.cos(self.theta), math.sin(self.theta)
        # r(-theta) applied to -t
        return RigidMotion(-self.theta, -(c * self.tx - s * self.ty), -(s * self.tx + c * self.ty))

    def compose(self, other: "RigidMotion") -> "RigidMotion":
        """``self o other``."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        tx = c * other.tx + s * other.ty + self.tx
        ty = -s * other.tx + c * other.ty + self.ty
        return RigidMotion(self.theta + other.theta, tx, ty)

    def __call__(self, x, y):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return c * x + s * y + self.tx, -s * x + c * y + self.ty


@dataclass(frozen=True)
class RigidPrior:
    sigma_theta: float = math.radians(10.0)
    sigma_t: float = 6.0
    sigma_JJ: float = 1.0

    def __post_init__(self):
        if min(self.sigma_theta, self.sigma_t, self.sigma_JJ) <= 0:
            raise ValueError("prior scales must be positive")


@dataclass
class RestackConfig:
    max_iters: int = 200
    rel_tol: float = 1e-7
    scheme: str = "staggered"
    memory: int = 10
    max_halvings: int = 40
    max_step: float | None = 2.0

    def __post_init__(self):
        if self.max_step is not None and not self.max_step > 0:
            raise ValueError("max_step must be positive")


@dataclass
class RestackState:
    motions: list
    trace: list = field(default_factory=list)
    status: str = "converged"

    @property
    def energy(self) -> float:
        return self.trace[-1][1] if self.trace else float("nan")


def motions_to_array(R) -> np.ndarray:
    return np.array([[m.theta, m.tx, m.ty] for m in R], dtype=np.float64).reshape(-1, 3)


def array_to_motions(P) -> list:
    return [RigidMotion(float(a), float(b), float(c)) for a, b, c in np.asarray(P)]


def identity_motions(n: int) -> list:
    return [RigidMotion() for _ in range(n)]


# ---------------------------------------------------------------------------
# resampling


def _centred_coords(shape, spacing):
    ny, nx = shape
    sy, sx = spacing
    y = (np.arange(ny) - (ny - 1) / 2.0) * sy
    x = (np.arange(nx) - (nx - 1) / 2.0) * sx
    Y, X = np.meshgrid(y, x, indexing="ij")
    return Y, X


def _sample_points(p, shape, spacing, Y, X):
    theta, tx, ty = p
    c, s = math.cos(theta), math.sin(theta)
    xs = c * X + s * Y + tx
    ys = -s * X + c * Y + ty
    ny, nx = shape
    sy, sx = spacing
    return ys / sy + (ny - 1) / 2.0, xs / sx + (nx - 1) / 2.0


def apply_rigid(s: Section, R: RigidMotion) -> Section:
    """Resample ``s`` at ``R(x)``: bilinear for intensities, nearest for the mask."""
    if R.is_identity:
        return Section(s.data.copy(), s.spacing, None if s.mask is None else s.mask.copy(), s.weight)
    Y, X = _centred_coords(s.dims, s.spacing)
    iy, ix = _sample_points((R.theta, R.tx, R.ty), s.dims, s.spacing, Y, X)
    py, px = _interp.as_points((iy, ix))
    out = _interp.interp2(np.ascontiguousarray(s.data[None]), py, px)[0].reshape(s.dims)
    mask = None
    if s.mask is not None:
        mask = s.mask[_interp.nearest_index(iy, s.dims[0]), _interp.nearest_index(ix, s.dims[1])]
    return Section(out, s.spacing, mask, s.weight)


def restack(stack: SectionStack, R) -> Volume:
    """Apply each motion and assemble the sections into a volume with z spacing delta."""
    R = list(R)
    if len(R) != len(stack):
        raise DimensionMismatchError(f"{len(R)} motions for {len(stack)} sections")
    data = np.stack([apply_rigid(s, m).data for s, m in zip(stack.sections, R)])
    sy, sx = stack.spacing
    return Volume(data, (stack.delta, sy, sx), (float(stack.z_positions[0]), 0.0, 0.0))


def restack_masks(stack: SectionStack, R) -> np.ndarray | None:
    if stack.masks() is None:
        return None
    out = []
    for s, m in zip(stack.sections, R):
        if s.mask is None:
            out.append(np.ones(s.dims, bool))
        else:
            out.append(apply_rigid(s, m).mask)
    return np.stack(out)


def rigid_prior_neglog(R, prior: RigidPrior) -> float:
    P = motions_to_array(R)
    return _prior_energy(P, prior)


def _prior_energy(P, prior):
    return float(np.sum(P[:, 0] ** 2) / (2 * prior.sigma_theta ** 2)
                 + np.sum(P[:, 1:] ** 2) / (2 * prior.sigma_t ** 2))


# ---------------------------------------------------------------------------
# objective


def _smooth_and_grad(I, delta, area, scheme):
    """0.5 * area * sum of squared z differences and its derivative in I."""
    n = I.shape[0]
    g = np.zeros_like(I)
    if n < 2:
        return 0.0, g
    if scheme == "staggered":
        d = (I[1:] - I[:-1]) / delta
        e = 0.5 * area * float(np.sum(d * d))
        f = area * d / delta
        g[1:] += f
        g[:-1] -= f
    elif scheme == "centered":
        d = (I[2:] - I[:-2]) / (2.0 * delta)
        e = 0.5 * area * float(np.sum(d * d))
        f = area * d / (2.0 * delta)
        g[2:] += f
        g[:-2] -= f
    else:
        raise ValueError(f"unknown smoothness scheme {scheme!r}")
    return e, g


class RigidObjective:
    """Energy of all section motions given an optional fixed deformed atlas.

    ``atlas`` is (C, n, ny, nx): the deformed template sampled on the section
    planes, one entry per channel; ``channel_data`` supplies extra section
    channels (the first channel is always the stack itself) and
    ``data_weights`` the (C, n, ny, nx) matching weights including pixel area.
    """

    def __init__(self, stack: SectionStack, prior: RigidPrior, scheme="staggered",
                 atlas=None, data_weights=None, channel_data=None):
        self.stack = stack
        self.prior = prior
        self.scheme = scheme
        self.shape = stack.shape
        self.spacing = stack.spacing
        self.area = stack.spacing[0] * stack.spacing[1]
        chans = [stack.as_array()]
        if channel_data is not None:
            chans.extend(np.asarray(c, dtype=np.float64) for c in channel_data)
        self.J = np.ascontiguousarray(np.stack(chans, axis=1))  # (n, C, ny, nx)
        self.atlas = None if atlas is None else np.asarray(atlas, dtype=np.float64)
        self.data_weights = None if data_weights is None else np.asarray(data_weights, dtype=np.float64)
        if self.atlas is not None and self.atlas.shape[0] != self.J.shape[1]:
            raise DimensionMismatchError("atlas channels do not match section channels")
        self.has_masks = stack.masks() is not None
        self.Y, self.X = _centred_coords(self.shape, self.spacing)

    def restacked(self, P, with_grad=False):
        n = len(self.stack)
        C = self.J.shape[1]
        out = np.empty((C, n) + self.shape)
        grads = np.empty((C, n, 2) + self.shape) if with_grad else None
        for i in range(n):
            iy, ix = _sample_points(P[i], self.shape, self.spacing, self.Y, self.X)
            py, px = _interp.as_points((iy, ix))
            if with_grad:
                v, g = _interp.interp2_grad(self.J[i], py, px)
                grads[:, i] = g.reshape((C, 2) + self.shape)
            else:
                v = _interp.interp2(self.J[i], py, px)
            out[:, i] = v.reshape((C,) + self.shape)
        return out, grads

    def _weights(self, P):
        w = self.data_weights
        if self.has_masks:
            m = restack_masks(self.stack, array_to_motions(P))
            w = w * m[None]
        return w

    def energy_parts(self, P):
        IR, _ = self.restacked(P)
        prior = _prior_energy(P, self.prior)
        smooth, _ = _smooth_and_grad(IR[0], self.stack.delta, self.area, self.scheme)
        smooth /= self.prior.sigma_JJ ** 2
        data = 0.0
        if self.atlas is not None:
            r = IR - self.atlas
            data = float(np.sum(self._weights(P) * r * r))
        return prior, smooth, data

    def energy(self, P):
        prior, smooth, data = self.energy_parts(P)
        return prior + smooth + data

    def energy_and_grad(self, P):
        P = np.asarray(P, dtype=np.float64)
        IR, grads = self.restacked(P, with_grad=True)
        prior = _prior_energy(P, self.prior)
        smooth, gI0 = _smooth_and_grad(IR[0], self.stack.delta, self.area, self.scheme)
        s2 = self.prior.sigma_JJ ** 2
        smooth /= s2
        dI = np.zeros_like(IR)
        dI[0] = gI0 / s2
        data = 0.0
        if self.atlas is not None:
            r = IR - self.atlas
            w = self._weights(P)
            data = float(np.sum(w * r * r))
            dI += 2.0 * w * r
        sy, sx = self.spacing
        # dE/d(sample point) in mm, summed over channels
        gy = np.sum(dI * grads[:, :, 0], axis=0) / sy
        gx = np.sum(dI * grads[:, :, 1], axis=0) / sx
        th = P[:, 0][:, None, None]
        c, s = np.cos(th), np.sin(th)
        dxdth = -s * self.X + c * self.Y
        dydth = -c * self.X - s * self.Y
        G = np.empty_like(P)
        G[:, 0] = np.sum(gx * dxdth + gy * dydth, axis=(1, 2)) + P[:, 0] / self.prior.sigma_theta ** 2
        G[:, 1] = np.sum(gx, axis=(1, 2)) + P[:, 1] / self.prior.sigma_t ** 2
        G[:, 2] = np.sum(gy, axis=(1, 2)) + P[:, 2] / self.prior.sigma_t ** 2
        return prior + smooth + data, G, (prior, smooth, data)


def _atlas_inputs(stack, deformed_atlas, sigma_JI, alpha=None):
    if deformed_atlas is None:
        return None, None
    A = deformed_atlas.data if isinstance(deformed_atlas, Volume) else np.asarray(deformed_atlas)
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 3:
        A = A[None]
    n = len(stack)
    if A.shape[1:] != (n,) + stack.shape:
        raise DimensionMismatchError(f"deformed atlas shape {A.shape[1:]} does not match stack {(n,) + stack.shape}")
    if alpha is None:
        if sigma_JI is None:
            raise ValueError("sigma_JI is required with a deformed atlas")
        alpha = 1.0 / (2.0 * sigma_JI ** 2)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n,))
    area = stack.spacing[0] * stack.spacing[1]
    w = (alpha * stack.weights * area)[:, None, None] * np.ones(stack.shape)
    return A, np.broadcast_to(w, A.shape).copy()


def atlas_free_energy(stack: SectionStack, R, prior: RigidPrior, scheme: str = "staggered") -> float:
    """Rigid prior plus the z-smoothness of the restack scaled by ``1/sigma_JJ^2``."""
    obj = RigidObjective(stack, prior, scheme)
    return obj.energy(motions_to_array(R))


def restack_energy(stack: SectionStack, R, prior: RigidPrior, deformed_atlas=None,
                   sigma_JI: float | None = None, scheme: str = "staggered") -> float:
    """The energy whose gradient :func:`rigid_gradients` returns."""
    A, W = _atlas_inputs(stack, deformed_atlas, sigma_JI)
    return RigidObjective(stack, prior, scheme, A, W).energy(motions_to_array(R))


def rigid_gradients(stack: SectionStack, R, prior: RigidPrior, deformed_atlas=None,
                    sigma_JI: float | None = None, scheme: str = "staggered") -> np.ndarray:
    """Analytic gradient (n, 3) of the restacking energy in (theta, tx, ty).

    Without an atlas this is the atlas-free energy; with ``deformed_atlas``
    (the atlas on the section planes) the matching term
    ``sum_i alpha_i ||I^R_i - atlas_i||^2`` with ``alpha = 1/(2 sigma_JI^2)``
    is added. Sections with zero weight only feel prior and smoothness.
    """
    A, W = _atlas_inputs(stack, deformed_atlas, sigma_JI)
    obj = RigidObjective(stack, prior, scheme, A, W)
    return obj.energy_and_grad(motions_to_array(R))[1]


def _lbfgs_direction(g, S, Yl):
    q = g.copy()
    alphas = []
    for s, y in reversed(list(zip(S, Yl))):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if S:
        s, y = S[-1], Yl[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    else:
        q /= max(np.max(np.abs(q)), 1e-300)
    for a, rho, s, y in reversed(alphas):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def minimize_monotone(fun_grad, x0, max_iters=200, rel_tol=1e-7, memory=10, max_halvings=40,
                      trace_offset=0, name="solver", callback=None, max_step=None):
    """Limited-memory quasi-Newton descent with backtracking.

    Every accepted iterate strictly lowers ``fun``; ``trace`` records
    (iteration, energy, parts). ``max_step`` caps the largest coordinate
    change of a trial step, so a poor curvature estimate cannot throw
    parameters out of their basin in one jump. Raises :class:`SolverStall`
    if not a single step can be accepted from a non-stationary start.
    """
    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    f, g, parts = fun_grad(x)
    trace = [(trace_offset, f, parts)]
    S, Yl = [], []
    status = "max-iters"
    for it in range(1, max_iters + 1):
        if not np.any(g):
            status = "converged"
            break
        d = _lbfgs_direction(g, S, Yl)
        slope = float(np.dot(g, d))
        if not slope < 0:
            S, Yl = [], []
            d = _lbfgs_direction(g, S, Yl)
            slope = float(np.dot(g, d))
        if max_step is not None:
            big = float(np.max(np.abs(d)))
            if big > max_step:
                d *= max_step / big
                slope *= max_step / big
        step = 1.0
        accepted = False
        for _ in range(max_halvings):
            xt = x + step * d
            ft, gt, pt = fun_grad(xt)
            if ft < f and ft <= f + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if len(S):
                S, Yl = [], []
                continue
            if it == 1:
                raise SolverStall(f"{name}: no descent step accepted", trace)
            status = "line-search-exhausted"
            break
        s_vec, y_vec = xt - x, gt - g
        sy = float(np.dot(s_vec, y_vec))
        # skip pairs with no usable curvature, including underflowed ones
        if sy > max(1e-12 * float(np.dot(y_vec, y_vec)), 1e-280):
            S.append(s_vec)
            Yl.append(y_vec)
            if len(S) > memory:
                S.pop(0)
                Yl.pop(0)
        rel = (f - ft) / abs(f) if f != 0 else 0.0
        x, f, g, parts = xt, ft, gt, pt
        trace.append((trace_offset + it, f, parts))
        if callback is not None:
            callback(x, f)
        if rel < rel_tol:
            status = "converged"
            break
    return x, trace, status


def optimize_rigid(stack: SectionStack, init=None, prior: RigidPrior | None = None,
                   deformed_atlas=None, cfg: RestackConfig | None = None, sigma_JI: float | None = None,
                   alpha=None, channel_data=None, data_weights=None,
                   trace_offset: int = 0) -> RestackState:
    """Jointly descend all 3n rigid parameters.

    Rotations are internally rescaled by the section radius so that every
    parameter is in mm.
    """
    prior = prior or RigidPrior()
    cfg = cfg or RestackConfig()
    n = len(stack)
    P0 = motions_to_array(init if init is not None else identity_motions(n))
    if data_weights is not None and deformed_atlas is not None:
        A = np.asarray(getattr(deformed_atlas, "data", deformed_atlas), dtype=np.float64)
        A = A[None] if A.ndim == 3 else A
        W = np.asarray(data_weights, dtype=np.float64)
        if W.shape != A.shape:
            raise DimensionMismatchError(f"data weights {W.shape} do not match atlas {A.shape}")
    else:
        A, W = _atlas_inputs(stack, deformed_atlas, sigma_JI, alpha)
    if A is not None and channel_data is None and A.shape[0] > 1:
        raise DimensionMismatchError("multi-channel atlas needs matching section channels")
    obj = RigidObjective(stack, prior, cfg.scheme, A, W, channel_data)
    ny, nx = stack.shape
    sy, sx = stack.spacing
    radius = math.sqrt(((ny * sy) ** 2 + (nx * sx) ** 2) / 12.0)
    scale = np.array([1.0 / radius, 1.0, 1.0])

    def fg(z):
        P = z.reshape(n, 3) * scale
        e, G, parts = obj.energy_and_grad(P)
        return e, (G * scale).ravel(), parts

    z, trace, status = minimize_monotone(fg, (P0 / scale).ravel(), cfg.max_iters, cfg.rel_tol,
                                         cfg.memory, cfg.max_halvings, trace_offset, "optimize_rigid",
                                         max_step=cfg.max_step)
    P = z.reshape(n, 3) * scale
    log.debug("optimize_rigid: %d iterations, status %s", len(trace) - 1, status)
    return RestackState(array_to_motions(P), trace, status)


def centroid_motions(stack: SectionStack, degree: int = 4, blur: float = 2.0) -> list:
    """Translations that put every section's intensity centroid on a smooth curve in z.

    Anatomy moves smoothly from section to section while the jitter is
    independent, so a robust low-order polynomial fit of the centroids
    against z keeps the curvature and the residuals estimate the jitter.
    Centroids weight only blurred pixels more than three noise deviations
    above the background, both estimated robustly from the frame border, so
    noise far from the body contributes almost nothing. Sections with no
    such pixels keep the identity. Rotations are zero.
    """
    from scipy.ndimage import gaussian_filter

    n = len(stack)
    Y, X = _centred_coords(stack.shape, stack.spacing)
    cent = np.zeros((n, 2))
    ok = np.zeros(n, dtype=bool)
    for i, sec in enumerate(stack.sections):
        img = gaussian_filter(np.asarray(sec.data, dtype=np.float64), blur, mode="nearest")
        border = np.concatenate([img[0], img[-1], img[1:-1, 0], img[1:-1, -1]])
        bg = float(np.median(border))
        spread = 1.4826 * float(np.median(np.abs(border - bg)))
        w = np.where(img > bg + 3.0 * spread, img - bg, 0.0)
        mass = float(w.sum())
        if mass > 0:
            cent[i] = float((w * X).sum()) / mass, float((w * Y).sum()) / mass
            ok[i] = True
    P = np.zeros((n, 3))
    z = np.asarray(stack.z_positions, dtype=np.float64)
    use = ok.copy()
    deg = min(degree, int(use.sum()) - 1)
    if deg < 0:
        return identity_motions(n)
    zc = (z - z.mean()) / max(float(np.ptp(z)), 1e-300)
    fit = np.zeros((n, 2))
    for _ in range(3):
        for j in range(2):
            fit[:, j] = np.polyval(np.polyfit(zc[use], cent[use, j], deg), zc)
        r = np.hypot(*(cent - fit).T)
        mad = float(np.median(r[ok]))
        keep = ok & (r <= max(3.0 * 1.4826 * mad, 0.5 * min(stack.spacing)))
        if keep.sum() <= deg or np.array_equal(keep, use):
            break
        use = keep
    P[ok, 1:] = cent[ok] - fit[ok]
    return array_to_motions(P)


# ---------------------------------------------------------------------------
# gauge


def gauge_fix(estimates, truth):
    """Right-compose the estimates with the common motion that best matches ``truth``.

    Returns (fixed motions, global motion G) with ``fixed_i = est_i o G``,
    minimising the squared parameter error; closed form because the angle
    and translation residuals decouple.
    """
    E = motions_to_array(estimates)
    Tm = motions_to_array(truth)
    theta_g = float(np.mean(Tm[:, 0] - E[:, 0]))
    c, s = np.cos(E[:, 0]), np.sin(E[:, 0])
    dx, dy = Tm[:, 1] - E[:, 1], Tm[:, 2] - E[:, 2]
    # r(theta_i)^T (t* - t_hat)
    tgx = float(np.mean(c * dx - s * dy))
    tgy = float(np.mean(s * dx + c * dy))
    G = RigidMotion(theta_g, tgx, tgy)
    return [m.compose(G) for m in estimates], G


def motion_errors(estimates, truth, spacing=(1.0, 1.0), gauge: bool = True) -> np.ndarray:
    """Per-section errors (n, 3): rotation in degrees, translations in pixels."""
    est = gauge_fix(estimates, truth)[0] if gauge else list(estimates)
    err = motions_to_array(est) - motions_to_array(truth)
    sy, sx = spacing
    return np.column_stack([np.degrees(err[:, 0]), err[:, 1] / sx, err[:, 2] / sy])
