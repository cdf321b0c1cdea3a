"""Alternating estimation of section motions and the atlas deformation."""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _interp
from .errors import SolverStall
from .grid import SectionStack, Volume, smoothness_energy
from .kernel import VelocityPath, integrate_flow, inverse_steps
from .lddmm import MatchConfig, MatchProblem, MatchResult, _as_fields, deform_template, descend
from .restack import (
    RestackConfig,
    RestackState,
    RigidPrior,
    centroid_motions,
    identity_motions,
    optimize_rigid,
    restack,
    restack_masks,
    rigid_prior_neglog,
)

log = logging.getLogger(__name__)

ATLAS_FREE = "atlas-free"
ATLAS_INFORMED = "atlas-informed"
INIT_IDENTITY = "identity"
INIT_COARSE = "coarse-rigid-3d"
INIT_CENTROID = "centroid"


@dataclass
class JointConfig:
    match: MatchConfig = field(default_factory=MatchConfig)
    prior: RigidPrior = field(default_factory=RigidPrior)
    restack: RestackConfig = field(default_factory=RestackConfig)
    outer_iters: int = 10
    outer_rel_tol: float = 1e-4
    mode: str = ATLAS_INFORMED
    init: str = INIT_IDENTITY
    pyramid: tuple = (4.0, 2.0)
    presmooth: float = 0.0

    def __post_init__(self):
        if self.outer_iters < 1:
            raise ValueError("outer_iters must be at least 1")
        if self.mode not in (ATLAS_FREE, ATLAS_INFORMED):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.init not in (INIT_IDENTITY, INIT_COARSE, INIT_CENTROID):
            raise ValueError(f"unknown init {self.init!r}")
        if self.presmooth < 0:
            raise ValueError("presmooth must be nonnegative")
        if any(s <= 0 for s in self.pyramid):
            raise ValueError("pyramid blur widths must be positive")


@dataclass(frozen=True)
class EnergyBreakdown:
    velocity: float
    smoothness: float
    rigid: float
    data: float

    @property
    def total(self) -> float:
        return self.velocity + self.smoothness + self.rigid + self.data


@dataclass(frozen=True)
class JointResult:
    motions: RestackState
    match: MatchResult
    trace: tuple
    reconstruction: Volume
    deformed_atlas: Volume
    inner_traces: tuple = ()
    pose: tuple | None = None
    template: Volume | None = None

    @property
    def energy(self) -> float:
        return self.trace[-1].total


# ---------------------------------------------------------------------------
# shared pieces


def _rigid_weights(cfg: MatchConfig, stack: SectionStack, channel_weights, cost_mask=None):
    """Matching weights per channel without the (motion dependent) masks."""
    n = len(stack)
    alpha = np.broadcast_to(np.asarray(cfg.alpha, dtype=np.float64), (n,))
    area = stack.spacing[0] * stack.spacing[1]
    base = (alpha * stack.weights * area)[:, None, None] * np.ones(stack.shape)
    if cost_mask is not None:
        base = base * (np.asarray(cost_mask.data) != 0)
    return np.stack([base * cw for cw in channel_weights])


def _match_problem(template, stack, extra, R, mcfg):
    """Matching problem whose targets are the current restacked channels."""
    masks = restack_masks(stack, R)
    chans = [(template, stack.with_data(restack(stack, R).data, masks), 1.0)]
    for tmpl, s, w in extra:
        chans.append((tmpl, s.with_data(restack(s, R).data, masks), w))
    return MatchProblem(mcfg.with_channels(chans))


def total_energy(template: Volume, stack: SectionStack, R, path: VelocityPath | None,
                 cfg: JointConfig, extra_channels=()) -> EnergyBreakdown:
    """Velocity prior, smoothness prior, rigid prior and data term of the joint objective."""
    R = list(R)
    prob = _match_problem(template, stack, list(extra_channels), R, cfg.match)
    fields = _as_fields(path, cfg.match, prob.dims, prob.spacing)
    _, vel, data, _ = prob.energy(fields)
    recon = restack(stack, R)
    smooth = 0.0
    if len(stack) > 1:
        smooth = smoothness_energy(recon, stack.delta, cfg.restack.scheme) / cfg.prior.sigma_JJ ** 2
    return EnergyBreakdown(vel, smooth, rigid_prior_neglog(R, cfg.prior), data)


# ---------------------------------------------------------------------------
# coarse 3D initialiser


def _block_mean(a, f):
    out = a
    for ax, k in enumerate(f):
        n = (out.shape[ax] // k) * k
        if n == 0:
            continue
        out = np.take(out, np.arange(n), axis=ax)
        shp = out.shape[:ax] + (n // k, k) + out.shape[ax + 1:]
        out = out.reshape(shp).mean(axis=ax + 1)
    return out


def _downsample(v: Volume, factor=4):
    f = tuple(max(1, min(factor, n)) for n in v.dims)
    data = _block_mean(np.asarray(v.data, dtype=np.float64), f)
    sp = tuple(s * k for s, k in zip(v.spacing, f))
    org = tuple(o + 0.5 * (k - 1) * s for o, s, k in zip(v.origin, v.spacing, f))
    return Volume(data, sp, org)


def _pose_points(pts, centre, pose):
    """Map physical points (3, M) through translation, isotropic scale and z rotation about ``centre``."""
    tz, ty, tx, scale, psi = pose
    c, s = math.cos(psi), math.sin(psi)
    d = pts - centre[:, None]
    z = scale * d[0]
    y = scale * (c * d[1] - s * d[2])
    x = scale * (s * d[1] + c * d[2])
    return np.stack([z + centre[0] + tz, y + centre[1] + ty, x + centre[2] + tx])


def _sample_physical(v: Volume, pts):
    idx = (pts - np.asarray(v.origin)[:, None]) / np.asarray(v.spacing)[:, None]
    pz, py, px = _interp.as_points(idx)
    return _interp.interp3(np.ascontiguousarray(v.data[None], dtype=np.float64), pz, py, px)[0]


def _grid_points(v: Volume):
    axes = [o + s * np.arange(n) for n, s, o in zip(v.dims, v.spacing, v.origin)]
    return np.stack(np.meshgrid(*axes, indexing="ij")).reshape(3, -1)


def _volume_centre(v: Volume):
    return np.asarray(v.origin) + 0.5 * (np.asarray(v.dims) - 1) * np.asarray(v.spacing)


def default_search_grid(template: Volume, factor: int = 4):
    """Translations in steps of ``factor`` voxels up to a quarter of the extent, three scales, five angles."""
    grids = []
    for n, s in zip(template.dims, template.spacing):
        step = factor * s
        k = int((n * s / 4) // step)
        grids.append(tuple(step * i for i in range(-k, k + 1)))
    scales = (0.9, 1.0, 1.1)
    angles = tuple(math.radians(a) for a in (-10.0, -5.0, 0.0, 5.0, 10.0))
    return grids[0], grids[1], grids[2], scales, angles


def coarse_init(template: Volume, stack: SectionStack, search=None, factor: int = 4):
    """Exhaustive search for the 3D pose aligning ``template`` to the naive stack.

    Returns ``(pose, resampled_template)`` where ``pose = (tz, ty, tx, scale,
    psi)`` maps stack-frame points into the template and the resampled
    template is ``template(pose(x))`` on the template's own grid. Ties go to
    the lexicographically smallest parameter tuple.
    """
    identity = (0.0, 0.0, 0.0, 1.0, 0.0)
    naive = restack(stack, identity_motions(len(stack)))
    if np.ptp(naive.data) == 0 or np.ptp(template.data) == 0:
        warnings.warn("constant image in coarse initialisation; using the identity pose", RuntimeWarning)
        return identity, template
    search = search or default_search_grid(template, factor)
    small_stack = _downsample(naive, factor)
    small_tmpl = _downsample(template, factor)
    pts = _grid_points(small_stack)
    centre = _volume_centre(template)
    target = small_stack.data.ravel()
    best, best_cost = None, math.inf
    for pose in sorted(itertools.product(*search)):
        vals = _sample_physical(small_tmpl, _pose_points(pts, centre, pose))
        cost = float(np.sum((vals - target) ** 2))
        if cost < best_cost:
            best, best_cost = pose, cost
    if best == identity or all(abs(a - b) == 0 for a, b in zip(best, identity)):
        return identity, template
    vals = _sample_physical(template, _pose_points(_grid_points(template), centre, best))
    return tuple(float(p) for p in best), template.like(vals.reshape(template.dims))


# ---------------------------------------------------------------------------
# estimator


def _finish(template, stack, extra, R, fields, mcfg, trace, inner, rstate, mtrace, mstatus, pose):
    path = VelocityPath(fields, template.spacing)
    diffeo = integrate_flow(path, "both", mcfg.kernel)
    match = MatchResult(path, diffeo, tuple(mtrace), mstatus)
    recon = restack(stack, R)
    return JointResult(rstate, match, tuple(trace), recon, deform_template(template, diffeo),
                       tuple(inner), pose, template)


def joint_estimate(template: Volume, stack: SectionStack, cfg: JointConfig | None = None,
                   extra_channels=()) -> JointResult:
    """Estimate section motions and the template deformation.

    ``extra_channels`` is a list of ``(template, stack, weight)`` triples that
    share the motions of ``stack`` and add their own matching terms.
    """
    cfg = cfg or JointConfig()
    extra = list(extra_channels)
    pose = None
    if cfg.init == INIT_COARSE:
        pose, template = coarse_init(template, stack)
    raw_stack, raw_template = stack, template
    if cfg.presmooth > 0:
        # the same in-plane blur on both sides keeps the data term unbiased
        stack = _presmoothed(stack, cfg.presmooth)
        template = _presmoothed_volume(template, cfg.presmooth)
        extra = [(_presmoothed_volume(t, cfg.presmooth), _presmoothed(s, cfg.presmooth), w) for t, s, w in extra]
    mcfg = cfg.match
    chan_w = [1.0] + [w for _, _, w in extra]
    extra_data = [s.as_array() for _, s, _ in extra] or None
    fields = np.zeros((mcfg.T, 3) + template.dims)
    inner = []
    R = _pyramid_motions(template, stack, cfg, extra, inner, _initial_motions(stack, cfg))

    if cfg.mode == ATLAS_FREE:
        rstate = _rigid_step(stack, R, cfg, None, None, extra_data, 1, inner)
        R = rstate.motions
        prob = _match_problem(template, stack, extra, R, mcfg)
        fields, mtrace, mstatus = _match_step(prob, fields, mcfg, 1, inner)
        e = total_energy(template, stack, R, fields, cfg, extra)
        return _finish(raw_template, raw_stack, extra, R, fields, mcfg, [e], inner, rstate, mtrace, mstatus, pose)

    rweights = _rigid_weights(mcfg, stack, chan_w, mcfg.cost_mask)
    prev = total_energy(template, stack, R, fields, cfg, extra)
    trace = [prev]
    rstate = RestackState(R, [], "not-run")
    mtrace, mstatus = [], "not-run"
    for k in range(1, cfg.outer_iters + 1):
        prob = _match_problem(template, stack, extra, R, mcfg)
        new_fields, new_mtrace, new_mstatus = _match_step(prob, fields, mcfg, k, inner)
        us = inverse_steps(new_fields, template.spacing)
        atlas = prob.deformed(us[-1])
        new_rstate = _rigid_step(stack, R, cfg, atlas, rweights, extra_data, k, inner)
        e = total_energy(template, stack, new_rstate.motions, new_fields, cfg, extra)
        if e.total > prev.total:
            log.info("outer iteration %d raised the energy; keeping the previous estimate", k)
            break
        fields, R, rstate = new_fields, new_rstate.motions, new_rstate
        mtrace, mstatus = new_mtrace, new_mstatus
        trace.append(e)
        rel = (prev.total - e.total) / prev.total if prev.total > 0 else 0.0
        prev = e
        if rel < cfg.outer_rel_tol:
            break
    return _finish(raw_template, raw_stack, extra, R, fields, mcfg, trace, inner, rstate, mtrace, mstatus, pose)


def restack_atlas_free(stack: SectionStack, cfg: JointConfig | None = None):
    """Section motions from the smoothness and rigid priors alone.

    Runs the blur pyramid and a final full-resolution solve; returns the
    final ``RestackState`` and the list of ``(k, name, trace)`` inner traces.
    """
    cfg = dataclasses.replace(cfg or JointConfig(), mode=ATLAS_FREE)
    work = _presmoothed(stack, cfg.presmooth) if cfg.presmooth > 0 else stack
    inner = []
    R = _pyramid_motions(None, work, cfg, [], inner, _initial_motions(work, cfg))
    return _rigid_step(work, R, cfg, None, None, None, 1, inner), inner


def _match_step(prob, fields, mcfg, k, inner):
    try:
        fields, mtrace, status = descend(prob, fields.copy(), mcfg)
    except SolverStall as exc:
        # an already-stationary start is not an error for the alternation
        if len(exc.trace) == 1 and k > 1:
            mtrace, status = list(exc.trace), "stationary"
        else:
            raise SolverStall(f"outer iteration {k}: {exc}", exc.trace) from exc
    inner.append((k, "lddmm", tuple(mtrace)))
    return fields, mtrace, status


def _rigid_step(stack, R, cfg, atlas, weights, extra_data, k, inner):
    try:
        st = optimize_rigid(stack, R, cfg.prior, atlas, cfg.restack, data_weights=weights,
                            channel_data=extra_data if atlas is not None else None)
    except SolverStall as exc:
        if len(exc.trace) == 1 and k > 1:
            st = RestackState(list(R), list(exc.trace), "stationary")
        else:
            raise SolverStall(f"outer iteration {k}: {exc}", exc.trace) from exc
    inner.append((k, "rigid", tuple(st.trace)))
    return st


def _presmoothed_volume(v, sigma):
    sy, sx = v.spacing[1:]
    return v.like(gaussian_filter(np.asarray(v.data, dtype=np.float64), (0.0, sigma, sigma), mode="nearest"))


def _presmoothed(stack, sigma):
    return stack.with_data(_blur_sections(stack.as_array(), sigma, stack.spacing))


def _blur_sections(a, sigma, spacing):
    sig = (0.0,) * (a.ndim - 2) + (sigma, sigma)
    return gaussian_filter(a, sig, mode="nearest")


def _initial_motions(stack, cfg):
    # the start uses no atlas, so both modes begin from the same motions
    if cfg.init == INIT_CENTROID:
        return centroid_motions(stack)
    return identity_motions(len(stack))


def _pyramid_motions(template, stack, cfg, extra, inner, R):
    """Coarse-to-fine rigid initialisation on in-plane blurred sections.

    Each level solves the restacking problem (with the undeformed template
    as atlas in atlas-informed mode) on images blurred by ``sigma`` pixels,
    widening the capture range; the result seeds the alternation.
    """
    if not cfg.pyramid:
        return R
    atlas = weights = extra_data = None
    if cfg.mode == ATLAS_INFORMED:
        prob = _match_problem(template, stack, extra, R, cfg.match)
        atlas0 = prob.deformed(np.zeros((3,) + template.dims))
        weights = _rigid_weights(cfg.match, stack, [1.0] + [w for _, _, w in extra], cfg.match.cost_mask)
    for level, sigma in enumerate(cfg.pyramid):
        blurred = stack.with_data(_blur_sections(stack.as_array(), sigma, stack.spacing))
        if cfg.mode == ATLAS_INFORMED:
            atlas = _blur_sections(atlas0, sigma, stack.spacing)
            if extra:
                extra_data = [_blur_sections(s.as_array(), sigma, stack.spacing) for _, s, _ in extra]
        try:
            st = optimize_rigid(blurred, R, cfg.prior, atlas, cfg.restack, data_weights=weights,
                                channel_data=extra_data)
        except SolverStall as exc:
            if len(exc.trace) != 1:
                raise
            continue
        inner.append((0, f"rigid-pyramid-{level}", tuple(st.trace)))
        R = st.motions
    return R
