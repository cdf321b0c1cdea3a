"""Phantoms, synthetic sectioning and the Monte-Carlo harness for the motion estimators."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, HistostackError, NonDiffeomorphicError
from .grid import Section, SectionStack, Volume
from .joint import ATLAS_INFORMED, JointConfig, joint_estimate
from .kernel import Diffeomorphism, KernelSpec, VelocityPath, apply_K, integrate_flow
from .lddmm import deform_template, det_jacobian_array
from .restack import RigidMotion, gauge_fix, motions_to_array

log = logging.getLogger(__name__)

DEFORMATIONS = ("none", "shear", "random-diffeo")
PARAMS = ("theta", "tx", "ty")


@dataclass
class SimConfig:
    seed: int = 0
    jitter_sigma_t: float = 6.0
    jitter_sigma_theta: float = 10.0
    theta_unit: str = "degrees"
    noise_sigma: float = 0.0
    noise_levels: tuple = ()
    shear_offset: float = 0.25
    trials: int = 100
    deformation: str = "none"
    diffeo_amplitude: float = 2.0
    diffeo_kernel: KernelSpec = field(default_factory=lambda: KernelSpec(length_scale=6.0))
    section_step: int = 1
    workers: int = 1

    def __post_init__(self):
        if min(self.jitter_sigma_t, self.jitter_sigma_theta, self.noise_sigma) < 0:
            raise ValueError("simulation sigmas must be nonnegative")
        if any(s < 0 for s in self.noise_levels):
            raise ValueError("noise levels must be nonnegative")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.deformation not in DEFORMATIONS:
            raise ValueError(f"unknown deformation {self.deformation!r}")
        if self.theta_unit not in ("degrees", "radians"):
            raise ValueError(f"unknown rotation unit {self.theta_unit!r}")

    @property
    def levels(self) -> tuple:
        return tuple(self.noise_levels) if self.noise_levels else (self.noise_sigma,)

    @property
    def sigma_theta_rad(self) -> float:
        if self.theta_unit == "degrees":
            return math.radians(self.jitter_sigma_theta)
        return self.jitter_sigma_theta


@dataclass
class TrialRecord:
    trial: int
    seed: int
    noise_sigma: float
    mode: str
    truth: np.ndarray
    estimate: np.ndarray
    error: np.ndarray
    raw_error: np.ndarray
    status: str = "ok"

    def __post_init__(self):
        if not (self.truth.shape == self.estimate.shape == self.error.shape):
            raise DataError("trial record arrays must have one row per section")


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Independent counter-based stream for one trial."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(trial)])))


# ---------------------------------------------------------------------------
# phantoms


def _tube_geometry(dims, spacing, arc_angle, tube_radius, capped=True):
    """Distance to the tube centre line plus cross-section coordinates for every voxel.

    Returns ``(dist, u, w, inside)`` where ``u`` is the offset along y, ``w``
    the in-plane radial offset from the centre arc and ``inside`` marks the
    part of the torus between the end cuts. Capped tubes end inside the
    domain; uncapped ones have their centre line leave through the z faces.
    """
    nz, ny, nx = dims
    sz, sy, sx = spacing
    if min(dims) < 16:
        raise DataError(f"phantom dims must be at least 16 per axis, got {dims}")
    H = 0.5 * (nz - 1) * sz
    ymid, xmid = 0.5 * (ny - 1) * sy, 0.5 * (nx - 1) * sx
    z = (np.arange(nz) - 0.5 * (nz - 1)) * sz
    y = np.arange(ny) * sy
    x = np.arange(nx) * sx
    Z, Y, X = np.meshgrid(np.abs(z), y, x, indexing="ij")
    u = Y - ymid
    if ymid - tube_radius < 0 or ymid + tube_radius > (ny - 1) * sy:
        raise DataError("tube exits the domain along y")
    A = math.radians(arc_angle)
    if A == 0:
        if xmid - tube_radius < 0 or xmid + tube_radius > (nx - 1) * sx:
            raise DataError("tube exits the domain along x")
        w = X - xmid
        inside_arc = np.ones(Z.shape, bool)
    else:
        Rc = H / math.sin(A / 2) - (tube_radius if capped else 0.0)
        if Rc <= tube_radius:
            raise DataError("arc too tight for the tube radius")
        c = math.cos(A / 2)
        Xc = xmid + 0.5 * Rc * (1 + c)
        if Xc - Rc - tube_radius < 0 or Xc - (Rc - tube_radius) * c > (nx - 1) * sx:
            raise DataError("tube exits the domain along x")
        dxc = Xc - X
        rho = np.hypot(Z, dxc)
        w = Rc - rho
        inside_arc = dxc > 0
        if capped:
            inside_arc &= np.arctan2(Z, dxc) <= A / 2
    dist = np.hypot(u, w)
    return dist, u, w, inside_arc


def make_curved_phantom(dims=(48, 64, 64), arc_angle: float = 90.0, tube_radius: float = 8.0,
                        spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Binary circular-arc tube bending in the x-z plane.

    The arc spans the full z extent with its ends cut radially; ``arc_angle``
    is in degrees and 0 gives a straight cylinder along z. The volume is
    mirror symmetric through the z mid-plane.
    """
    dist, _, _, inside = _tube_geometry(dims, spacing, arc_angle, tube_radius)
    return Volume(((dist <= tube_radius) & inside).astype(np.float64), spacing)


def make_grayscale_phantom(dims=(48, 64, 64), arc_angle: float = 30.0, tube_radius: float | None = None,
                           spacing=(1.0, 1.0, 1.0), blur: float = 1.0) -> Volume:
    """Thick curved body with internal structure, normalised to [0, 1].

    The body fills most of each section; a bright rim, concentric bands and
    several off-axis inclusions of different contrast give many level lines
    at large radii, so in-plane rotations are well determined.
    """
    if tube_radius is None:
        tube_radius = 0.18 * min(dims[1] * spacing[1], dims[2] * spacing[2])
    dist, u, w, inside = _tube_geometry(dims, spacing, arc_angle, tube_radius, capped=False)
    r = tube_radius
    body = (dist <= r) & inside
    # unequal angular sectors: radial edges make rotations observable
    phi = np.mod(np.arctan2(u, w), 2 * np.pi)
    levels = np.array([0.9, 0.3, 0.7, 0.15, 0.6, 0.4])
    img = levels[np.minimum((phi / (2 * np.pi) * len(levels)).astype(int), len(levels) - 1)]
    img = np.where(dist < 0.25 * r, 0.5, img)
    img = np.where(dist > 0.85 * r, 0.8, img)
    img = np.where(body, img, 0.0)
    if blur > 0:
        img = gaussian_filter(img, blur / np.asarray(spacing), mode="nearest")
    img = np.clip(img, 0.0, None)
    return Volume(img / img.max(), spacing)


def analytic_tube_volume(dims, arc_angle, tube_radius, spacing=(1.0, 1.0, 1.0)) -> float:
    nz = dims[0]
    H = 0.5 * (nz - 1) * spacing[0]
    A = math.radians(arc_angle)
    if A == 0:
        return math.pi * tube_radius ** 2 * nz * spacing[0]
    Rc = H / math.sin(A / 2) - tube_radius
    return math.pi * tube_radius ** 2 * Rc * A


# ---------------------------------------------------------------------------
# sectioning and corruption


def section_volume(v: Volume, delta: float) -> SectionStack:
    """Take every z slice at spacing ``delta`` (a multiple of the voxel z spacing)."""
    sz = v.spacing[0]
    m = delta / sz
    step = int(round(m))
    if step < 1 or abs(m - step) > 1e-9 * max(1.0, m):
        raise DataError(f"section spacing {delta} is not a multiple of the voxel spacing {sz}")
    idx = np.arange(0, v.dims[0], step)
    secs = [Section(np.asarray(v.data[k], dtype=np.float64), v.spacing[1:]) for k in idx]
    return SectionStack(secs, v.origin[0] + sz * idx, step * sz)


def sample_motions(n: int, cfg: SimConfig, rng: np.random.Generator, pixel=(1.0, 1.0)) -> list:
    z = rng.standard_normal((n, 3))
    th = z[:, 0] * cfg.sigma_theta_rad
    tx = z[:, 1] * cfg.jitter_sigma_t * pixel[1]
    ty = z[:, 2] * cfg.jitter_sigma_t * pixel[0]
    return [RigidMotion(float(a), float(b), float(c)) for a, b, c in zip(th, tx, ty)]


def jitter_stack(stack: SectionStack, cfg: SimConfig, rng: np.random.Generator):
    """Jitter every section by an i.i.d. Gaussian rigid motion.

    Returns the jittered stack and the motions ``R_i`` that restack it
    (``J_i o R_i`` reproduces section i up to resampling).
    """
    from .restack import apply_rigid

    truth = sample_motions(len(stack), cfg, rng, stack.spacing)
    secs = [apply_rigid(s, R.inverse()) for s, R in zip(stack.sections, truth)]
    return SectionStack(secs, stack.z_positions.copy(), stack.delta), truth


def add_noise(stack: SectionStack, sigma: float, rng: np.random.Generator) -> SectionStack:
    if sigma < 0:
        raise ValueError("noise sigma must be nonnegative")
    if sigma == 0:
        return stack.with_data(stack.as_array())
    a = stack.as_array()
    return stack.with_data(a + sigma * rng.standard_normal(a.shape))


def shear_volume(v: Volume, per_section_offset: float) -> Volume:
    """Translate slice k by ``k * offset`` pixels along both x and y (bilinear)."""
    from .restack import apply_rigid

    if per_section_offset == 0:
        return v.like(v.data.copy())
    sy, sx = v.spacing[1:]
    out = np.empty_like(np.asarray(v.data, dtype=np.float64))
    for k in range(v.dims[0]):
        o = k * per_section_offset
        s = Section(v.data[k], (sy, sx))
        out[k] = apply_rigid(s, RigidMotion(0.0, -o * sx, -o * sy)).data
    return v.like(out)


def random_diffeomorphism(dims, amplitude: float, kernel: KernelSpec, rng: np.random.Generator,
                          spacing=(1.0, 1.0, 1.0), T: int = 10, tries: int = 5) -> Diffeomorphism:
    """Smooth random deformation whose largest displacement is ``amplitude`` mm (within 5%)."""
    dims = tuple(dims)
    if amplitude == 0:
        return Diffeomorphism.identity(dims, spacing)
    for attempt in range(tries):
        v = apply_K(rng.standard_normal((3,) + dims), spacing, kernel)
        peak = np.max(np.linalg.norm(v, axis=0))
        if peak == 0:
            continue
        v *= amplitude / peak
        scale = 1.0
        d = None
        for _ in range(8):
            path = VelocityPath(np.broadcast_to(scale * v, (T, 3) + dims).copy(), spacing)
            d = integrate_flow(path, "both", kernel)
            got = float(np.max(np.linalg.norm(d.forward_disp, axis=0)))
            if abs(got - amplitude) <= 0.01 * amplitude:
                break
            scale *= amplitude / got
        ok = (np.all(det_jacobian_array(d.forward_disp, spacing) > 0)
              and np.all(det_jacobian_array(d.inverse_disp, spacing) > 0))
        got = float(np.max(np.linalg.norm(d.forward_disp, axis=0)))
        if ok and abs(got - amplitude) <= 0.05 * amplitude:
            return d
        log.debug("random diffeomorphism attempt %d rejected", attempt + 1)
    raise NonDiffeomorphicError(f"no valid random deformation of amplitude {amplitude} after {tries} tries")


# ---------------------------------------------------------------------------
# Monte-Carlo harness


def deformed_truth(template: Volume, cfg: SimConfig, rng: np.random.Generator) -> Volume:
    if cfg.deformation == "shear":
        return shear_volume(template, cfg.shear_offset)
    if cfg.deformation == "random-diffeo":
        d = random_diffeomorphism(template.dims, cfg.diffeo_amplitude, cfg.diffeo_kernel, rng, template.spacing)
        return deform_template(template, d)
    return template.like(template.data.copy())


def _run_one(args):
    template, cfg, jcfg, modes, trial = args
    rng = trial_rng(cfg.seed, trial)
    seed = int(cfg.seed)
    truth_vol = deformed_truth(template, cfg, rng)
    stack = section_volume(truth_vol, cfg.section_step * template.spacing[0])
    jittered, truth = jitter_stack(stack, cfg, rng)
    # one noise field per trial, scaled to every level (common random numbers)
    white = rng.standard_normal((len(stack),) + stack.shape)
    T = motions_to_array(truth)
    spacing = stack.spacing
    records = []
    for sigma in cfg.levels:
        noisy = jittered.with_data(jittered.as_array() + sigma * white) if sigma > 0 else jittered
        for mode in modes:
            c = dataclasses.replace(jcfg, mode=mode)
            try:
                est = joint_estimate(template, noisy, c).motions.motions
                status = "ok"
            except HistostackError as exc:
                log.warning("trial %d sigma %g %s failed: %s", trial, sigma, mode, exc)
                records.append(TrialRecord(trial, seed, sigma, mode, T, np.full_like(T, np.nan),
                                           np.full_like(T, np.nan), np.full_like(T, np.nan), "failed"))
                continue
            E = motions_to_array(est)
            fixed, _ = gauge_fix(est, truth)
            records.append(TrialRecord(trial, seed, sigma, mode, T, E,
                                       _to_units(motions_to_array(fixed) - T, spacing),
                                       _to_units(E - T, spacing), status))
    return records


def _to_units(err, spacing):
    sy, sx = spacing
    return np.column_stack([np.degrees(err[:, 0]), err[:, 1] / sx, err[:, 2] / sy])


def run_trials(template: Volume, cfg: SimConfig, mode=ATLAS_INFORMED, joint_cfg: JointConfig | None = None):
    """Simulate, estimate and tabulate.

    ``mode`` may be one estimator mode or a sequence of them; every mode sees
    the same simulated stacks. Returns a :class:`TrialTable`.
    """
    modes = (mode,) if isinstance(mode, str) else tuple(mode)
    jcfg = joint_cfg or JointConfig()
    jobs = [(template, cfg, jcfg, modes, t) for t in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            chunks = list(pool.map(_run_one, jobs))
    else:
        chunks = [_run_one(j) for j in jobs]
    records = [r for chunk in chunks for r in chunk]
    return TrialTable(records)


@dataclass
class TrialTable:
    records: list

    @property
    def failures(self) -> int:
        return sum(r.status != "ok" for r in self.records)

    def errors(self, param: str, sigma: float, mode: str | None = None, raw: bool = False) -> np.ndarray:
        j = PARAMS.index(param)
        vals = [(r.raw_error if raw else r.error)[:, j] for r in self.records
                if r.status == "ok" and r.noise_sigma == sigma and (mode is None or r.mode == mode)]
        return np.concatenate(vals) if vals else np.zeros(0)

    def summary(self, raw: bool = False) -> list:
        """Rows of (mode, param, noise_sigma, rmse, bias, std, n_trials)."""
        rows = []
        modes = sorted({r.mode for r in self.records})
        sigmas = sorted({r.noise_sigma for r in self.records})
        for mode in modes:
            for param in PARAMS:
                for s in sigmas:
                    e = self.errors(param, s, mode, raw)
                    n = len({r.trial for r in self.records if r.mode == mode and r.noise_sigma == s and r.status == "ok"})
                    rows.append((mode, param, s) + error_stats(e) + (n,))
        return rows

    def trial_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "section", "param", "truth", "estimate", "error", "noise_sigma", "mode"])
        for r in self.records:
            truth_units = _to_units(r.truth, (1.0, 1.0))
            est_units = _to_units(r.estimate, (1.0, 1.0))
            for i in range(r.truth.shape[0]):
                for j, p in enumerate(PARAMS):
                    w.writerow([r.trial, i, p, _fmt(truth_units[i, j]), _fmt(est_units[i, j]),
                                _fmt(r.error[i, j]), _fmt(r.noise_sigma), r.mode])
        return buf.getvalue()

    def summary_csv(self, raw: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["param", "noise_sigma", "rmse", "bias", "std", "n_trials", "mode"])
        for mode, param, s, rmse, bias, std, n in self.summary(raw):
            w.writerow([param, _fmt(s), _fmt(rmse), _fmt(bias), _fmt(std), n, mode])
        return buf.getvalue()


def error_stats(e) -> tuple:
    """(rmse, bias, std) with the population convention, so rmse^2 = bias^2 + std^2."""
    e = np.asarray(e, dtype=np.float64)
    if e.size == 0:
        return (math.nan, math.nan, math.nan)
    bias = float(np.mean(e))
    std = float(np.sqrt(np.mean((e - bias) ** 2)))
    rmse = float(np.sqrt(np.mean(e * e)))
    return rmse, bias, std


def _fmt(x) -> str:
    return repr(float(x))
