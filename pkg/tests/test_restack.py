from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import rigid_fd_errors, rigid_instance
from scipy.ndimage import gaussian_filter

from histostack.errors import DimensionMismatchError, SolverStall
from histostack.grid import Section, SectionStack, smoothness_energy
from histostack.joint import JointConfig, restack_atlas_free
from histostack.restack import (
    RestackConfig,
    RigidMotion,
    RigidPrior,
    apply_rigid,
    array_to_motions,
    atlas_free_energy,
    centroid_motions,
    gauge_fix,
    identity_motions,
    minimize_monotone,
    motion_errors,
    motions_to_array,
    optimize_rigid,
    restack,
    restack_masks,
    rigid_gradients,
    rigid_prior_neglog,
)
from histostack.simulate import (
    SimConfig,
    jitter_stack,
    make_curved_phantom,
    make_grayscale_phantom,
    section_volume,
    trial_rng,
)

angles = st.floats(-1.2, 1.2, allow_nan=False)
shifts = st.floats(-5, 5, allow_nan=False)
motions = st.builds(RigidMotion, angles, shifts, shifts)


def band_limited_section(seed=0, n=48, sigma=4.0):
    rng = np.random.default_rng(seed)
    data = gaussian_filter(rng.standard_normal((n, n)), sigma) * 10
    yy, xx = np.mgrid[:n, :n] - (n - 1) / 2
    data *= np.exp(-(yy ** 2 + xx ** 2) / (2 * (n / 6) ** 2))
    return Section(data, (1.0, 1.0))


def z_constant_stack(n=6, shape=(24, 24)):
    img = band_limited_section(1, shape[0]).data[: shape[0], : shape[1]]
    return SectionStack([Section(img.copy()) for _ in range(n)], np.arange(n) * 1.0, 1.0)


# --- RigidMotion ----------------------------------------------------------------------


def test_quarter_turn_maps_unit_x_to_minus_unit_y():
    x, y = RigidMotion(math.pi / 2)(1.0, 0.0)
    assert (x, y) == pytest.approx((0.0, -1.0), abs=1e-15)


@given(motions, motions, st.tuples(shifts, shifts))
def test_compose_acts_as_function_composition(a, b, p):
    lhs = a.compose(b)(*p)
    rhs = a(*b(*p))
    assert lhs == pytest.approx(rhs, abs=1e-9)


@given(motions)
def test_inverse_composes_to_identity(m):
    c = m.compose(m.inverse())
    assert (c.theta, c.tx, c.ty) == pytest.approx((0, 0, 0), abs=1e-9)


def test_non_finite_motion_rejected():
    with pytest.raises(ValueError):
        RigidMotion(float("nan"))


# --- apply_rigid / restack ---------------------------------------------------------------


def test_identity_motion_leaves_section_unchanged():
    s = band_limited_section()
    assert np.array_equal(apply_rigid(s, RigidMotion()).data, s.data)


def test_quarter_turn_resamples_rotated_image():
    # odd size keeps the centre on a node, so a quarter turn is an exact permutation
    rng = np.random.default_rng(0)
    img = rng.random((9, 9))
    out = apply_rigid(Section(img), RigidMotion(math.pi / 2)).data
    assert np.allclose(out, _rot_oracle(img), atol=1e-12)


def _rot_oracle(img):
    # output(x, y) = img(y, -x) in centred coordinates
    n = img.shape[0]
    c = (n - 1) // 2
    out = np.empty_like(img)
    for iy in range(n):
        for ix in range(n):
            x, y = ix - c, iy - c
            xs, ys = y, -x
            out[iy, ix] = img[ys + c, xs + c]
    return out


def test_round_trip_error_within_resampling_bound():
    s = band_limited_section(2, 64, 5.0)
    m = RigidMotion(0.3, 2.4, -1.7)
    back = apply_rigid(apply_rigid(s, m), m.inverse()).data
    inner = slice(16, 48)
    err = np.max(np.abs(back[inner, inner] - s.data[inner, inner]))
    # two bilinear resamplings of a band-limited image: second-derivative bound
    d2 = max(np.max(np.abs(np.diff(s.data, 2, axis=a))) for a in (0, 1))
    assert err <= 2 * 0.25 * d2


def test_mask_is_transported_by_nearest_neighbour():
    mask = np.zeros((9, 9), bool)
    mask[2:5, 3:7] = True
    s = Section(np.zeros((9, 9)), mask=mask)
    out = apply_rigid(s, RigidMotion(0.0, 1.0, 0.0))
    assert out.mask.dtype == bool
    assert np.array_equal(out.mask[:, :-1], mask[:, 1:])


def test_restack_identity_and_metadata():
    stack = z_constant_stack()
    stack = SectionStack(stack.sections, 3.0 + 2.0 * np.arange(len(stack)), 2.0)
    v = restack(stack, identity_motions(len(stack)))
    assert np.array_equal(v.data, stack.as_array())
    assert v.spacing[0] == 2.0 and v.origin[0] == 3.0
    grid_z = v.origin[0] + v.spacing[0] * np.arange(v.dims[0])
    assert np.array_equal(grid_z, stack.z_positions)


def test_restack_count_mismatch():
    with pytest.raises(DimensionMismatchError):
        restack(z_constant_stack(), identity_motions(2))


def test_ground_truth_motions_undo_jitter():
    ph = make_grayscale_phantom((16, 48, 48), 20.0)
    stack = section_volume(ph, 1.0)
    jittered, truth = jitter_stack(stack, SimConfig(), trial_rng(4, 0))
    inner = (slice(None), slice(12, 36), slice(12, 36))
    before = np.abs(restack(jittered, identity_motions(16)).data[inner] - ph.data[inner])
    after = np.abs(restack(jittered, truth).data[inner] - ph.data[inner])
    # two bilinear resamplings of edges blurred by one pixel
    assert after.max() < 0.1 and after.mean() < 0.02
    assert before.mean() > 0.1


def test_restack_masks_fills_missing_with_true():
    m = np.zeros((4, 4), bool)
    m[1, 1] = True
    stack = SectionStack([Section(np.zeros((4, 4)), mask=m), Section(np.zeros((4, 4)))], [0.0, 1.0], 1.0)
    out = restack_masks(stack, identity_motions(2))
    assert np.array_equal(out[0], m) and out[1].all()


# --- prior and energy ----------------------------------------------------------------------


def test_prior_values():
    pr = RigidPrior(0.2, 3.0, 1.0)
    assert rigid_prior_neglog(identity_motions(4), pr) == 0.0
    assert rigid_prior_neglog([RigidMotion(0.2)], pr) == pytest.approx(0.5, rel=1e-15)
    R = [RigidMotion(0.1, 1.0, -2.0), RigidMotion(-0.3, 0.5, 0.2)]
    R2 = [RigidMotion(2 * m.theta, 2 * m.tx, 2 * m.ty) for m in R]
    assert rigid_prior_neglog(R2, pr) == pytest.approx(4 * rigid_prior_neglog(R, pr), rel=1e-14)


def test_z_constant_stack_has_zero_energy_at_identity():
    stack = z_constant_stack()
    assert atlas_free_energy(stack, identity_motions(len(stack)), RigidPrior()) == 0.0


def test_one_translated_section_raises_energy():
    stack = z_constant_stack()
    R = identity_motions(len(stack))
    R[2] = RigidMotion(0.0, 1.5, 0.0)
    assert atlas_free_energy(stack, R, RigidPrior()) > 0.0


@pytest.mark.parametrize("scheme", ["centered", "staggered"])
def test_energy_is_prior_plus_scaled_smoothness(scheme):
    stack, prior, _, P = rigid_instance(0, atlas=False)
    R = array_to_motions(P)
    smooth = smoothness_energy(restack(stack, R), stack.delta, scheme)
    expect = rigid_prior_neglog(R, prior) + smooth / prior.sigma_JJ ** 2
    assert atlas_free_energy(stack, R, prior, scheme) == pytest.approx(expect, rel=1e-12)


def test_ground_truth_beats_jittered_identity():
    ph = make_grayscale_phantom((16, 40, 40), 20.0)
    stack = section_volume(ph, 1.0)
    jittered, truth = jitter_stack(stack, SimConfig(), trial_rng(1, 0))
    pr = RigidPrior()
    assert atlas_free_energy(jittered, truth, pr) < atlas_free_energy(jittered, identity_motions(16), pr)


# --- gradients -----------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("atlas", [False, True])
def test_rigid_gradient_matches_central_differences(seed, atlas):
    stack, prior, A, P = rigid_instance(seed, atlas, masked=seed % 2 == 1)
    assert max(rigid_fd_errors(stack, prior, A, P, seed=seed)) <= 1e-4


@pytest.mark.parametrize("scheme", ["centered", "staggered"])
def test_gradient_both_smoothness_schemes(scheme):
    stack, prior, A, P = rigid_instance(11, atlas=True)
    assert max(rigid_fd_errors(stack, prior, A, P, scheme=scheme, seed=1)) <= 1e-4


def test_three_section_toy_gradient():
    rng = np.random.default_rng(5)
    data = gaussian_filter(rng.standard_normal((3, 16, 16)), (0, 2, 2)) * 10
    stack = SectionStack([Section(d) for d in data], [0.0, 1.0, 2.0], 1.0)
    P = 0.05 * rng.standard_normal((3, 3))
    P[:, 1:] *= 20
    assert max(rigid_fd_errors(stack, RigidPrior(), None, P, directions=2)) <= 1e-4


def test_gradient_zero_at_perfect_state():
    stack = z_constant_stack()
    A = stack.as_array()
    G = rigid_gradients(stack, identity_motions(len(stack)), RigidPrior(), A, sigma_JI=0.5)
    assert np.all(G == 0)


def test_weak_smoothness_leaves_prior_gradient():
    stack, _, _, P = rigid_instance(2, atlas=False)
    prior = RigidPrior(0.2, 3.0, 1e9)
    G = rigid_gradients(stack, array_to_motions(P), prior)
    expect = np.column_stack([P[:, 0] / 0.2 ** 2, P[:, 1:] / 3.0 ** 2])
    assert np.allclose(G, expect, rtol=1e-8, atol=1e-12)


def test_zero_weight_section_feels_no_atlas_force():
    stack, prior, A, P = rigid_instance(3, atlas=True)
    A2 = A.copy()
    A2[1] += 5.0  # section 1 has weight 0
    G1 = rigid_gradients(stack, array_to_motions(P), prior, A, 0.7)
    G2 = rigid_gradients(stack, array_to_motions(P), prior, A2, 0.7)
    assert np.array_equal(G1, G2)


def test_atlas_requires_sigma():
    stack, prior, A, P = rigid_instance(0, atlas=True)
    with pytest.raises(ValueError):
        rigid_gradients(stack, array_to_motions(P), prior, A)


# --- optimisation ---------------------------------------------------------------------------


def test_minimize_monotone_on_quadratic():
    H = np.diag([1.0, 10.0, 100.0])
    x, trace, status = minimize_monotone(lambda x: (0.5 * x @ H @ x, H @ x, ()), np.ones(3), rel_tol=1e-14)
    assert status in ("converged", "line-search-exhausted")
    assert np.max(np.abs(x)) < 1e-5
    e = [t[1] for t in trace]
    assert all(b < a for a, b in zip(e, e[1:]))


def test_minimize_monotone_stalls_on_wrong_gradient():
    with pytest.raises(SolverStall) as info:
        minimize_monotone(lambda x: (float(x @ x), -x, ()), np.ones(2))
    assert len(info.value.trace) == 1


def test_step_cap_bounds_every_move():
    H = np.diag([1e-3, 1e-3])
    seen = [np.full(2, 50.0)]
    minimize_monotone(lambda x: (0.5 * x @ H @ x, H @ x, ()), seen[0], max_iters=30,
                      callback=lambda x, f: seen.append(x.copy()), max_step=0.5)
    moves = np.abs(np.diff(np.array(seen), axis=0))
    assert len(moves) > 1 and moves.max() <= 0.5 + 1e-12


def test_step_cap_validated():
    with pytest.raises(ValueError):
        RestackConfig(max_step=0.0)


def test_optimal_input_returns_quickly():
    stack = z_constant_stack()
    st_ = optimize_rigid(stack, prior=RigidPrior())
    assert len(st_.trace) <= 2
    assert all(m.is_identity for m in st_.motions)


@pytest.mark.parametrize("seed", range(4))
def test_atlas_free_recovers_relative_alignment(seed):
    # straight textured tube: every section agrees, so smoothness pins relative pose
    ph = make_grayscale_phantom((16, 40, 40), 0.0)
    stack = section_volume(ph, 1.0)
    jittered, truth = jitter_stack(stack, SimConfig(jitter_sigma_t=3.0, jitter_sigma_theta=5.0), trial_rng(seed, 0))
    cfg = JointConfig(prior=RigidPrior(math.radians(10.0), 6.0, 0.1), restack=RestackConfig(max_iters=500))
    state, inner = restack_atlas_free(jittered, cfg)
    rmse = np.sqrt(np.mean(motion_errors(state.motions, truth) ** 2, axis=0))
    assert rmse[0] <= 1.0 and rmse[1] <= 1.0 and rmse[2] <= 1.0
    for _, _, trace in inner:
        e = [t[1] for t in trace]
        assert all(b <= a for a, b in zip(e, e[1:]))


def test_zero_alpha_reproduces_atlas_free_trace():
    stack, prior, A, _ = rigid_instance(6, atlas=True)
    cfg = RestackConfig(max_iters=40)
    free = optimize_rigid(stack, prior=prior, cfg=cfg)
    informed = optimize_rigid(stack, prior=prior, deformed_atlas=A, alpha=0.0, cfg=cfg)
    assert len(free.trace) == len(informed.trace)
    for a, b in zip(free.trace, informed.trace):
        assert abs(a[1] - b[1]) <= 1e-10 * max(1.0, abs(a[1]))
    assert np.allclose(motions_to_array(free.motions), motions_to_array(informed.motions), rtol=0, atol=1e-10)


# --- gauge -----------------------------------------------------------------------------------


@settings(max_examples=30)
@given(st.lists(motions, min_size=2, max_size=6), motions)
def test_gauge_fix_removes_common_motion(truth, g):
    est = [m.compose(g.inverse()) for m in truth]
    fixed, G = gauge_fix(est, truth)
    assert np.allclose(motions_to_array(fixed), motions_to_array(truth), atol=1e-8)


def test_motion_errors_units():
    truth = [RigidMotion(0.0, 0.0, 0.0)] * 2
    est = [RigidMotion(math.radians(1.0), 1.0, 2.0), RigidMotion(math.radians(1.0), 1.0, 2.0)]
    raw = motion_errors(est, truth, spacing=(0.5, 0.25), gauge=False)
    assert np.allclose(raw, [[1.0, 4.0, 4.0]] * 2)
    assert np.allclose(motion_errors(est, truth), 0.0, atol=1e-12)


def test_objective_dimension_checks():
    stack = z_constant_stack()
    with pytest.raises(DimensionMismatchError):
        rigid_gradients(stack, identity_motions(len(stack)), RigidPrior(), np.zeros((2, 24, 24)), 1.0)


# --- centroid initialisation ------------------------------------------------------------


def blob_stack(shifts, n=48, radius=5.0):
    """A centred disc shifted by whole pixels per section, kept well inside the frame."""
    yy, xx = np.mgrid[:n, :n] - (n - 1) / 2
    disc = gaussian_filter(((yy ** 2 + xx ** 2) <= radius ** 2).astype(float), 1.0)
    secs = [Section(np.roll(disc, (int(dy), int(dx)), axis=(0, 1))) for dx, dy in shifts]
    return SectionStack(secs, np.arange(len(shifts), dtype=float), 1.0)


def test_centroid_residuals_match_polynomial_oracle():
    rng = np.random.default_rng(0)
    shifts = rng.integers(-6, 7, (20, 2)).astype(float)
    got = motions_to_array(centroid_motions(blob_stack(shifts), degree=2))
    z = np.linspace(-0.5, 0.5, 20)
    expect = np.column_stack([s - np.polyval(np.polyfit(z, s, 2), z) for s in shifts.T])
    assert np.all(got[:, 0] == 0.0)
    # Gaussian tails reaching the frame border are the only inexactness
    assert np.allclose(got[:, 1:], expect, atol=1e-4)


def test_centroid_motions_keep_smooth_curvature():
    ph = make_curved_phantom((32, 48, 48), 60.0, 6.0)
    P = motions_to_array(centroid_motions(section_volume(ph, 1.0)))
    assert np.max(np.abs(P[:, 1:])) <= 0.5


def test_centroid_motions_undo_translations():
    rng = np.random.default_rng(1)
    shifts = rng.integers(-6, 7, (20, 2)).astype(float)
    stack = blob_stack(shifts)
    rec = restack(stack, centroid_motions(stack, degree=0)).data
    yy, xx = np.mgrid[:48, :48]
    cx = (rec * xx).sum((1, 2)) / rec.sum((1, 2))
    cy = (rec * yy).sum((1, 2)) / rec.sum((1, 2))
    # every section ends on the mean centroid
    assert np.ptp(cx) < 0.05 and np.ptp(cy) < 0.05


def test_centroid_motions_skip_empty_sections():
    stack = blob_stack([(2, 0), (0, 0), (-2, 0)])
    secs = list(stack.sections)
    secs[1] = Section(np.zeros((48, 48)))
    P = motions_to_array(centroid_motions(SectionStack(secs, stack.z_positions, 1.0), degree=0))
    assert np.array_equal(P[1], [0.0, 0.0, 0.0])
    assert P[0, 1] == pytest.approx(2.0, abs=1e-4) and P[2, 1] == pytest.approx(-2.0, abs=1e-4)


def test_centroid_start_escapes_out_of_frame_trap():
    # one section moved so far that part of the body leaves the frame; from the
    # identity start, pushing it further out lowers the energy
    ph = make_grayscale_phantom((24, 48, 48), tube_radius=9.0)
    stack = section_volume(ph, 1.0)
    truth = identity_motions(24)
    truth[12] = RigidMotion(0.0, 0.0, -17.0)
    jittered = SectionStack([apply_rigid(s, R.inverse()) for s, R in zip(stack.sections, truth)],
                            stack.z_positions, 1.0)
    cfg = JointConfig(init="centroid", prior=RigidPrior(sigma_JJ=0.1))
    state, _ = restack_atlas_free(jittered, cfg)
    err = motion_errors(state.motions, truth)
    assert np.max(np.abs(err[:, 1:])) <= 1.0
