"""Solver settings tuned for the desk-scale (48, 64, 64) phantoms.

Intensities are in [0, 1] and the kernel normalisation makes a translation
cost its squared L2 norm, so the matching weight ``alpha`` has to be large
(tens to hundreds) before the data term can pull against the velocity prior.
All presets start from centroid-based translations, because large jitter
can push a small body partly out of the section frame, beyond the reach of
the blur pyramid alone.
"""

from __future__ import annotations

import math

from .joint import ATLAS_INFORMED, INIT_CENTROID, JointConfig
from .kernel import KernelSpec
from .lddmm import MatchConfig
from .restack import RestackConfig, RigidPrior

PRESETS = ("curvature", "atlas-recovery", "noise-trials")


def _prior() -> RigidPrior:
    return RigidPrior(sigma_theta=math.radians(10.0), sigma_t=6.0, sigma_JJ=1.0)


def curvature_config(mode: str = ATLAS_INFORMED) -> JointConfig:
    """Binary curved tube: strong matching weight, short flow, few outer sweeps."""
    return JointConfig(
        match=MatchConfig(kernel=KernelSpec(length_scale=4.0), T=5, alpha=200.0, max_iters=100),
        prior=_prior(),
        restack=RestackConfig(max_iters=300),
        outer_iters=5,
        mode=mode,
        init=INIT_CENTROID,
    )


def atlas_recovery_config(mode: str = ATLAS_INFORMED) -> JointConfig:
    """Grayscale phantom under a random deformation: long alternation, tight tolerances."""
    return JointConfig(
        match=MatchConfig(kernel=KernelSpec(length_scale=4.0), T=5, alpha=200.0, max_iters=200,
                          rel_tol=1e-6),
        prior=_prior(),
        restack=RestackConfig(max_iters=300),
        outer_iters=30,
        mode=mode,
        init=INIT_CENTROID,
    )


def noise_trials_config(mode: str = ATLAS_INFORMED) -> JointConfig:
    """Noisy sections: same in-plane presmoothing on stack and template, cheap inner solves."""
    return JointConfig(
        match=MatchConfig(kernel=KernelSpec(length_scale=4.0), T=5, alpha=50.0, max_iters=30),
        prior=_prior(),
        restack=RestackConfig(max_iters=300),
        outer_iters=5,
        mode=mode,
        init=INIT_CENTROID,
        presmooth=1.0,
    )


def preset(name: str, mode: str = ATLAS_INFORMED) -> JointConfig:
    table = {
        "curvature": curvature_config,
        "atlas-recovery": atlas_recovery_config,
        "noise-trials": noise_trials_config,
    }
    if name not in table:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return table[name](mode)
