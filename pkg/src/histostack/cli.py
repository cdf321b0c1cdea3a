"""Command-line entry point: ``histostack <command> [options]``.

Exit status is 0 on success, 1 for usage errors, 2 for data errors (bad
files, mismatched frames, invalid configs) and 3 when a solver stalls or
loses invertibility. Every command writes its numeric outputs as files under
``--out`` together with ``config.json`` (the effective configuration, loadable
with ``--config``) and ``report.json``. Wall-clock timings are added to the
report only with ``--timings`` so that repeated runs stay byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .errors import DataError, HistostackError
from .grid import LABEL
from .joint import ATLAS_FREE, ATLAS_INFORMED, INIT_COARSE, joint_estimate, restack_atlas_free
from .lddmm import lddmm_match, transport_labels, volume_as_stack, deform_template
from .preprocess import estimate_background_threshold, make_brain_mask
from .presets import PRESETS, preset
from .restack import motions_to_array, restack
from .simulate import (
    add_noise,
    deformed_truth,
    jitter_stack,
    make_curved_phantom,
    make_grayscale_phantom,
    run_trials,
    section_volume,
    trial_rng,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_STALL = 0, 1, 2, 3
THREADS_ENV = "HISTOSTACK_THREADS"

log = logging.getLogger("histostack")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _motions_csv(path, motions):
    arr = motions_to_array(motions)
    lines = ["section,theta_rad,tx_mm,ty_mm"]
    lines += [f"{i},{t!r},{x!r},{y!r}" for i, (t, x, y) in enumerate(arr.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def _trace_list(trace):
    return [list(t) if isinstance(t, tuple) else t for t in trace]


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        try:
            n = int(os.environ.get(THREADS_ENV, "1"))
        except ValueError:
            raise DataError(f"{THREADS_ENV} must be an integer") from None
    if n < 1:
        raise DataError("thread count must be at least 1")
    return n


def _run_config(args) -> io.RunConfig:
    if args.config is not None:
        rc = io.load_run_config(args.config)
    else:
        rc = io.RunConfig()
        name = getattr(args, "preset", None)
        if name is not None:
            rc = dataclasses.replace(rc, joint=preset(name))
    if args.seed is not None:
        rc = dataclasses.replace(rc, simulate=dataclasses.replace(rc.simulate, seed=args.seed))
    return rc


def _phantom(kind, dims, arc_angle, tube_radius):
    if kind == "curved":
        kw = {} if tube_radius is None else {"tube_radius": tube_radius}
        return make_curved_phantom(dims, 90.0 if arc_angle is None else arc_angle, **kw)
    kw = {"tube_radius": tube_radius}
    if arc_angle is not None:
        kw["arc_angle"] = arc_angle
    return make_grayscale_phantom(dims, **kw)


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(args, rc, out):
    sim = rc.simulate
    if args.deformation is not None:
        sim = dataclasses.replace(sim, deformation=args.deformation)
    if args.noise is not None:
        sim = dataclasses.replace(sim, noise_sigma=args.noise)
    rc = dataclasses.replace(rc, simulate=sim)
    rng = trial_rng(sim.seed, 0)
    ph = _phantom(args.kind, tuple(args.dims), args.arc_angle, args.tube_radius)
    io.write_volume(out / "phantom.nrrd", ph)
    results = {"voxels_nonzero": int(np.count_nonzero(ph.data))}
    truth = deformed_truth(ph, sim, rng)
    if sim.deformation != "none":
        io.write_volume(out / "truth.nrrd", truth)
    if args.section or args.jitter or sim.noise_sigma > 0:
        stack = section_volume(truth, truth.spacing[0] * args.section_step)
        if args.jitter:
            stack, motions = jitter_stack(stack, sim, rng)
            _motions_csv(out / "truth_motions.csv", motions)
        if sim.noise_sigma > 0:
            stack = add_noise(stack, sim.noise_sigma, rng)
        io.write_stack(out / "stack", stack)
        results["sections"] = len(stack)
    return rc, results


def cmd_mask(args, rc, out):
    mp = rc.mask
    if args.opening is not None:
        mp = dataclasses.replace(mp, opening_radius=args.opening)
    if args.closing is not None:
        mp = dataclasses.replace(mp, closing_radius=args.closing)
    rc = dataclasses.replace(rc, mask=mp, paths={**rc.paths, "input": str(args.input)})
    v = io.read_volume(args.input)
    rng = np.random.default_rng(rc.simulate.seed)
    thr = estimate_background_threshold(v, mp, rng)
    m = make_brain_mask(v, mp, threshold=thr)
    io.write_volume(out / "mask.nrrd", m)
    return rc, {"threshold": thr, "foreground_voxels": int(m.data.sum())}


def cmd_restack(args, rc, out):
    rc = dataclasses.replace(rc, paths={**rc.paths, "stack": str(args.stack)})
    stack = io.read_stack(args.stack)
    state, inner = restack_atlas_free(stack, rc.joint)
    _motions_csv(out / "motions.csv", state.motions)
    io.write_volume(out / "reconstruction.nrrd", restack(stack, state.motions))
    return rc, {
        "energy": state.energy,
        "status": state.status,
        "iterations": len(state.trace) - 1,
        "inner_traces": [[k, name, _trace_list(t)] for k, name, t in inner],
    }


def _target_stack(path):
    path = Path(path)
    if path.suffix == ".json":
        return io.read_stack(path)
    return volume_as_stack(io.read_volume(path))


def cmd_map(args, rc, out):
    rc = dataclasses.replace(rc, paths={**rc.paths, "template": str(args.template), "target": str(args.target)})
    template = io.read_volume(args.template)
    stack = _target_stack(args.target)
    res = lddmm_match(rc.joint.match.with_channels([(template, stack, 1.0)]))
    io.write_volume(out / "deformed_template.nrrd", deform_template(template, res.diffeo))
    io.write_diffeomorphism(out, res.diffeo)
    return rc, {
        "status": res.status,
        "iterations": len(res.trace) - 1,
        "energy_initial": float(res.trace[0][1] + res.trace[0][2]),
        "energy_final": float(res.trace[-1][1] + res.trace[-1][2]),
        "trace": _trace_list(res.trace),
    }


def cmd_joint(args, rc, out):
    jc = rc.joint
    if args.mode is not None:
        jc = dataclasses.replace(jc, mode=args.mode)
    if args.coarse_init:
        jc = dataclasses.replace(jc, init=INIT_COARSE)
    rc = dataclasses.replace(rc, joint=jc, paths={**rc.paths, "template": str(args.template), "stack": str(args.stack)})
    template = io.read_volume(args.template)
    stack = io.read_stack(args.stack)
    res = joint_estimate(template, stack, jc)
    _motions_csv(out / "motions.csv", res.motions.motions)
    io.write_volume(out / "reconstruction.nrrd", res.reconstruction)
    io.write_volume(out / "deformed_atlas.nrrd", res.deformed_atlas)
    io.write_diffeomorphism(out, res.match.diffeo)
    return rc, {
        "energy_initial": res.trace[0].total,
        "energy_final": res.trace[-1].total,
        "outer_iterations": len(res.trace) - 1,
        "energy_trace": [dataclasses.asdict(e) for e in res.trace],
        "match_status": res.match.status,
        "rigid_status": res.motions.status,
        "inner_traces": [[k, name, _trace_list(t)] for k, name, t in res.inner_traces],
    }


def cmd_simulate(args, rc, out, threads):
    sim = rc.simulate
    changes = {"workers": threads}
    if args.trials is not None:
        changes["trials"] = args.trials
    if args.noise_levels is not None:
        changes["noise_levels"] = tuple(args.noise_levels)
    if args.deformation is not None:
        changes["deformation"] = args.deformation
    sim = dataclasses.replace(sim, **changes)
    # worker count never changes results, so the echoed config keeps it at 1
    rc = dataclasses.replace(rc, simulate=dataclasses.replace(sim, workers=1))
    ph = _phantom(args.phantom, tuple(args.dims), args.arc_angle, args.tube_radius)
    modes = [ATLAS_INFORMED, ATLAS_FREE] if args.mode == "both" else [args.mode]
    table = run_trials(ph, sim, modes, rc.joint)
    (out / "trials.csv").write_text(table.trial_csv())
    (out / "summary.csv").write_text(table.summary_csv())
    (out / "summary_raw.csv").write_text(table.summary_csv(raw=True))
    return rc, {"trials": sim.trials, "failures": table.failures}


def cmd_labels(args, rc, out):
    rc = dataclasses.replace(rc, paths={**rc.paths, "labels": str(args.labels), "phi": str(args.phi)})
    labels = io.read_volume(args.labels)
    if labels.kind != LABEL:
        labels = labels.like(np.rint(labels.data).astype(np.int64), kind=LABEL)
    phi = io.read_diffeomorphism(args.phi, args.prefix)
    moved = transport_labels(labels, phi)
    data = moved.data
    if data.dtype.kind in "iu" and data.min() >= 0 and data.max() < 65536:
        data = data.astype(np.uint8 if data.max() < 256 else np.uint16)
    io.write_volume(out / "labels.nrrd", moved.like(data, kind=LABEL))
    return rc, {"labels_present": sorted(int(x) for x in np.unique(moved.data))}


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", type=Path, help="run config JSON (see config.json of any previous run)")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--threads", type=int, help=f"cap on parallel trial workers (default ${THREADS_ENV} or 1)")
    p.add_argument("--timings", action="store_true", help="add wall-clock timings to the report")
    p.add_argument("-v", "--verbose", action="store_true")


def _phantom_args(p, kind_flag):
    p.add_argument(kind_flag, choices=("curved", "grayscale"), default="grayscale")
    p.add_argument("--dims", type=int, nargs=3, default=(48, 64, 64), metavar=("NZ", "NY", "NX"))
    p.add_argument("--arc-angle", type=float, help="bend of the tube in degrees")
    p.add_argument("--tube-radius", type=float, help="tube radius in voxels")


def _preset_arg(p, default):
    p.add_argument("--preset", choices=PRESETS, default=default,
                   help="solver settings when no --config is given")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="histostack", description="Serial-section restacking with atlas deformation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="make a phantom and optionally section, jitter and add noise")
    _common(p)
    _phantom_args(p, "--kind")
    p.add_argument("--deformation", choices=("none", "shear", "random-diffeo"))
    p.add_argument("--section", action="store_true", help="write the section stack")
    p.add_argument("--section-step", type=int, default=1, help="keep every n-th slice")
    p.add_argument("--jitter", action="store_true", help="apply random rigid motions to the sections")
    p.add_argument("--noise", type=float, help="white noise sigma added to the sections")

    p = sub.add_parser("mask", help="foreground mask of a volume")
    _common(p)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--opening", type=int, help="opening ball radius (voxels)")
    p.add_argument("--closing", type=int, help="closing ball radius (voxels)")

    p = sub.add_parser("restack", help="atlas-free rigid restacking")
    _common(p)
    _preset_arg(p, "curvature")
    p.add_argument("--stack", type=Path, required=True, help="stack manifest JSON")

    p = sub.add_parser("map", help="deformable matching of a template to a target")
    _common(p)
    _preset_arg(p, "atlas-recovery")
    p.add_argument("--template", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True, help="volume NRRD or stack manifest JSON")

    p = sub.add_parser("joint", help="joint estimation of section motions and template deformation")
    _common(p)
    _preset_arg(p, "atlas-recovery")
    p.add_argument("--template", type=Path, required=True)
    p.add_argument("--stack", type=Path, required=True)
    p.add_argument("--mode", choices=(ATLAS_INFORMED, ATLAS_FREE))
    p.add_argument("--coarse-init", action="store_true", help="start from a coarse 3D pose search")

    p = sub.add_parser("simulate", help="Monte-Carlo estimator statistics")
    _common(p)
    _preset_arg(p, "noise-trials")
    _phantom_args(p, "--phantom")
    p.add_argument("--trials", type=int)
    p.add_argument("--noise-levels", type=float, nargs="+")
    p.add_argument("--deformation", choices=("none", "shear", "random-diffeo"))
    p.add_argument("--mode", choices=(ATLAS_INFORMED, ATLAS_FREE, "both"), default=ATLAS_INFORMED)

    p = sub.add_parser("labels", help="carry a label volume through a stored deformation")
    _common(p)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--phi", type=Path, required=True, help="directory holding phi_* component files")
    p.add_argument("--prefix", default="phi")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        threads = _threads(args)
        rc = _run_config(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            rc, results = cmd_simulate(args, rc, out, threads)
        else:
            rc, results = COMMANDS[args.command](args, rc, out)
        report = {
            "command": args.command,
            "seed": rc.simulate.seed,
            "config": rc.to_dict(),
            "results": results,
            "outputs": sorted(str(p.relative_to(out)) for p in out.rglob("*")
                              if p.is_file() and p.name not in ("report.json", "config.json")),
        }
        if args.timings:
            report["timings"] = {"total_seconds": time.perf_counter() - t0}
        io.dump_json(out / "config.json", rc.to_dict())
        io.dump_json(out / "report.json", report)
    except DataError as e:
        print(f"histostack: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"histostack: invalid setting: {e}", file=sys.stderr)
        return EXIT_USAGE
    except HistostackError as e:
        print(f"histostack: solver failure: {e}", file=sys.stderr)
        return EXIT_STALL
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "mask": cmd_mask,
    "restack": cmd_restack,
    "map": cmd_map,
    "joint": cmd_joint,
    "labels": cmd_labels,
}


if __name__ == "__main__":
    sys.exit(main())
