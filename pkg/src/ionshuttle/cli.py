"""Command-line interface: reproducible synthesis, analysis and fitting runs.

Subcommands: modes, synth, simulate, fit, scan-alpha, validate. Every
command writes its primary output as plain structured text plus a JSON
RunManifest recording input digests, configuration, seed and version;
rerunning with identical inputs and seed reproduces outputs byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import __version__
from .constants import get_species
from .crossings import crossing_gap, track_modes
from .dynamics import HeatingModel, axial_field_scan, excitation_report
from .sideband import FlopDataset, fit_flop
from .statics import EquilibriumError, find_equilibrium, normal_modes
from .synth import (QuadrupolePattern, Waveform, inject_quadrupole,
                    make_separation, make_transport)
from .trap import load_trap_model


@dataclass
class RunManifest:
    """Provenance record written next to every command output."""

    command: str
    inputs: dict = field(default_factory=dict)   # path -> sha256
    config: dict = field(default_factory=dict)
    seed: int = 0
    version: str = __version__
    wall_clock: float = 0.0

    def write(self, path):
        _atomic_write(path, json.dumps(asdict(self), indent=2,
                                       sort_keys=True) + "\n")

    @staticmethod
    def verify(path) -> bool:
        """Recompute the input digests of a stored manifest."""
        with open(path) as f:
            doc = json.load(f)
        return all(_sha256(p) == d for p, d in doc["inputs"].items())


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _atomic_write(path, text: str):
    path = str(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _parse_chain(spec: str):
    return tuple(get_species(name.strip()) for name in spec.split(","))


def _parse_range(spec: str, n_default: int = 11):
    parts = spec.split(":")
    if len(parts) not in (2, 3):
        raise ValueError(f"range {spec!r} is not of the form lo:hi[:n]")
    lo, hi = float(parts[0]), float(parts[1])
    n = int(parts[2]) if len(parts) == 3 else n_default
    if n < 2:
        raise ValueError("range needs at least 2 points")
    return lo, hi, n


def _spectrum_sequence(model, waveform, chain, stray_field, stride=1,
                       skip_failures=False):
    times, spectra = [], []
    guess = None
    for k in range(0, waveform.n_samples, stride):
        u = waveform.samples[k]
        try:
            cfg = find_equilibrium(model, u, chain, stray_field,
                                   initial_guess=guess)
        except EquilibriumError:
            if skip_failures:
                guess = None
                continue
            raise
        guess = cfg.equilibrium
        spectra.append(normal_modes(model, u, cfg, stray_field))
        times.append(k * waveform.sample_period)
    return np.array(times), spectra


def _refined_crossings(branches):
    """Refine BranchSet candidates into CrossingReports via spline fits."""
    reports = []
    splines = {lb: CubicSpline(branches.times, branches.branch(lb))
               for lb in branches.labels}
    n = len(branches.times)
    for cand in branches.candidates:
        lo = branches.times[max(0, cand.index - 2)]
        hi = branches.times[min(n - 1, cand.index + 2)]
        if hi <= lo:
            continue
        fa, fb = splines[cand.branch_a], splines[cand.branch_b]
        reports.append(crossing_gap(
            lambda t: float(abs(fa(t) - fb(t))), lo, hi,
            (cand.branch_a, cand.branch_b)))
    return reports


# ---- subcommands ------------------------------------------------------------

def cmd_modes(args) -> int:
    model = load_trap_model(args.trap)
    chain = _parse_chain(args.chain)
    stray = None
    if args.stray_field:
        stray = np.array([0.0, 0.0, float(args.stray_field)])
    inputs = {args.trap: _sha256(args.trap)}
    if args.waveform:
        wf = Waveform.load(args.waveform)
        inputs[args.waveform] = _sha256(args.waveform)
    else:
        volts = [float(x) for x in args.voltages.split(",")]
        wf = Waveform(1.0, tuple(model.electrode_names),
                      np.asarray(volts)[None, :], [])
    times, spectra = _spectrum_sequence(model, wf, chain, stray,
                                        stride=args.stride)
    lines = ["# time_s label frequency_hz " +
             " ".join(f"part_{s.name}{i}" for i, s in enumerate(chain))]
    for t, sp in zip(times, spectra):
        for m, lb in enumerate(sp.labels):
            parts = " ".join("%.6f" % p for p in sp.participations[:, m])
            lines.append(f"{t:.9e} {lb} {sp.frequencies[m]:.6f} {parts}")
    if args.crossings and len(spectra) > 2:
        branches = track_modes(times, spectra)
        for rep in _refined_crossings(branches):
            lines.append(
                f"# crossing {rep.mode_pair[0]}/{rep.mode_pair[1]} "
                f"t={rep.time:.9e} gap_hz={rep.min_gap:.3f} "
                f"rate_hz_per_s={rep.sweep_rate:.6e} p_d={rep.p_diabatic:.6f}")
    _atomic_write(args.out, "\n".join(lines) + "\n")
    _manifest(args, inputs).write(args.out + ".manifest.json")
    return 0


def cmd_synth(args) -> int:
    model = load_trap_model(args.trap)
    chain = _parse_chain(args.chain)
    stray = None
    if args.stray_field:
        stray = np.array([0.0, 0.0, float(args.stray_field)])
    if args.kind == "transport":
        wf = make_transport(model, chain, args.start, args.end,
                            args.duration, sample_period=args.sample_period,
                            stray_field=stray)
    else:
        wf = make_separation(model, chain, args.center, args.final_spacing,
                             args.duration, sample_period=args.sample_period,
                             stray_field=stray)
    if args.alpha:
        pattern = QuadrupolePattern(
            np.array([float(x) for x in args.pattern.split(",")]))
        wf = inject_quadrupole(wf, pattern, float(args.alpha), model=model)
    wf.validate(model)
    tmp = args.out + ".tmp"
    wf.save(tmp)
    os.replace(tmp, args.out)
    _manifest(args, {args.trap: _sha256(args.trap)}).write(
        args.out + ".manifest.json")
    return 0


def _simulate_one(task):
    """One (name, waveform) excitation report; module-level for pickling."""
    model, name, wf, chain, heating, stray, filtered = task
    rep = excitation_report(model, wf, chain, heating=heating,
                            stray_field=stray, filtered=filtered)
    lines = []
    for lb in rep.labels:
        lines.append(f"{name} {lb} coherent {rep.coherent[lb]:.9e}")
        lines.append(f"{name} {lb} thermal {rep.thermal[lb]:.9e}")
        lines.append(f"{name} {lb} total {rep.totals[lb]:.9e}")
    return lines


def cmd_simulate(args) -> int:
    model = load_trap_model(args.trap)
    chain = _parse_chain(args.chain)
    wf = Waveform.load(args.waveform)
    heating = None
    if args.heating:
        parts = [float(x) for x in args.heating.split(":")]
        heating = HeatingModel(*parts)
    stray = None
    if args.stray_field:
        stray = np.array([0.0, 0.0, float(args.stray_field)])
    lines = ["# sequence mode component quanta"]
    if args.scan and args.scan.startswith("field"):
        lo, hi, n = _parse_range(args.scan.split()[1])
        scan = axial_field_scan(model, wf.samples[-1], chain, (lo, hi),
                                (hi - lo) / (n - 1))
        lines = ["# field_v_per_m n_left n_right"]
        for fval, occ in zip(scan.fields, scan.occupancy):
            lines.append(f"{fval:.6f} {occ[0]} {occ[1]}")
        if scan.balanced_field is not None:
            lines.append(f"# balanced_field {scan.balanced_field:.6f}")
    else:
        tasks = []
        if args.scan:
            lo, hi, n = _parse_range(args.scan.split()[1])
            for T in np.linspace(lo, hi, n):
                scaled = Waveform(wf.sample_period * T / wf.duration,
                                  wf.electrodes, wf.samples,
                                  wf.annotations)
                tasks.append((model, f"duration_{T:.6e}", scaled, chain,
                              heating, stray, args.filtered))
        else:
            tasks.append((model, "waveform", wf, chain, heating, stray,
                          args.filtered))
        if args.workers > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=args.workers) as pool:
                for chunk in pool.map(_simulate_one, tasks):
                    lines.extend(chunk)
        else:
            for task in tasks:
                lines.extend(_simulate_one(task))
    _atomic_write(args.out, "\n".join(lines) + "\n")
    _manifest(args, {args.trap: _sha256(args.trap),
                     args.waveform: _sha256(args.waveform)}).write(
        args.out + ".manifest.json")
    return 0


def cmd_fit(args) -> int:
    ds = FlopDataset.load(args.dataset)
    result = fit_flop(ds, args.kind)
    print(f"nbar = {result.n_thermal:.4f} +- {result.sigma_n_thermal:.4f}")
    lines = [f"kind {result.kind}",
             f"n_thermal {result.n_thermal:.9e}",
             f"coherent_mag2 {result.coherent_mag2:.9e}",
             f"rabi_rad_per_s {result.rabi:.9e}",
             f"decay_per_s {result.decay:.9e}",
             f"residual {result.residual:.9e}",
             f"sigma_n_thermal {result.sigma_n_thermal:.9e}"]
    for row in result.covariance:
        lines.append("cov " + " ".join("%.9e" % x for x in row))
    _atomic_write(args.out, "\n".join(lines) + "\n")
    _manifest(args, {args.dataset: _sha256(args.dataset)}).write(
        args.out + ".manifest.json")
    return 0


def cmd_scan_alpha(args) -> int:
    model = load_trap_model(args.trap)
    chain = _parse_chain(args.chain)
    wf = Waveform.load(args.waveform)
    pattern = QuadrupolePattern(
        np.array([float(x) for x in args.pattern.split(",")]))
    lo, hi, n = _parse_range(args.alpha)

    def min_gap_of(alpha: float) -> float:
        shifted = inject_quadrupole(wf, pattern, alpha)
        times, spectra = _spectrum_sequence(model, shifted, chain, None,
                                            stride=args.stride,
                                            skip_failures=True)
        branches = track_modes(times, spectra)
        if not branches.candidates:
            return np.inf
        return min(c.separation for c in branches.candidates)

    alphas = np.linspace(lo, hi, n)
    lines = ["# alpha_v min_gap_hz"]
    vals = [min_gap_of(a) for a in alphas]
    for a, v in zip(alphas, vals):
        lines.append(f"{a:.9e} {v:.6f}")
    k = int(np.argmin(vals))
    lines.append(f"# alpha_star {alphas[k]:.9e} objective {vals[k]:.6f}")
    _atomic_write(args.out, "\n".join(lines) + "\n")
    _manifest(args, {args.trap: _sha256(args.trap),
                     args.waveform: _sha256(args.waveform)}).write(
        args.out + ".manifest.json")
    return 0


def cmd_validate(args) -> int:
    model = load_trap_model(args.trap)
    wf = Waveform.load(args.waveform)
    wf.validate(model)
    print(f"{args.waveform}: OK "
          f"({wf.n_samples} samples, {wf.duration * 1e6:.1f} us)")
    return 0


def _manifest(args, inputs) -> RunManifest:
    config = {k: v for k, v in vars(args).items()
              if k not in ("func", "trap", "out", "seed", "workers",
                           "command", "_t0")
              and v is not None}
    return RunManifest(command=args.command, inputs=inputs, config=config,
                       seed=args.seed, wall_clock=time.time() - args._t0)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ionshuttle",
        description="Waveform design and motional analysis for mixed-species "
                    "ion shuttling")
    p.add_argument("--trap", help="trap model YAML file")
    p.add_argument("--out", help="output file path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("modes", help="per-sample mode spectrum dump")
    m.add_argument("--waveform")
    m.add_argument("--voltages", help="comma-separated volts, electrode order")
    m.add_argument("--chain", required=True)
    m.add_argument("--crossings", action="store_true")
    m.add_argument("--stray-field", type=float, default=0.0)
    m.add_argument("--stride", type=int, default=1)
    m.set_defaults(func=cmd_modes)

    s = sub.add_parser("synth", help="synthesize a waveform")
    s.add_argument("--kind", required=True, choices=["transport", "separate"])
    s.add_argument("--chain", required=True)
    s.add_argument("--start", type=float)
    s.add_argument("--end", type=float)
    s.add_argument("--center", type=float)
    s.add_argument("--duration", type=float, required=True)
    s.add_argument("--final-spacing", type=float, default=865e-6)
    s.add_argument("--sample-period", type=float, default=1e-6)
    s.add_argument("--stray-field", type=float, default=0.0)
    s.add_argument("--alpha", type=float)
    s.add_argument("--pattern", help="comma-separated quadrupole weights")
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("simulate", help="excitation report for a waveform")
    c.add_argument("--waveform", required=True)
    c.add_argument("--chain", required=True)
    c.add_argument("--heating", help="rate:frequency[:exponent]")
    c.add_argument("--stray-field", type=float, default=0.0)
    c.add_argument("--filtered", action="store_true")
    c.add_argument("--scan", help="'duration lo:hi:n' or 'field lo:hi:n'")
    c.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a sideband flop dataset")
    f.add_argument("--dataset", required=True)
    f.add_argument("--kind", default="thermal",
                   choices=["thermal", "displaced"])
    f.set_defaults(func=cmd_fit)

    a = sub.add_parser("scan-alpha", help="scan quadrupole scaling factor")
    a.add_argument("--waveform", required=True)
    a.add_argument("--chain", required=True)
    a.add_argument("--pattern", required=True)
    a.add_argument("--alpha", required=True, help="lo:hi:n")
    a.add_argument("--stride", type=int, default=1)
    a.set_defaults(func=cmd_scan_alpha)

    v = sub.add_parser("validate", help="check a waveform against trap limits")
    v.add_argument("--waveform", required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._t0 = time.time()
    needs_trap = args.command in ("modes", "synth", "simulate", "scan-alpha",
                                  "validate")
    if needs_trap and not args.trap:
        parser.error(f"{args.command} requires --trap")
    if args.command in ("modes", "synth", "simulate", "fit", "scan-alpha") \
            and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"ionshuttle {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
