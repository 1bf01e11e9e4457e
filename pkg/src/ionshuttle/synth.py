"""Waveform synthesis: constrained least-squares voltage solving, transport
and separation schedules, quadrupole injection, and output-filter modeling."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import linprog, lsq_linear, minimize_scalar
from scipy.signal import lfilter, lfilter_zi

from .constants import Species
from .statics import find_equilibrium, normal_modes
from .trap import TrapModel, dc_expansion

# Moment weights balancing SI magnitudes; configuration, not contract.
DEFAULT_WEIGHTS = {"field": 1e6, "curvature": 1.0, "cubic": 1e-12, "quartic": 1e-18}
DEFAULT_RIDGE = 1e-6          # lambda on ||u||^2
DEFAULT_CONTINUITY = 1e-3     # mu on ||u - previous||^2
KKT_TOL = 1e-6

MAXIMIZE = "maximize"


class SynthesisError(RuntimeError):
    """Waveform synthesis failed (infeasibility, failed split, ...)."""


class ModeMarginError(SynthesisError):
    """A synthesized waveform violates the radial-axial mode margin."""

    def __init__(self, message, violations):
        super().__init__(message)
        self.violations = violations   # list of (sample index, margin in Hz)


@dataclass(frozen=True)
class WellTarget:
    """One requested potential well: position, curvature (via a reference
    species' axial frequency or explicitly), axial field, and quartic term."""

    position: float                     # m
    reference_species: Species
    axial_frequency: float = 0.0        # Hz for the reference species
    quartic: float | str | None = None  # V/m^4 target, MAXIMIZE, or None
    field_offset: float = 0.0           # V/m
    curvature: float | None = None      # V/m^2, overrides axial_frequency
    weights: Mapping[str, float] = field(default_factory=lambda: DEFAULT_WEIGHTS)

    def curvature_target(self) -> float:
        if self.curvature is not None:
            return self.curvature
        s = self.reference_species
        w = 2.0 * np.pi * self.axial_frequency
        return s.mass * w * w / abs(s.charge)


@dataclass
class Waveform:
    """Uniformly sampled per-electrode voltage sequence."""

    sample_period: float
    electrodes: tuple[str, ...]
    samples: np.ndarray               # (T, E) volts
    annotations: list[dict] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return (self.n_samples - 1) * self.sample_period

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_samples) * self.sample_period

    def voltages_at(self, t: float) -> np.ndarray:
        """Linear interpolation between samples (clamped at the ends)."""
        s = np.clip(t / self.sample_period, 0.0, self.n_samples - 1.0)
        k = int(min(np.floor(s), self.n_samples - 2)) if self.n_samples > 1 else 0
        if self.n_samples == 1:
            return self.samples[0]
        f = s - k
        return (1.0 - f) * self.samples[k] + f * self.samples[k + 1]

    def reversed(self) -> "Waveform":
        return Waveform(self.sample_period, self.electrodes,
                        self.samples[::-1].copy(), list(self.annotations[::-1]))

    def validate(self, model: TrapModel, *, atol: float = 1e-9):
        """Assert box and slew invariants; raises SynthesisError on violation."""
        if list(self.electrodes) != model.electrode_names:
            raise SynthesisError("waveform electrodes do not match the model")
        lo, hi = model.voltage_min, model.voltage_max
        if np.any(self.samples < lo - atol) or np.any(self.samples > hi + atol):
            bad = int(np.argmax(np.abs(self.samples)))
            raise SynthesisError(
                f"voltage box violation (extreme {self.samples.flat[bad]:.6g} V)")
        if self.n_samples > 1:
            rates = np.abs(np.diff(self.samples, axis=0)) / self.sample_period
            if np.any(rates > model.slew_limit * (1 + 1e-9) + atol):
                k = int(np.unravel_index(np.argmax(rates), rates.shape)[0])
                raise SynthesisError(
                    f"slew violation at sample {k} "
                    f"({rates.max():.6g} V/s > {model.slew_limit:.6g} V/s)")

    def save(self, path):
        with open(path, "w") as f:
            f.write("# ionshuttle waveform\n")
            f.write(f"sample_period {self.sample_period!r}\n")
            f.write("electrodes " + " ".join(self.electrodes) + "\n")
            f.write("annotations " + json.dumps(self.annotations) + "\n")
            f.write(f"samples {self.n_samples}\n")
            for row in self.samples:
                f.write(" ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path) -> "Waveform":
        with open(path) as f:
            lines = [ln.rstrip("\n") for ln in f]
        if not lines or not lines[0].startswith("# ionshuttle waveform"):
            raise SynthesisError(f"{path}: not a waveform file")
        header = {}
        k = 1
        while not lines[k].startswith("samples "):
            key, _, rest = lines[k].partition(" ")
            header[key] = rest
            k += 1
        n = int(lines[k].split()[1])
        electrodes = tuple(header["electrodes"].split())
        samples = np.array([[float(v) for v in ln.split()]
                            for ln in lines[k + 1:k + 1 + n]])
        if samples.shape != (n, len(electrodes)):
            raise SynthesisError(f"{path}: sample block has wrong shape")
        return cls(float(header["sample_period"]), electrodes, samples,
                   json.loads(header.get("annotations", "[]")))


@dataclass(frozen=True)
class QuadrupolePattern:
    """Dimensionless per-electrode shift pattern, normalized to max |entry| 1."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.max(np.abs(w)) == 0:
            raise ValueError("pattern is all zero")
        object.__setattr__(self, "weights", w / np.max(np.abs(w)))
        if np.count_nonzero(w > 0) < 1 or np.count_nonzero(w < 0) < 1:
            raise ValueError("pattern needs entries of both signs")


# ---- single-sample solver ---------------------------------------------------

_MOMENT_KEYS = ("field", "curvature", "cubic", "quartic")


def _moment_rows(model: TrapModel, target: WellTarget):
    """Per-moment (row, requested, weight) at the target position."""
    m = model.axial_moments(target.position)
    rows = {
        "field": (m["gradient_z"], target.field_offset),
        "curvature": (m["curvature"][2], target.curvature_target()),
        "cubic": (m["d3"], 0.0),
    }
    if isinstance(target.quartic, (int, float)):
        rows["quartic"] = (m["d4"], float(target.quartic))
    return rows, m["d4"]


def solve_sample(model: TrapModel, objectives: Sequence[WellTarget],
                 previous: np.ndarray | None = None,
                 regularization: float = DEFAULT_RIDGE,
                 continuity: float = DEFAULT_CONTINUITY,
                 sample_period: float | None = None):
    """Solve one waveform sample as a box/slew-constrained least-squares
    problem over the electrode voltages.

    Minimizes sum over targets and moments of w * (achieved - requested)^2
    plus regularization * ||u||^2 and continuity * ||u - previous||^2,
    subject to the hardware voltage box and (when previous and sample_period
    are given) the slew limits. A target with quartic == MAXIMIZE triggers a
    second pass that pushes the quartic moment as high as the remaining
    feasibility allows.

    Returns (voltages, report); the report lists achieved vs requested
    moments per target and the scaled KKT residual of the solution.
    """
    ne = len(model.electrodes)
    lb = np.full(ne, model.voltage_min)
    ub = np.full(ne, model.voltage_max)
    if previous is not None and sample_period is not None and np.isfinite(model.slew_limit):
        dv = model.slew_limit * sample_period
        lb = np.maximum(lb, previous - dv)
        ub = np.minimum(ub, previous + dv)
        if np.any(lb > ub):
            raise SynthesisError("infeasible box/slew constraint combination")

    rows, rhs, wts, owners = [], [], [], []
    maximize_rows = []
    for t_idx, target in enumerate(objectives):
        trows, d4_row = _moment_rows(model, target)
        for key, (row, req) in trows.items():
            w = target.weights.get(key, 0.0)
            if w <= 0:
                continue
            rows.append(np.sqrt(w) * row)
            rhs.append(np.sqrt(w) * req)
            wts.append((t_idx, key, row, req, w))
        if target.quartic == MAXIMIZE:
            maximize_rows.append(d4_row)

    A = np.array(rows)
    b = np.array(rhs)
    if regularization > 0:
        A = np.vstack([A, np.sqrt(regularization) * np.eye(ne)])
        b = np.concatenate([b, np.zeros(ne)])
    if previous is not None and continuity > 0:
        A = np.vstack([A, np.sqrt(continuity) * np.eye(ne)])
        b = np.concatenate([b, np.sqrt(continuity) * previous])

    res = lsq_linear(A, b, bounds=(lb, ub), method="bvls", tol=1e-14)
    u = res.x

    if maximize_rows:
        u = _maximize_quartic(wts, u, lb, ub, np.sum(maximize_rows, axis=0))

    # Scaled projected-gradient (KKT) residual of the quadratic cost.
    g = A.T @ (A @ u - b)
    scale = max(np.abs(A.T @ b).max(), 1e-30)
    at_lb = u <= lb + 1e-12
    at_ub = u >= ub - 1e-12
    proj = np.where(at_lb, np.minimum(g, 0.0), np.where(at_ub, np.maximum(g, 0.0), g))
    kkt = float(np.abs(proj).max() / scale)

    report = {
        "kkt_residual": kkt,
        "targets": [
            {
                "position": target.position,
                "moments": {
                    key: {"requested": req, "achieved": float(row @ u), "weight": w}
                    for (ti, key, row, req, w) in wts if ti == t_idx
                },
            }
            for t_idx, target in enumerate(objectives)
        ],
    }
    return u, report


# Minimum residual slack (raw SI units) granted to each moment in the
# maximize-quartic pass; keeps the LP from being pinned to the first pass.
_MAXIMIZE_SLACK = {"field": 1.0, "curvature": 1e4, "cubic": 1e9, "quartic": 1e10}


def _maximize_quartic(wts, u0, lb, ub, c, slack_rel: float = 0.02):
    """Second pass: maximize the quartic moment c @ u while keeping the
    other requested moments within a small slack of their first-pass
    residuals (box and slew bounds still apply)."""
    rows_ub, rhs_ub = [], []
    for (_, key, row, req, _w) in wts:
        r0 = abs(row @ u0 - req)
        slack = r0 + slack_rel * max(abs(req), abs(row @ u0)) + _MAXIMIZE_SLACK.get(key, 0.0)
        rows_ub.append(row)
        rhs_ub.append(req + slack)
        rows_ub.append(-row)
        rhs_ub.append(-(req - slack))
    res = linprog(-c, A_ub=np.array(rows_ub), b_ub=np.array(rhs_ub),
                  bounds=list(zip(lb, ub)), method="highs")
    if not res.success or c @ res.x <= c @ u0:
        return u0
    return res.x


# ---- schedules --------------------------------------------------------------

def minimum_jerk(s: np.ndarray) -> np.ndarray:
    """Position profile 10 s^3 - 15 s^4 + 6 s^5 on s in [0, 1]."""
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def raised_cosine(s: np.ndarray) -> np.ndarray:
    """Smooth 0 -> 1 ramp (1 - cos(pi s)) / 2."""
    return 0.5 * (1.0 - np.cos(np.pi * np.asarray(s)))


def _heaviest(chain: Sequence[Species]) -> Species:
    return max(chain, key=lambda s: s.mass)


def _solve_sequence(model, target_lists, sample_period, annotations=None):
    """Solve a time sequence of objective lists with warm starts and slew
    coupling; returns the (T, E) voltage array."""
    u_prev = None
    out = np.empty((len(target_lists), len(model.electrodes)))
    for k, targets in enumerate(target_lists):
        u_prev, _ = solve_sample(model, targets, previous=u_prev,
                                 sample_period=sample_period)
        out[k] = u_prev
    return out


def check_mode_margin(model: TrapModel, waveform: Waveform,
                      chain: Sequence[Species], margin: float,
                      stray_field=None, n_check: int = 21):
    """Post-hoc check that f_Y2 - f_Z1 >= margin on subsampled spectra.

    Returns the list of (sample index, f_Y2 - f_Z1) violations.
    """
    idx = np.unique(np.linspace(0, waveform.n_samples - 1,
                                min(n_check, waveform.n_samples)).astype(int))
    violations = []
    guess = None
    for k in idx:
        cfg = find_equilibrium(model, waveform.samples[k], chain, stray_field,
                               initial_guess=guess)
        guess = cfg.equilibrium
        sp = normal_modes(model, waveform.samples[k], cfg, stray_field)
        try:
            gap = sp["Y2"] - sp["Z1"]
        except ValueError:
            continue
        if gap < margin:
            violations.append((int(k), float(gap)))
    return violations


def make_transport(model: TrapModel, chain: Sequence[Species], start: float,
                   end: float, duration: float, frequency_floor: float = 1.3e6,
                   mode_margin: float = 380e3, sample_period: float = 1e-6,
                   stray_field=None, *, enforce_margin: bool = True) -> Waveform:
    """Synthesize a transport waveform moving a single well start -> end
    along a minimum-jerk profile.

    The well curvature targets frequency_floor for the heaviest chain
    species. After synthesis the f_Y2 > f_Z1 + mode_margin condition is
    checked on subsampled spectra; violations raise ModeMarginError.
    """
    n = max(2, int(round(duration / sample_period)) + 1)
    s = np.linspace(0.0, 1.0, n)
    zs = start + (end - start) * minimum_jerk(s)
    ref = _heaviest(chain)
    field_offset = 0.0 if stray_field is None else float(np.asarray(stray_field)[2])
    targets = [[WellTarget(z, ref, frequency_floor, field_offset=field_offset)]
               for z in zs]
    samples = _solve_sequence(model, targets, sample_period)
    ann = [{"kind": "transport", "position": float(z)} for z in zs]
    speed = abs(end - start) / duration if duration > 0 else 0.0
    ann[0]["average_speed"] = speed
    wf = Waveform(sample_period, tuple(model.electrode_names), samples, ann)
    wf.validate(model)
    if enforce_margin and len(chain) >= 2:
        violations = check_mode_margin(model, wf, chain, mode_margin, stray_field)
        if violations:
            raise ModeMarginError(
                f"mode margin {mode_margin:.3g} Hz violated at "
                f"{len(violations)} samples", violations)
    return wf


def make_separation(model: TrapModel, chain: Sequence[Species], center: float,
                    final_spacing: float, duration: float,
                    sample_period: float = 1e-6,
                    start_frequency: float = 1.3e6,
                    well_frequency: float = 1.3e6,
                    intermediate_half_spacing: float = 70e-6,
                    stray_field=None) -> Waveform:
    """Synthesize a separation waveform: quartic ramp-up, quadratic sign
    sweep through the critical point, and independent-well extraction.

    Annotations record the achieved axial quadratic and quartic potential
    coefficients (V/m^2-per-2 and V/m^4-per-24 senses: a_pot = curvature/2,
    b_pot = quartic/24) and the critical-point sample index is stored on the
    first annotation.
    """
    ref = _heaviest(chain)
    field_offset = 0.0 if stray_field is None else float(np.asarray(stray_field)[2])
    n = max(4, int(round(duration / sample_period)) + 1)
    n1 = max(2, int(0.25 * n))
    n2 = max(2, int(0.45 * n))
    n3 = n - n1 - n2

    # Phase-1 endpoint: strongest positive quartic while holding the well.
    hold = WellTarget(center, ref, start_frequency, quartic=MAXIMIZE,
                      field_offset=field_offset)
    u_q, rep_q = solve_sample(model, [hold])
    exp_q = dc_expansion(model, u_q, center)
    b4 = exp_q.axial_quartic            # V/m^4 (4th derivative)
    if b4 <= 0:
        raise SynthesisError("phase-1 quartic moment is non-positive")
    c_start = WellTarget(center, ref, start_frequency).curvature_target()
    c_end = -b4 * intermediate_half_spacing ** 2  # wells near +-half_spacing

    targets = []
    # Phase 1: ramp curvature down toward the sweep start, quartic up.
    b_ramp = raised_cosine(np.linspace(0, 1, n1))
    for f in b_ramp:
        targets.append([WellTarget(
            center, ref, curvature=c_start, axial_frequency=0.0,
            quartic=f * b4, field_offset=field_offset)])
    # Phase 2: sweep the quadratic through zero at fixed quartic.
    a_ramp = c_start + (c_end - c_start) * raised_cosine(np.linspace(0, 1, n2))
    for c in a_ramp:
        targets.append([WellTarget(
            center, ref, curvature=float(c), axial_frequency=0.0,
            quartic=b4, field_offset=field_offset)])
    # Phase 3: two independent wells moving to the final spacing.  The two
    # well targets leave the midpoint unconstrained, so keep an explicit
    # barrier target there (negative curvature, relaxing from the sweep
    # endpoint) or the solver may refill the gap with a third well.
    c_barrier_end = -0.05 * abs(c_start)
    s3 = raised_cosine(np.linspace(0, 1, n3 + 1)[1:])
    for f in s3:
        half = intermediate_half_spacing + (final_spacing / 2 - intermediate_half_spacing) * f
        cb = c_end + (c_barrier_end - c_end) * f
        targets.append([
            WellTarget(center - half, ref, well_frequency, field_offset=field_offset),
            WellTarget(center + half, ref, well_frequency, field_offset=field_offset),
            WellTarget(center, ref, curvature=float(cb), axial_frequency=0.0,
                       field_offset=field_offset),
        ])

    samples = _solve_sequence(model, targets, sample_period)
    ann = []
    charge = abs(ref.charge)
    for k in range(n):
        exp = dc_expansion(model, samples[k], center)
        ann.append({
            "kind": "separation",
            "a": charge * exp.curvature[2, 2] / 2.0,   # J/m^2
            "b": charge * exp.axial_quartic / 24.0,    # J/m^4
        })
    # Critical point: smallest |a| within the sweep phase.
    sweep = slice(n1, n1 + n2)
    a_vals = np.array([ann[k]["a"] for k in range(n)])
    crit = n1 + int(np.argmin(np.abs(a_vals[sweep])))
    ann[0]["critical_sample"] = crit
    ann[0]["final_spacing"] = final_spacing
    wf = Waveform(sample_period, tuple(model.electrode_names), samples, ann)
    wf.validate(model)
    if a_vals[-1] >= 0:
        raise SynthesisError("ions failed to split: final quadratic not negative")
    return wf


# ---- quadrupole injection and calibration -----------------------------------

def _window_envelope(length: int, edge_fraction: float = 0.2) -> np.ndarray:
    """Smooth on/off envelope over a sample window (raised-cosine edges)."""
    if length == 1:
        return np.ones(1)
    s = np.linspace(0.0, 1.0, length)
    e = max(edge_fraction, 1.0 / length)
    env = np.ones(length)
    rise = s < e
    fall = s > 1.0 - e
    env[rise] = raised_cosine(s[rise] / e)
    env[fall] = raised_cosine((1.0 - s[fall]) / e)
    return env


def inject_quadrupole(waveform: Waveform, pattern: QuadrupolePattern,
                      alpha: float, window: tuple[int, int] | None = None,
                      model: TrapModel | None = None) -> Waveform:
    """Add alpha * envelope(t) * pattern to the samples in the window."""
    lo, hi = (0, waveform.n_samples) if window is None else window
    env = _window_envelope(hi - lo)
    samples = waveform.samples.copy()
    samples[lo:hi] += alpha * env[:, None] * pattern.weights[None, :]
    ann = [dict(a) for a in waveform.annotations]
    if ann:
        ann[0]["quadrupole_alpha"] = alpha
        ann[0]["quadrupole_window"] = [int(lo), int(hi)]
    out = Waveform(waveform.sample_period, waveform.electrodes, samples, ann)
    if model is not None:
        out.validate(model)
    return out


@dataclass(frozen=True)
class CalibrationResult:
    alpha: float
    objective: float
    flat: bool


def calibrate_quadrupole(objective_fn: Callable[[float], float],
                         alpha_range: tuple[float, float],
                         n_coarse: int = 11) -> CalibrationResult:
    """Minimize objective_fn(alpha) by a coarse grid scan followed by
    golden-section refinement. A flat objective returns the range midpoint
    with the flat flag set."""
    a_lo, a_hi = alpha_range
    grid = np.linspace(a_lo, a_hi, n_coarse)
    vals = np.array([objective_fn(a) for a in grid])
    if not np.all(np.isfinite(vals)):
        raise SynthesisError("objective not evaluable over the scan range")
    spread = vals.max() - vals.min()
    if spread <= 1e-12 * max(1.0, np.abs(vals).max()):
        return CalibrationResult(0.5 * (a_lo + a_hi), float(vals[0]), True)
    k = int(np.argmin(vals))
    lo = grid[max(0, k - 1)]
    hi = grid[min(n_coarse - 1, k + 1)]
    res = minimize_scalar(objective_fn, bounds=(lo, hi), method="bounded",
                          options={"xatol": (a_hi - a_lo) * 1e-4})
    return CalibrationResult(float(res.x), float(res.fun), False)


def apply_filter(waveform: Waveform, cutoff: float | None = None,
                 model: TrapModel | None = None) -> Waveform:
    """First-order low-pass (bilinear discretization) applied per electrode.

    The initial condition is steady state at the first sample, so constant
    waveforms pass through unchanged.
    """
    if cutoff is None:
        if model is None:
            raise ValueError("need an explicit cutoff or a model")
        cutoff = model.filter_cutoff
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    T = waveform.sample_period
    k = 2.0 / T
    wc = 2.0 * np.pi * cutoff
    b = np.array([wc, wc]) / (k + wc)
    a = np.array([1.0, (wc - k) / (wc + k)])
    zi = lfilter_zi(b, a)
    out = np.empty_like(waveform.samples)
    for e in range(waveform.samples.shape[1]):
        x = waveform.samples[:, e]
        out[:, e], _ = lfilter(b, a, x, zi=zi * x[0])
    return Waveform(waveform.sample_period, waveform.electrodes, out,
                    [dict(an) for an in waveform.annotations])
