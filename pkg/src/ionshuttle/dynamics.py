"""Classical motional dynamics along a waveform.

Integrates the full nonlinear equations of motion for an ion chain riding
a voltage waveform, projects the end state onto normal modes, accumulates
anomalous-heating and Landau-Zener contributions, and provides the
well-occupancy field scan used to calibrate separation symmetry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp, simpson

from .constants import COULOMB_K, PLANCK_H, Species
from .crossings import CrossingReport, landau_zener, lz_phonon_exchange
from .statics import (CrystalConfig, ModeSpectrum, find_equilibrium,
                      mass_weighted_hessian, normal_modes, spectrum_at)
from .synth import Waveform, apply_filter
from .trap import AXIS, TrapModel, chain_energy

DEFAULT_TOLERANCE = 1e-10

try:
    from numba import njit as _njit
except ImportError:                                   # pragma: no cover
    _njit = None


class IntegrationError(RuntimeError):
    """Trajectory integration failed (collision, grid exit, step underflow)."""


@dataclass
class Trajectory:
    """Sampled phase-space history of a chain.

    times : (T,) seconds, monotone.
    positions, velocities : (T, 3N) row-per-sample, xyz-per-ion layout.
    energies : (T,) total (kinetic + potential) energy in joules.
    """

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    energies: np.ndarray
    chain: tuple[Species, ...] = ()

    @property
    def n_ions(self) -> int:
        return self.positions.shape[1] // 3

    def axial(self, k: int | None = None) -> np.ndarray:
        """Axial coordinates, (T, N) or (N,) for sample k."""
        z = self.positions.reshape(self.positions.shape[0], -1, 3)[:, :, AXIS]
        return z if k is None else z[k]


@dataclass(frozen=True)
class HeatingModel:
    """Anomalous-heating anchor: quanta/s at a reference frequency with a
    power-law frequency scaling rate(f) = anchor_rate * (f/f_anchor)^-exponent."""

    anchor_rate: float          # quanta / s
    anchor_frequency: float     # Hz
    exponent: float = 5.8

    def __post_init__(self):
        if self.anchor_rate < 0:
            raise ValueError("anchor_rate must be >= 0")
        if self.exponent < 0:
            raise ValueError("exponent must be >= 0")

    def rate(self, frequency) -> np.ndarray:
        f = np.asarray(frequency, dtype=float)
        if np.any(f <= 0):
            raise ValueError("heating rate requested at nonpositive frequency")
        return self.anchor_rate * (f / self.anchor_frequency) ** (-self.exponent)


@dataclass
class ExcitationReport:
    """Per-mode excitation budget.

    Components are all non-negative mean occupations:
      coherent -- quanta from residual classical motion at the end state;
      thermal  -- quanta accumulated through the heating model;
      exchanged -- initial occupancies propagated through the Landau-Zener
                   exchanges (equals the initial occupancy when there are
                   no crossings).
    totals[label] = coherent + thermal + exchanged.
    """

    labels: tuple[str, ...]
    coherent: dict = field(default_factory=dict)
    thermal: dict = field(default_factory=dict)
    exchanged: dict = field(default_factory=dict)
    per_ion: np.ndarray | None = None

    @property
    def totals(self) -> dict:
        return {lb: self.coherent.get(lb, 0.0) + self.thermal.get(lb, 0.0)
                + self.exchanged.get(lb, 0.0) for lb in self.labels}


# ---- trajectory integration -------------------------------------------------

def _rhs_core(t, y, P, P1, grid, sp, n_samples, qs, pref, masses, E, kqq):
    """Equation-of-motion kernel on pre-contracted moment tables.

    P, P1 : (T, n_intervals, 5|4, 10) piecewise-polynomial coefficients of
    the u-contracted moments (v, a_x, a_y, Voigt curvature, rf g) and their
    z-derivatives, per waveform sample. Written in scalar loops so numba
    can compile it; also runs (slowly) as plain python.
    """
    n = qs.size
    out = np.empty(6 * n)
    out[:3 * n] = y[3 * n:]
    if n_samples == 1:
        k, f = 0, 0.0
    else:
        s = t / sp
        if s < 0.0:
            s = 0.0
        if s > n_samples - 1.0:
            s = n_samples - 1.0
        k = int(s)
        if k > n_samples - 2:
            k = n_samples - 2
        f = s - k
    G = np.empty((n, 3))
    for i in range(n):
        x, yy, z = y[3 * i], y[3 * i + 1], y[3 * i + 2]
        if z < grid[0]:
            z = grid[0]
        if z > grid[-1]:
            z = grid[-1]
        idx = np.searchsorted(grid, z) - 1
        if idx < 0:
            idx = 0
        if idx > len(grid) - 2:
            idx = len(grid) - 2
        tt = z - grid[idx]
        mom = np.empty(10)
        mom1 = np.empty(10)
        for c in range(10):
            acc = 0.0
            for kk in range(5):
                a = P[k, idx, kk, c]
                if n_samples > 1:
                    a = (1.0 - f) * a + f * P[k + 1, idx, kk, c]
                acc = acc * tt + a
            mom[c] = acc
            acc = 0.0
            for kk in range(4):
                a = P1[k, idx, kk, c]
                if n_samples > 1:
                    a = (1.0 - f) * a + f * P1[k + 1, idx, kk, c]
                acc = acc * tt + a
            mom1[c] = acc
        q = qs[i]
        G[i, 0] = q * (mom[1] + mom[3] * x + mom[6] * yy) - q * E[0]
        G[i, 1] = q * (mom[2] + mom[6] * x + mom[4] * yy) - q * E[1]
        G[i, 2] = q * (mom1[0] + mom1[1] * x + mom1[2] * yy
                       + 0.5 * (mom1[3] * x * x + mom1[4] * yy * yy)
                       + mom1[6] * x * yy) - q * E[2]
        gg, gg1 = mom[9], mom1[9]
        G[i, 0] += 2.0 * pref[i] * gg * gg * x
        G[i, 1] += 2.0 * pref[i] * gg * gg * yy
        G[i, 2] += 2.0 * pref[i] * gg * gg1 * (x * x + yy * yy)
    for i in range(n):
        for j in range(i + 1, n):
            dx = y[3 * i] - y[3 * j]
            dy = y[3 * i + 1] - y[3 * j + 1]
            dz = y[3 * i + 2] - y[3 * j + 2]
            rr = np.sqrt(dx * dx + dy * dy + dz * dz)
            c = -kqq[i, j] / rr ** 3
            G[i, 0] += c * dx
            G[i, 1] += c * dy
            G[i, 2] += c * dz
            G[j, 0] -= c * dx
            G[j, 1] -= c * dy
            G[j, 2] -= c * dz
    for i in range(3 * n):
        out[3 * n + i] = -G[i // 3, i % 3] / masses[i]
    return out


_rhs_compiled = _njit(cache=True)(_rhs_core) if _njit is not None else _rhs_core


def _make_rhs(model: TrapModel, wf: Waveform, chain, stray_field, masses):
    """Build a fast equation-of-motion callback for solve_ivp.

    The per-electrode spline tables are pre-contracted with the voltage
    vector of each waveform sample, leaving ten moment columns
    (v, a_x, a_y, six Voigt curvatures, rf g) whose piecewise-cubic
    coefficients are evaluated directly; this avoids the full
    chain_energy bookkeeping in the innermost loop.
    """
    fp = model._fast_pack()
    C = fp["C"][0]                         # (5, n_int, F)
    sl = fp["sl"]
    ne = fp["ne"]
    grid = model.axial_grid
    n_ions = len(chain)
    q, mass, qs = np.array([abs(s.charge) for s in chain]), \
        np.array([s.mass for s in chain]), np.array([s.charge for s in chain])
    pref = q * q * model.rf.amplitude ** 2 / (4.0 * mass * model.rf.omega ** 2)
    E = np.zeros(3) if stray_field is None else np.asarray(stray_field, dtype=float)
    kqq = COULOMB_K * np.outer(qs, qs)

    T = wf.n_samples
    n_int = C.shape[1]
    P = np.empty((T, n_int, 5, 10))
    for k in range(T):
        u = wf.samples[k]
        tmp = np.empty((5, n_int, 10))
        tmp[:, :, 0] = C[:, :, sl["value"]] @ u
        tmp[:, :, 1] = C[:, :, sl["ax"]] @ u
        tmp[:, :, 2] = C[:, :, sl["ay"]] @ u
        tmp[:, :, 3:9] = C[:, :, sl["curv"]].reshape(5, n_int, 6, ne) @ u
        tmp[:, :, 9] = C[:, :, sl["g"]]
        P[k] = tmp.transpose(1, 0, 2)
    P1 = np.ascontiguousarray(
        P[:, :, :4, :] * np.array([4.0, 3.0, 2.0, 1.0])[None, None, :, None])
    sp = float(wf.sample_period)
    masses = np.asarray(masses, dtype=float)

    def rhs(t, y):
        return _rhs_compiled(t, y, P, P1, grid, sp, T, qs, pref, masses,
                             E, kqq)

    return rhs


def integrate(model: TrapModel, waveform: Waveform, chain: Sequence[Species],
              initial=None, stray_field=None,
              tolerance: float = DEFAULT_TOLERANCE, *,
              duration: float | None = None, filtered: bool = False,
              n_eval: int | None = None) -> Trajectory:
    """Integrate m_i r_i'' = -grad_i U(r, t) over the waveform.

    Parameters
    ----------
    initial : optional (positions, velocities) pair of flat 3N arrays;
        defaults to the equilibrium of the first sample at rest.
    duration : integration time; defaults to the waveform duration and is
        required for single-sample (static) waveforms.
    filtered : pass the waveform through the trap's output filter first.
    n_eval : number of stored samples (defaults to the waveform samples,
        or 1001 for static waveforms).

    Uses an adaptive high-order Runge-Kutta pair (DOP853) at the given
    relative tolerance. Raises IntegrationError if an ion leaves the moment
    grid or the step size underflows (e.g. near a collision).
    """
    chain = tuple(chain)
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    wf = apply_filter(waveform, model.filter_cutoff, model) if filtered else waveform
    if duration is None:
        duration = wf.duration
    if duration <= 0:
        raise ValueError("duration must be positive (static waveform needs "
                         "an explicit duration)")

    if initial is None:
        cfg = find_equilibrium(model, wf.samples[0], chain, stray_field)
        x0 = cfg.equilibrium.copy()
        v0 = np.zeros_like(x0)
    else:
        x0 = np.asarray(initial[0], dtype=float).reshape(-1).copy()
        v0 = np.asarray(initial[1], dtype=float).reshape(-1).copy()
    n = len(x0)
    masses = np.repeat([s.mass for s in chain], 3)

    g0, g1 = model.axial_grid[0], model.axial_grid[-1]
    z_idx = AXIS + 3 * np.arange(len(chain))
    rhs = _make_rhs(model, wf, chain, stray_field, masses)

    def escaped(t, y):
        return min(g1 - np.max(y[z_idx]), np.min(y[z_idx]) - g0)
    escaped.terminal = True

    if n_eval is None:
        n_eval = wf.n_samples if wf.n_samples > 1 else 1001
    t_eval = np.linspace(0.0, duration, max(2, n_eval))
    sol = solve_ivp(rhs, (0.0, duration), np.concatenate([x0, v0]),
                    method="DOP853", rtol=tolerance, atol=1e-14,
                    t_eval=t_eval, events=escaped, dense_output=False)
    if sol.status == 1:
        raise IntegrationError(
            f"ion left the model grid at t = {sol.t_events[0][0]:.3e} s")
    if not sol.success:
        raise IntegrationError(f"integration failed: {sol.message}")

    pos = sol.y[:n].T.copy()
    vel = sol.y[n:].T.copy()
    energies = np.empty(len(sol.t))
    for k, t in enumerate(sol.t):
        u = wf.voltages_at(t)
        pot = chain_energy(model, u, chain, pos[k], stray_field, order=0)
        energies[k] = pot + 0.5 * np.sum(masses * vel[k] ** 2)
    return Trajectory(sol.t.copy(), pos, vel, energies, chain)


# ---- mode projection --------------------------------------------------------

def mode_excitation(trajectory_end, config: CrystalConfig,
                    spectrum: ModeSpectrum):
    """Project an end state onto normal modes and return coherent quanta.

    trajectory_end may be a Trajectory (its last sample is used) or a
    (positions, velocities) pair. Returns (quanta, harmonic_ok) where
    quanta[m] = E_m / (h f_m) and harmonic_ok is False when any ion's
    displacement exceeds 10% of the smallest inter-ion spacing.
    """
    if isinstance(trajectory_end, Trajectory):
        r = trajectory_end.positions[-1]
        v = trajectory_end.velocities[-1]
    else:
        r, v = (np.asarray(a, dtype=float).reshape(-1) for a in trajectory_end)
    delta = r - config.equilibrium
    masses = np.repeat([s.mass for s in config.chain], 3)
    sq = np.sqrt(masses)
    q = spectrum.eigenvectors.T @ (sq * delta)      # mass-weighted coords
    p = spectrum.eigenvectors.T @ (sq * v)
    omega = 2.0 * np.pi * spectrum.frequencies
    energies = 0.5 * p ** 2 + 0.5 * omega ** 2 * q ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        quanta = np.where(spectrum.frequencies > 0,
                          energies / (PLANCK_H * spectrum.frequencies), 0.0)

    dmax = np.max(np.linalg.norm(delta.reshape(-1, 3), axis=1))
    zs = np.sort(config.axial_positions)
    spacing = np.min(np.diff(zs)) if len(zs) > 1 else np.inf
    harmonic_ok = bool(dmax <= 0.1 * spacing)
    return quanta, harmonic_ok


# ---- heating and adiabaticity ----------------------------------------------

def heating_integral(times, frequencies, heating: HeatingModel) -> float:
    """Quanta added over a frequency profile: int rate(f(t)) dt.

    Composite Simpson on the sample grid; the profile may contain
    duplicated time points to mark discontinuities (each smooth piece is
    integrated separately, so piecewise-constant profiles are exact).
    """
    t = np.asarray(times, dtype=float)
    f = np.asarray(frequencies, dtype=float)
    if t.shape != f.shape or t.ndim != 1:
        raise ValueError("times and frequencies must be matching 1-d arrays")
    if np.any(f <= 0):
        raise ValueError("frequency profile must be positive")
    rate = heating.rate(f)
    breaks = np.flatnonzero(np.diff(t) == 0.0)
    total = 0.0
    start = 0
    for b in list(breaks) + [len(t) - 1]:
        seg = slice(start, b + 1)
        if b + 1 - start >= 2:
            total += simpson(rate[seg], x=t[seg])
        start = b + 1
    return float(total)


def adiabaticity_profile(times, frequencies):
    """delta(t) = |f'(t) / (2 pi f^2)| on the sample grid.

    Returns (delta, max_delta, t_at_max). Central differences via
    np.gradient; needs at least 3 samples.
    """
    t = np.asarray(times, dtype=float)
    f = np.asarray(frequencies, dtype=float)
    if len(t) < 3:
        raise ValueError("need at least 3 samples for a derivative estimate")
    if np.any(f <= 0):
        raise ValueError("frequency profile must be positive")
    fdot = np.gradient(f, t)
    delta = np.abs(fdot / (2.0 * np.pi * f ** 2))
    k = int(np.argmax(delta))
    return delta, float(delta[k]), float(t[k])


# ---- well occupancy scan ----------------------------------------------------

@dataclass
class FieldScan:
    """Occupancy table of a double-well final sample versus axial field."""

    fields: np.ndarray                      # V/m
    occupancy: list                         # (n_left, n_right) per field
    balanced_field: float | None            # midpoint of the even-split plateau
    well_positions: tuple[float, float]     # axial minima (left, right)


def _axial_minima(model: TrapModel, voltages, charge: float, field: float):
    """Local minima of the axial potential for a charge, as grid indices."""
    u = model.voltage_vector(voltages)
    g = model.axial_grid
    phi = np.sign(charge) * (model._splines()["value"](g) @ u) - \
        np.sign(charge) * field * g
    interior = (phi[1:-1] < phi[:-2]) & (phi[1:-1] <= phi[2:])
    return np.flatnonzero(interior) + 1, phi


def _descend(phi, k):
    """Steepest-descent on a sampled 1-d potential: index of the basin minimum."""
    while True:
        if k > 0 and phi[k - 1] < phi[k]:
            k -= 1
        elif k < len(phi) - 1 and phi[k + 1] < phi[k]:
            k += 1
        else:
            return k


def axial_field_scan(model: TrapModel, voltages, chain: Sequence[Species],
                     field_range, step: float) -> FieldScan:
    """Scan a uniform axial field and report which well each ion settles in.

    For every field the chain equilibrium is re-solved from
    splitting-adapted guesses (every left/right partition preserving the
    axial order); the lowest-energy solution wins and each ion is assigned
    to a well basin by steepest descent on the axial potential.
    """
    chain = tuple(chain)
    n_ions = len(chain)
    fields = np.arange(field_range[0], field_range[1] + 0.5 * step, step)
    charge = chain[0].charge
    minima, _ = _axial_minima(model, voltages, charge, 0.0)
    if len(minima) < 2:
        raise ValueError("final sample is not a double-well configuration")
    # The two deepest/outermost wells straddling the grid midpoint.
    g = model.axial_grid
    z_left = float(g[minima[0]])
    z_right = float(g[minima[-1]])

    occupancy = []
    for field in fields:
        stray = np.array([0.0, 0.0, field])
        best = None
        for k in range(n_ions + 1):
            guess = np.zeros((n_ions, 3))
            guess[:k, AXIS] = z_left + 5e-6 * (np.arange(k) - (k - 1) / 2)
            guess[k:, AXIS] = z_right + 5e-6 * (np.arange(n_ions - k) - (n_ions - k - 1) / 2)
            try:
                cfg = find_equilibrium(model, voltages, chain, stray,
                                       guess.reshape(-1))
            except Exception:
                continue
            if best is None or cfg.energy < best.energy:
                best = cfg
        if best is None:
            raise ValueError(f"no equilibrium found at field {field:g} V/m")
        minima_f, phi = _axial_minima(model, voltages, charge, field)
        n_left = 0
        mid = 0.5 * (z_left + z_right)
        for z in best.axial_positions:
            k0 = int(np.argmin(np.abs(g - z)))
            if g[_descend(phi, k0)] < mid:
                n_left += 1
        occupancy.append((n_left, n_ions - n_left))

    balanced = None
    if n_ions % 2 == 0:
        target = (n_ions // 2, n_ions // 2)
        hits = [f for f, occ in zip(fields, occupancy) if occ == target]
        if hits:
            balanced = float(0.5 * (hits[0] + hits[-1]))
    return FieldScan(fields, occupancy, balanced, (z_left, z_right))


# ---- reorder detection ------------------------------------------------------

def detect_reorder(trajectory: Trajectory, chain: Sequence[Species]):
    """Earliest time at which the axial ion ordering differs from the
    initial chain order, or None."""
    z = trajectory.axial()
    ref = np.argsort(z[0], kind="stable")
    for k in range(z.shape[0]):
        if not np.array_equal(np.argsort(z[k], kind="stable"), ref):
            return float(trajectory.times[k])
    return None


# ---- composition ------------------------------------------------------------

def excitation_report(model: TrapModel, waveform: Waveform,
                      chain: Sequence[Species],
                      heating: HeatingModel | None = None,
                      crossings: Sequence[CrossingReport] = (),
                      thermal_init=None, stray_field=None,
                      tolerance: float = DEFAULT_TOLERANCE, *,
                      heated_labels: tuple[str, ...] = ("Z1", "Z2"),
                      n_spectra: int = 21,
                      initial=None, filtered: bool = False) -> ExcitationReport:
    """Compose coherent, heating and Landau-Zener contributions.

    The coherent part integrates the trajectory and projects the end state
    onto the modes of the voltages actually applied at the end time (with
    ``filtered`` these still lag the last programmed sample by the filter
    time constant; the remaining settle is adiabatic). Heating integrates
    the tracked frequency branches (axial labels by default). Initial
    occupancies are propagated through the crossings in time order via
    lz_phonon_exchange.
    """
    chain = tuple(chain)
    thermal_init = dict(thermal_init or {})
    if filtered:
        waveform = apply_filter(waveform, model.filter_cutoff, model)

    cfg0 = find_equilibrium(model, waveform.samples[0], chain, stray_field)
    spec0 = normal_modes(model, waveform.samples[0], cfg0, stray_field)
    labels = spec0.labels

    if waveform.duration <= 0:
        rep = ExcitationReport(labels)
        rep.coherent = {lb: 0.0 for lb in labels}
        rep.thermal = {lb: 0.0 for lb in labels}
        rep.exchanged = {lb: float(thermal_init.get(lb, 0.0)) for lb in labels}
        rep.per_ion = _per_ion(rep, spec0)
        return rep

    # Coherent: integrate and project on the final-sample spectrum.
    traj = integrate(model, waveform, chain,
                     initial=initial if initial is not None
                     else (cfg0.equilibrium, np.zeros_like(cfg0.equilibrium)),
                     stray_field=stray_field, tolerance=tolerance)
    u_end = waveform.voltages_at(traj.times[-1])
    cfg_end = find_equilibrium(model, u_end, chain, stray_field,
                               initial_guess=traj.positions[-1])
    spec_end = normal_modes(model, u_end, cfg_end, stray_field)
    quanta, _ = mode_excitation(traj, cfg_end, spec_end)
    coherent = {lb: float(q) for lb, q in zip(spec_end.labels, quanta)}

    # Thermal: heating integral along warm-started spectra.
    thermal = {lb: 0.0 for lb in labels}
    if heating is not None:
        heated_labels = tuple(lb for lb in heated_labels if lb in labels)
        ts = np.linspace(0.0, waveform.duration, n_spectra)
        freqs = {lb: [] for lb in heated_labels}
        guess = cfg0.equilibrium
        for t in ts:
            u = waveform.voltages_at(t)
            cfg, sp = spectrum_at(model, u, chain, stray_field, guess=guess)
            guess = cfg.equilibrium
            for lb in heated_labels:
                freqs[lb].append(sp[lb])
        for lb in heated_labels:
            thermal[lb] = heating_integral(ts, np.array(freqs[lb]), heating)

    # Landau-Zener: propagate initial occupancies through the crossings.
    n_run = {lb: float(thermal_init.get(lb, 0.0)) for lb in labels}
    for cr in sorted(crossings, key=lambda c: c.time):
        a, b = cr.mode_pair
        if a in n_run and b in n_run:
            n_run[a], n_run[b] = lz_phonon_exchange(
                cr.p_diabatic, n_run[a], n_run[b])

    rep = ExcitationReport(spec_end.labels)
    rep.coherent = coherent
    rep.thermal = {lb: thermal.get(lb, 0.0) for lb in spec_end.labels}
    rep.exchanged = {lb: n_run.get(lb, 0.0) for lb in spec_end.labels}
    rep.per_ion = _per_ion(rep, spec_end)
    return rep


def _per_ion(report: ExcitationReport, spectrum: ModeSpectrum) -> np.ndarray:
    totals = report.totals
    out = np.zeros(spectrum.n_ions)
    for m, lb in enumerate(spectrum.labels):
        out += spectrum.participations[:, m] * totals[lb]
    return out
