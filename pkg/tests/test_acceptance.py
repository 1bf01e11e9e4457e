"""End-to-end acceptance checks for the whole package.

Each test covers one numbered criterion and prints a single PASS/FAIL line
(run with ``pytest -s`` to see them live).  Oracles are computed
independently of the library code paths they validate, with the key
derived numbers frozen in-line.
"""

import time

import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import ideal_harmonic_model, ideal_quartic_model
from ionshuttle.constants import BE9, CA40, COULOMB_K, ELEMENTARY_CHARGE, HBAR
from ionshuttle.crossings import landau_zener, simulate_two_level
from ionshuttle.dynamics import (HeatingModel, axial_field_scan,
                                 excitation_report, heating_integral,
                                 integrate)
from ionshuttle.sideband import fit_flop, pn_displaced_thermal, pn_thermal, \
    synthesize_flop
from ionshuttle.statics import find_equilibrium, normal_modes, spectrum_at
from ionshuttle.synth import (Waveform, WellTarget, make_transport,
                              solve_sample)

QE = ELEMENTARY_CHARGE


def _verdict(number, ok, detail):
    line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} -- {detail}"
    print(line)
    return line


# ---------------------------------------------------------------- criterion 1

def test_criterion_1_two_ion_analytics():
    """Equal-mass mode ratio sqrt(3) to 1e-9; spacing vs grid search 1e-6."""
    t0 = time.monotonic()
    curvature = 1.636e7
    model = ideal_harmonic_model(curvature=curvature)
    chain = (CA40, CA40)
    cfg = find_equilibrium(model, [1.0], chain)
    spec = normal_modes(model, [1.0], cfg, None)

    axial = sorted(f for f, lb in zip(spec.frequencies, spec.labels)
                   if lb.startswith("Z"))
    ratio_err = abs(axial[1] / axial[0] - np.sqrt(3.0))

    # independent oracle: grid-minimize the two-ion energy over the spacing
    def energy(d):
        return 2.0 * QE * 0.5 * curvature * (d / 2.0) ** 2 \
            + COULOMB_K * QE * QE / d

    grid = np.linspace(1e-6, 30e-6, 20001)
    vals = energy(grid)
    k = int(np.argmin(vals))
    # parabolic refinement around the grid minimum
    a, b, c = vals[k - 1], vals[k], vals[k + 1]
    d_oracle = grid[k] + 0.5 * (grid[1] - grid[0]) * (a - c) / (a - 2 * b + c)

    z = np.sort(cfg.positions[:, 2])
    spacing_err = abs((z[1] - z[0]) - d_oracle) / d_oracle
    dt = time.monotonic() - t0

    ok = ratio_err < 1e-9 and spacing_err < 1e-6 and dt < 1.0
    _verdict(1, ok, f"ratio err {ratio_err:.2e}, spacing err {spacing_err:.2e},"
                    f" {dt:.2f} s")
    assert ratio_err < 1e-9
    assert spacing_err < 1e-6
    assert dt < 1.0


# ---------------------------------------------------------------- criterion 2

def _quartic_oracle(beta):
    """Finite-difference mass-weighted Hessian of Be-Ca in q*beta*z^4."""
    masses = np.array([BE9.mass, CA40.mass])

    def U(z):
        return QE * beta * (z[0] ** 4 + z[1] ** 4) \
            + COULOMB_K * QE * QE / abs(z[1] - z[0])

    r = minimize(U, [-20e-6 * (1e13 / beta) ** 0.2,
                     20e-6 * (1e13 / beta) ** 0.2],
                 method="Nelder-Mead",
                 options=dict(xatol=1e-14, fatol=1e-32, maxiter=40000))
    z = r.x
    h = 1e-9
    H = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            ei = np.zeros(2)
            ej = np.zeros(2)
            ei[i] = h
            ej[j] = h
            H[i, j] = (U(z + ei + ej) - U(z + ei - ej)
                       - U(z - ei + ej) + U(z - ei - ej)) / (4 * h * h)
    Hm = H / np.sqrt(np.outer(masses, masses))
    return np.sqrt(np.linalg.eigvalsh(Hm)) / (2 * np.pi)


def test_criterion_2_oracle_agreement():
    """Library quartic-well modes agree with the independent FD oracle."""
    beta = 4.41377606e14  # scaled so f_Z1 = 0.23 MHz
    f1o, f2o = _quartic_oracle(beta)
    assert abs(f1o - 0.23e6) / 0.23e6 < 1e-5
    assert abs(f2o / f1o - 2.2135574) < 1e-6  # frozen oracle ratio

    model = ideal_quartic_model(beta)
    cfg, spec = spectrum_at(model, [1.0], (BE9, CA40))
    ax = sorted(f for f, lb in zip(spec.frequencies, spec.labels)
                if lb.startswith("Z"))
    assert abs(ax[0] - f1o) / f1o < 1e-3
    assert abs(ax[1] - f2o) / f2o < 1e-3


@pytest.mark.xfail(strict=True,
                   reason="Be-Ca pure-quartic out-of-phase mode comes out at "
                          "0.51 MHz, not the quoted 1.05 MHz; the "
                          "finite-difference oracle confirms the 0.51 MHz "
                          "value, so the quoted number is not reachable "
                          "from the stated conditions.")
def test_criterion_2_critical_point_ratio():
    """f_Z2 for Be-Ca in a pure quartic well scaled to f_Z1 = 0.23 MHz."""
    t0 = time.monotonic()
    beta = 4.41377606e14
    model = ideal_quartic_model(beta)
    cfg, spec = spectrum_at(model, [1.0], (BE9, CA40))
    ax = sorted(f for f, lb in zip(spec.frequencies, spec.labels)
                if lb.startswith("Z"))
    # one fixed-point polish of the quartic coefficient onto f_Z1 = 0.23 MHz
    beta *= (0.23e6 / ax[0]) ** (10.0 / 3.0)
    model = ideal_quartic_model(beta)
    cfg, spec = spectrum_at(model, [1.0], (BE9, CA40))
    ax = sorted(f for f, lb in zip(spec.frequencies, spec.labels)
                if lb.startswith("Z"))
    dt = time.monotonic() - t0

    err = abs(ax[1] - 1.05e6) / 1.05e6
    ok = err < 0.05 and dt < 1.0
    _verdict(2, ok, f"f_Z1 {ax[0] / 1e6:.4f} MHz, f_Z2 {ax[1] / 1e6:.4f} MHz,"
                    f" err vs 1.05 MHz {err * 100:.1f}%")
    assert dt < 1.0
    assert err < 0.05


# ---------------------------------------------------------------- criterion 3

def test_criterion_3_landau_zener():
    """Formula vs direct two-level integration, and the 23 kHz anchor."""
    t0 = time.monotonic()
    rate = 3.708e8  # Hz/s
    gaps = np.array([3.86e3, 8e3, 12e3, 18e3, 23e3, 30e3, 40e3, 50e3, 66.7e3])
    worst = 0.0
    for gap in gaps:
        p_formula = landau_zener(gap, rate)
        p_numeric = simulate_two_level(gap, rate)
        worst = max(worst, abs(p_formula - p_numeric))
    p_span = [landau_zener(gaps[-1], rate), landau_zener(gaps[0], rate)]
    anchor = landau_zener(23e3, rate)
    dt = time.monotonic() - t0

    ok = worst <= 0.02 and abs(anchor - 0.70) < 5e-3 \
        and p_span[0] <= 0.05 and p_span[1] >= 0.99 and dt < 10.0
    _verdict(3, ok, f"max |formula - numeric| {worst:.4f}, anchor P_D "
                    f"{anchor:.4f}, {dt:.1f} s")
    assert worst <= 0.02
    assert abs(anchor - 0.70) < 5e-3
    assert p_span[0] <= 0.05 and p_span[1] >= 0.99
    assert dt < 10.0


# ---------------------------------------------------------------- criterion 4

def test_criterion_4_qp_contract(paper_model):
    """KKT residual, curvature accuracy and independent box/slew checks."""
    t0 = time.monotonic()
    rng = np.random.default_rng(42)
    m = paper_model
    kkt_worst = 0.0
    curv_worst = 0.0
    n_interior = 0
    for _ in range(100):
        pos = rng.uniform(-800e-6, 800e-6)
        freq = rng.uniform(0.9e6, 2.0e6)
        target = WellTarget(pos, CA40, freq)
        u, report = solve_sample(m, [target])
        kkt_worst = max(kkt_worst, report["kkt_residual"])
        # independent box validation
        assert np.all(u >= m.voltage_min - 1e-9)
        assert np.all(u <= m.voltage_max + 1e-9)
        moments = report["targets"][0]["moments"]["curvature"]
        if np.all(np.abs(u) < 9.999):  # no electrode clipped: feasible
            n_interior += 1
            rel = abs(moments["achieved"] - moments["requested"]) \
                / abs(moments["requested"])
            curv_worst = max(curv_worst, rel)

    # slew check on a real waveform, independently of Waveform.validate
    wf = make_transport(m, (CA40,), -300e-6, -200e-6, 60e-6,
                        sample_period=0.9e-6)
    dv = np.abs(np.diff(wf.samples, axis=0)) / wf.sample_period
    assert np.all(dv <= m.slew_limit + 1e-6)
    assert np.all(wf.samples >= m.voltage_min - 1e-9)
    assert np.all(wf.samples <= m.voltage_max + 1e-9)
    dt = time.monotonic() - t0

    ok = kkt_worst < 1e-6 and curv_worst < 1e-3 and dt < 30.0
    _verdict(4, ok, f"max KKT {kkt_worst:.2e}, max curvature err "
                    f"{curv_worst:.2e} over {n_interior} interior wells,"
                    f" {dt:.1f} s")
    assert kkt_worst < 1e-6
    assert n_interior >= 50
    assert curv_worst < 1e-3
    assert dt < 30.0


# ---------------------------------------------------------------- criterion 5

def test_criterion_5_heating_anchor():
    """2600 quanta at constant 284 kHz for 1 s; ramps match closed forms."""
    hm = HeatingModel(2600.0, 284e3)
    n_const = heating_integral([0.0, 1.0], [284e3, 284e3], hm)
    err_const = abs(n_const - 2600.0)

    # linear ramp f0 -> f1 over T: closed form of A (fa/f)^p dt
    f0, f1, T, p = 200e3, 600e3, 0.5, hm.exponent
    ts = np.linspace(0.0, T, 20001)
    fs = f0 + (f1 - f0) * ts / T
    n_lib = heating_integral(ts, fs, hm)
    slope = (f1 - f0) / T
    n_exact = 2600.0 * 284e3 ** p * (f1 ** (1 - p) - f0 ** (1 - p)) \
        / (slope * (1 - p))
    err_ramp = abs(n_lib - n_exact) / n_exact

    # piecewise: constant then ramp, with a duplicated breakpoint
    ts2 = np.concatenate([np.linspace(0, 0.2, 5001),
                          np.linspace(0.2, 0.7, 20001)])
    fs2 = np.concatenate([np.full(5001, f0),
                          f0 + (f1 - f0) * (np.linspace(0.2, 0.7, 20001)
                                            - 0.2) / T])
    n_lib2 = heating_integral(ts2, fs2, hm)
    n_exact2 = 2600.0 * (284e3 / f0) ** p * 0.2 + n_exact
    err_pw = abs(n_lib2 - n_exact2) / n_exact2

    ok = err_const == 0.0 and err_ramp < 1e-9 and err_pw < 1e-9
    _verdict(5, ok, f"anchor err {err_const:.1e}, ramp err {err_ramp:.1e},"
                    f" piecewise err {err_pw:.1e}")
    assert err_const == 0.0
    assert err_ramp < 1e-9
    assert err_pw < 1e-9


# ---------------------------------------------------------------- criterion 6

def test_criterion_6_adiabatic_transport(paper_model):
    """Slow 442.5 um transport is cold; short-time scan is oscillatory."""
    t0 = time.monotonic()
    m = paper_model
    chain = (BE9, CA40, BE9)
    wf = make_transport(m, chain, -442.5e-6, 0.0, 200e-6,
                        sample_period=0.9e-6)
    rep = excitation_report(m, wf, chain, filtered=True)
    coh_axial = max(rep.coherent["Z1"], rep.coherent["Z2"])

    durations = np.arange(100e-6, 104.1e-6, 0.25e-6)
    scan = []
    for T in durations:
        wfs = make_transport(m, chain, -442.5e-6, 0.0, T,
                             sample_period=0.9e-6 * T / 200e-6)
        r = excitation_report(m, wfs, chain, filtered=True)
        scan.append(max(r.coherent["Z1"], r.coherent["Z2"]))
    scan = np.asarray(scan)
    d = np.diff(scan)
    non_monotone = np.any(d > 0) and np.any(d < 0)
    dt = time.monotonic() - t0

    ok = coh_axial < 0.1 and non_monotone and dt < 120.0
    _verdict(6, ok, f"200 us axial coherent {coh_axial:.2e} quanta, "
                    f"short-time scan range [{scan.min():.3f},"
                    f" {scan.max():.3f}] non-monotone={non_monotone},"
                    f" {dt:.0f} s")
    assert coh_axial < 0.1
    assert non_monotone
    assert dt < 120.0


# ---------------------------------------------------------------- criterion 7

def test_criterion_7_integrator():
    """Energy drift over 10^4 periods; forced oscillator vs closed form."""
    t0 = time.monotonic()
    curvature = 1.636e7
    model = ideal_harmonic_model(curvature=curvature)
    f0 = np.sqrt(QE * curvature / CA40.mass) / (2 * np.pi)
    n_periods = 1e4
    duration = n_periods / f0
    wf = Waveform(duration / 100.0, ("well",), np.ones((101, 1)))
    x0 = np.array([[0.0, 0.0, 2e-6]])
    traj = integrate(model, wf, (CA40,), initial=(x0, np.zeros((1, 3))),
                     tolerance=1e-13, n_eval=200)
    drift = np.max(np.abs(traj.energies - traj.energies[0])) \
        / abs(traj.energies[0])

    # forced oscillator: constant axial field E, start at the unforced
    # equilibrium -> z(t) = d (1 - cos w t) with d = qE/(m w^2)
    E = 5.0
    d = QE * E / (CA40.mass * (2 * np.pi * f0) ** 2)
    T_half = 0.5 / f0
    wf2 = Waveform(T_half / 100.0, ("well",), np.ones((101, 1)))
    traj2 = integrate(model, wf2, (CA40,), initial=(np.zeros((1, 3)),
                                                    np.zeros((1, 3))),
                      stray_field=(0.0, 0.0, E), tolerance=1e-12, n_eval=50)
    z_end = traj2.positions[-1, 2]
    forced_err = abs(z_end - 2 * d) / (2 * d)
    dt = time.monotonic() - t0

    ok = drift < 1e-9 and forced_err < 1e-3
    _verdict(7, ok, f"energy drift {drift:.2e} over 1e4 periods, forced "
                    f"oscillator err {forced_err:.2e}, {dt:.0f} s")
    assert drift < 1e-9
    assert forced_err < 1e-3


# ---------------------------------------------------------------- criterion 8

def test_criterion_8_separation_scan(paper_model):
    """Well-assignment scans step through every partition in order."""
    t0 = time.monotonic()
    m = paper_model

    u2, _ = solve_sample(m, [WellTarget(-120e-6, CA40, 1.3e6),
                             WellTarget(120e-6, CA40, 1.3e6)])
    scan2 = axial_field_scan(m, u2, (CA40, CA40), (-4.0, 4.0), 0.15)
    seen2 = [scan2.occupancy[0]]
    for occ in scan2.occupancy[1:]:
        if occ != seen2[-1]:
            seen2.append(occ)
    plateau = scan2.occupancy.count((1, 1))

    u4, _ = solve_sample(m, [WellTarget(-240e-6, CA40, 1.0e6),
                             WellTarget(240e-6, CA40, 1.0e6)])
    scan4 = axial_field_scan(m, u4, (BE9, CA40, CA40, BE9), (-30.0, 30.0),
                             1.0)
    n_left = [occ[0] for occ in scan4.occupancy]
    monotone4 = all(a >= b for a, b in zip(n_left, n_left[1:])) \
        or all(a <= b for a, b in zip(n_left, n_left[1:]))
    partitions4 = sorted(set(scan4.occupancy))
    dt = time.monotonic() - t0

    ok = seen2 in ([(2, 0), (1, 1), (0, 2)], [(0, 2), (1, 1), (2, 0)]) \
        and plateau >= 3 and monotone4 \
        and partitions4 == [(0, 4), (1, 3), (2, 2), (3, 1), (4, 0)] \
        and dt < 60.0
    _verdict(8, ok, f"2-ion sequence {seen2} with (1,1) plateau of "
                    f"{plateau} samples; 4-ion partitions {partitions4},"
                    f" monotone={monotone4}, {dt:.0f} s")
    assert seen2 in ([(2, 0), (1, 1), (0, 2)], [(0, 2), (1, 1), (2, 0)])
    assert plateau >= 3
    assert monotone4
    assert partitions4 == [(0, 4), (1, 3), (2, 2), (3, 1), (4, 0)]
    assert dt < 60.0


# ---------------------------------------------------------------- criterion 9

def test_criterion_9_sideband_fit():
    """Monte-Carlo thermometry recovery and p_n limiting cases."""
    t0 = time.monotonic()
    truth = 1.40
    pulse_times = np.linspace(0.0, 800e-6, 80)
    n_ok = 0
    for rep in range(100):
        rng = np.random.default_rng(1000 + rep)
        ds = synthesize_flop(rng, pulse_times, truth, 0.0, 2 * np.pi * 1e5,
                             300.0, 0.06, 250, kind="thermal")
        fit = fit_flop(ds, kind="thermal")
        if abs(fit.n_thermal - truth) <= 0.1 * truth:
            n_ok += 1

    n = np.arange(40)
    red_thermal = np.max(np.abs(
        np.array([pn_displaced_thermal(1.7, 0.0, int(k)) for k in n])
        - pn_thermal(1.7, n)))
    red_poisson = np.max(np.abs(
        np.array([pn_displaced_thermal(0.0, 2.3, int(k)) for k in n])
        - pn_poisson(2.3, n)))
    dt = time.monotonic() - t0

    ok = n_ok >= 90 and red_thermal < 1e-12 and red_poisson < 1e-12 \
        and dt < 120.0
    _verdict(9, ok, f"{n_ok}/100 fits within 10%, thermal reduction "
                    f"{red_thermal:.1e}, Poisson reduction {red_poisson:.1e},"
                    f" {dt:.0f} s")
    assert n_ok >= 90
    assert red_thermal < 1e-12
    assert red_poisson < 1e-12
    assert dt < 120.0


# --------------------------------------------------------------- criterion 10

def test_criterion_10_order_of_magnitude(paper_model):
    """Decade-level sanity on the bundled trap model (absolute published
    numbers are out of desk-scale reach and deliberately not asserted)."""
    m = paper_model
    u, _ = solve_sample(m, [WellTarget(0.0, CA40, 1.3e6)])
    cfg, spec = spectrum_at(m, u, (CA40, CA40))
    z = np.sort(cfg.positions[:, 2])
    spacing = z[1] - z[0]
    f_low = spec.frequencies.min()
    f_high = spec.frequencies.max()
    rate_1mhz = HeatingModel(2600.0, 284e3).rate(1e6)

    ok = (1e-6 < spacing < 1e-5) and (1e5 < f_low < 1e7) \
        and (1e5 < f_high < 1e8) and (1e-1 < rate_1mhz < 1e2)
    _verdict(10, ok, f"spacing {spacing * 1e6:.1f} um, modes "
                     f"[{f_low / 1e6:.2f}, {f_high / 1e6:.2f}] MHz, "
                     f"heating at 1 MHz {rate_1mhz:.1f} quanta/s")
    assert 1e-6 < spacing < 1e-5
    assert 1e5 < f_low < 1e7
    assert 1e5 < f_high < 1e8
    assert 1e-1 < rate_1mhz < 1e2
