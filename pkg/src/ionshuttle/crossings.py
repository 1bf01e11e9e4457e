"""Mode tracking across a waveform, avoided-crossing detection, and
diabatic-transition probabilities for two-level sweeps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import linear_sum_assignment, minimize_scalar

from .statics import ModeSpectrum

DEFAULT_WINDOW = 100e3  # Hz, candidate emission window
TIME_RESOLUTION = 1e-9  # s, crossing refinement termination


class TrackingError(RuntimeError):
    """Branch matching between consecutive spectra was ambiguous."""


@dataclass(frozen=True)
class CrossingCandidate:
    branch_a: str
    branch_b: str
    index: int        # sample index of minimal separation
    time: float       # seconds
    separation: float  # Hz at that sample


@dataclass(frozen=True)
class BranchSet:
    """Mode branches matched through time by eigenvector overlap."""

    times: np.ndarray
    labels: tuple[str, ...]            # branch labels (from the first sample)
    frequencies: np.ndarray            # (n_t, n_branches)
    candidates: tuple[CrossingCandidate, ...]

    def branch(self, label: str) -> np.ndarray:
        return self.frequencies[:, self.labels.index(label)]


@dataclass(frozen=True)
class CrossingReport:
    mode_pair: tuple[str, str]
    time: float          # s, minimum-separation instant
    min_gap: float       # Hz
    sweep_rate: float    # Hz/s of the uncoupled difference frequency
    p_diabatic: float


def landau_zener(gap: float, sweep_rate: float) -> float:
    """Diabatic transition probability exp(-gap^2 / (4 * sweep_rate)).

    Both arguments are in plain-frequency units (Hz and Hz/s); gap = 0 or
    an infinitely fast sweep give probability 1.
    """
    if gap < 0:
        raise ValueError("gap must be nonnegative")
    if not sweep_rate > 0:
        raise ValueError("sweep_rate must be positive")
    return float(np.exp(-gap ** 2 / (4.0 * sweep_rate)))


def lz_phonon_exchange(p_diabatic: float, n_a: float, n_b: float) -> tuple[float, float]:
    """Mix mode populations at a crossing: the diabatic branch keeps its
    population, the adiabatic branch swaps them."""
    if not 0.0 <= p_diabatic <= 1.0:
        raise ValueError("p_diabatic must be within [0, 1]")
    if n_a < 0 or n_b < 0:
        raise ValueError("populations must be nonnegative")
    p = p_diabatic
    return p * n_a + (1.0 - p) * n_b, p * n_b + (1.0 - p) * n_a


def simulate_two_level(gap: float, sweep_rate: float, *, span: float = 40.0,
                       rtol: float = 1e-10) -> float:
    """Numerically integrate a linear two-level sweep and return the diabatic
    survival probability.

    The Hamiltonian is -(hbar gap / 2) sigma_x - (hbar eps(t) / 2) sigma_z
    with eps(t) = 2 pi * sweep_rate * t; the state starts in one diabatic
    level far before the crossing. Finite-sweep oscillations are removed by
    averaging the population over the trailing fifth of the sweep.
    """
    v = 2.0 * np.pi * sweep_rate
    s = gap / np.sqrt(v)          # dimensionless coupling
    tau_max = span * max(1.0, s)

    def rhs(tau, y):
        psi = y[:2] + 1j * y[2:]
        dpsi = 0.5j * np.array([s * psi[1] + tau * psi[0],
                                s * psi[0] - tau * psi[1]])
        return np.concatenate([dpsi.real, dpsi.imag])

    tail = np.linspace(0.8 * tau_max, tau_max, 201)
    sol = solve_ivp(rhs, (-tau_max, tau_max), [1.0, 0.0, 0.0, 0.0],
                    t_eval=tail, rtol=rtol, atol=1e-12, method="DOP853")
    p0 = sol.y[0, :] ** 2 + sol.y[2, :] ** 2
    return float(np.mean(p0))


def track_modes(times: Sequence[float], spectra: Sequence[ModeSpectrum],
                window: float = DEFAULT_WINDOW) -> BranchSet:
    """Match mode branches through a time-ordered spectrum sequence.

    Branches are paired between consecutive samples by maximal absolute
    eigenvector overlap (optimal assignment); a matched overlap below 0.5
    raises TrackingError naming the step. Candidate crossings are emitted
    wherever the separation of two branches has a local minimum below the
    window.
    """
    times = np.asarray(times, dtype=float)
    if len(times) != len(spectra) or len(spectra) < 1:
        raise ValueError("times and spectra must have equal nonzero length")
    n_modes = len(spectra[0].frequencies)
    order = np.arange(n_modes)
    freqs = np.empty((len(spectra), n_modes))
    freqs[0] = spectra[0].frequencies
    labels = tuple(spectra[0].labels)

    prev_vecs = spectra[0].eigenvectors
    for k in range(1, len(spectra)):
        overlap = np.abs(prev_vecs.T @ spectra[k].eigenvectors)
        row, col = linear_sum_assignment(-overlap)
        matched = overlap[row, col]
        if np.min(matched) < 0.5:
            bad = int(np.argmin(matched))
            raise TrackingError(
                f"ambiguous branch matching at step {k} "
                f"(t = {times[k]:.6g} s, best overlap {matched[bad]:.3f})")
        perm = np.empty(n_modes, dtype=int)
        perm[row] = col
        order = perm[order]
        freqs[k] = spectra[k].frequencies[order]
        prev_vecs = spectra[k].eigenvectors[:, :]

    candidates = []
    for a in range(n_modes):
        for b in range(a + 1, n_modes):
            sep = np.abs(freqs[:, a] - freqs[:, b])
            for i in range(len(sep)):
                lo = sep[i - 1] if i > 0 else np.inf
                hi = sep[i + 1] if i < len(sep) - 1 else np.inf
                if sep[i] < window and sep[i] <= lo and sep[i] <= hi:
                    candidates.append(CrossingCandidate(
                        labels[a], labels[b], i, float(times[i]), float(sep[i])))
    candidates.sort(key=lambda c: c.time)
    return BranchSet(times, labels, freqs, tuple(candidates))


def crossing_gap(separation_fn: Callable[[float], float], t_lo: float,
                 t_hi: float, mode_pair: tuple[str, str] = ("A", "B"),
                 *, n_fit: int = 101) -> CrossingReport:
    """Refine a crossing candidate on the window [t_lo, t_hi].

    separation_fn(t) must return the (positive) frequency separation of the
    two coupled branches in Hz. The minimum is located by golden-section
    search down to 1 ns; the sweep rate is the slope of the linearized
    uncoupled difference +-sqrt(sep^2 - gap^2) fitted outside the gap region.
    """
    res = minimize_scalar(separation_fn, bounds=(t_lo, t_hi), method="bounded",
                          options={"xatol": TIME_RESOLUTION})
    t_min = float(res.x)
    gap = float(separation_fn(t_min))
    ts = np.linspace(t_lo, t_hi, n_fit)
    sep = np.array([separation_fn(t) for t in ts])
    k = int(np.argmin(sep))
    if sep[k] < gap:
        # polish from the grid minimum if the bounded search missed it
        res2 = minimize_scalar(separation_fn,
                               bounds=(ts[max(0, k - 1)],
                                       ts[min(n_fit - 1, k + 1)]),
                               method="bounded",
                               options={"xatol": TIME_RESOLUTION})
        if res2.fun < gap:
            t_min, gap = float(res2.x), float(res2.fun)
    # allow the sub-resolution slack of the search near a vanishing gap
    if np.min(sep) < 0.999 * gap - 1e-6 * np.max(sep):
        raise ValueError("candidate is not a local minimum of the separation")
    # Hyperbola -> straight line: recover the signed uncoupled difference.
    d2 = np.clip(sep ** 2 - gap ** 2, 0.0, None)
    signed = np.sign(ts - t_min) * np.sqrt(d2)
    mask = sep > max(2.0 * gap, 1e-6)
    if np.count_nonzero(mask) < 2:
        mask = np.ones_like(ts, dtype=bool)
    slope = np.polyfit(ts[mask], signed[mask], 1)[0]
    rate = abs(float(slope))
    p = 1.0 if gap == 0.0 else landau_zener(gap, rate)
    return CrossingReport(tuple(mode_pair), t_min, gap, rate, p)
