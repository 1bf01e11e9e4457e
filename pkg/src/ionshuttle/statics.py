"""Equilibrium configurations and normal-mode spectra of ion crystals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .constants import COULOMB_K, Species
from .trap import AXIS, TrapModel, chain_energy

GRAD_TOL = 1e-27  # N, convergence threshold on the force norm
MAX_ITER = 200


class EquilibriumError(RuntimeError):
    """Equilibrium search failed to converge."""


class UnstableEquilibriumError(EquilibriumError):
    """The converged stationary point is a saddle or unstable."""


@dataclass(frozen=True)
class CrystalConfig:
    """A static ion-crystal configuration at a local energy minimum."""

    chain: tuple[Species, ...]
    equilibrium: np.ndarray   # flat (3N,) meters
    energy: float             # joules

    @property
    def positions(self) -> np.ndarray:
        return self.equilibrium.reshape(-1, 3)

    @property
    def axial_positions(self) -> np.ndarray:
        return self.positions[:, AXIS]

    @property
    def ordered(self) -> bool:
        """True when the stored axial ordering matches the chain order."""
        return bool(np.all(np.diff(self.axial_positions) > 0))


@dataclass(frozen=True)
class ModeSpectrum:
    """Normal modes at one configuration: ascending frequencies, mass-weighted
    orthonormal eigenvectors (columns), axis/phase labels and per-ion
    participations."""

    frequencies: np.ndarray      # (n_modes,) Hz
    eigenvectors: np.ndarray     # (3N, n_modes)
    labels: tuple[str, ...]
    participations: np.ndarray   # (N, n_modes), columns sum to 1

    def __getitem__(self, label: str) -> float:
        """Frequency of the mode with the given label."""
        return float(self.frequencies[self.labels.index(label)])

    @property
    def n_ions(self) -> int:
        return self.eigenvectors.shape[0] // 3


def equilibrium_spacing(mass: float, charge: float, f_axial: float) -> float:
    """Two equal ions in a harmonic well: d = (2 k q^2 / (m w^2))^(1/3)."""
    w = 2.0 * np.pi * f_axial
    return (2.0 * COULOMB_K * charge ** 2 / (mass * w ** 2)) ** (1.0 / 3.0)


def _default_guess(model: TrapModel, voltages, chain, stray_field) -> np.ndarray:
    """Evenly spaced ions at the axial DC potential minimum."""
    u = model.voltage_vector(voltages)
    sp = model._splines()
    g = model.axial_grid
    # Sample the axial potential seen by the (common-sign) charge.
    sign = np.sign(chain[0].charge)
    phi = (sp["value"](g) @ u) * sign
    if stray_field is not None:
        phi -= sign * np.asarray(stray_field)[AXIS] * g
    # Deepest interior local minimum away from the grid edges; the natural
    # spline tails can fake shallow wells right at the boundary.
    core = (g > g[0] + 0.05 * (g[-1] - g[0])) & (g < g[-1] - 0.05 * (g[-1] - g[0]))
    local = np.zeros(len(g), dtype=bool)
    local[1:-1] = (phi[1:-1] < phi[:-2]) & (phi[1:-1] <= phi[2:])
    cand = np.flatnonzero(local & core)
    if len(cand):
        k = int(cand[np.argmin(phi[cand])])
    else:
        k = int(np.argmin(phi[1:-1])) + 1
    z0 = g[k]
    d = 5e-6
    n = len(chain)
    pos = np.zeros((n, 3))
    pos[:, AXIS] = z0 + d * (np.arange(n) - (n - 1) / 2.0)
    return pos.reshape(-1)


def find_equilibrium(model: TrapModel, voltages, chain: Sequence[Species],
                     stray_field=None, initial_guess=None, *,
                     grad_tol: float = GRAD_TOL,
                     max_iter: int = MAX_ITER) -> CrystalConfig:
    """Locate a local minimum of the chain potential by damped Newton steps.

    Deterministic for a fixed guess; the default guess places the ions
    evenly spaced at the axial DC minimum. Raises EquilibriumError on
    non-convergence and UnstableEquilibriumError if the stationary point
    has a negative Hessian eigenvalue.
    """
    chain = tuple(chain)
    if initial_guess is None:
        x = _default_guess(model, voltages, chain, stray_field)
    else:
        x = np.asarray(initial_guess, dtype=float).reshape(-1).copy()
    n = len(x)
    lam = 0.0
    energy, g, H = chain_energy(model, voltages, chain, x, stray_field, order=2)
    scale = np.trace(H) / n  # typical curvature, sets the damping unit
    for _ in range(max_iter):
        gnorm = np.linalg.norm(g, np.inf)
        if gnorm < grad_tol:
            break
        for _ in range(60):
            try:
                L = np.linalg.cholesky(H + lam * abs(scale) * np.eye(n))
                step = -np.linalg.solve(L.T, np.linalg.solve(L, g))
            except np.linalg.LinAlgError:
                lam = max(4.0 * lam, 1e-6)
                continue
            x_new = x + step
            try:
                e_new, g_new, H_new = chain_energy(
                    model, voltages, chain, x_new, stray_field, order=2)
            except ValueError:  # stepped out of the grid or into a collision
                lam = max(4.0 * lam, 1e-6)
                continue
            gnorm_new = np.linalg.norm(g_new, np.inf)
            if gnorm_new < gnorm or e_new < energy or gnorm_new < grad_tol:
                x, energy, g, H = x_new, e_new, g_new, H_new
                lam *= 0.25
                if lam < 1e-14:
                    lam = 0.0
                break
            lam = max(4.0 * lam, 1e-6)
        else:
            # Steps no longer reduce the gradient.  Force components are
            # O(1e-13) N near a crystal, so anything below ~1e-17 N is the
            # round-off floor of the evaluation, not a genuine residual;
            # accept the point.
            if gnorm < max(1e-17, 1e4 * grad_tol):
                break
            raise EquilibriumError(
                f"damping saturated without progress (|grad| = {gnorm:.3e} N)")
    else:
        raise EquilibriumError(
            f"no convergence after {max_iter} iterations "
            f"(|grad| = {np.linalg.norm(g, np.inf):.3e} N)")

    evals = np.linalg.eigvalsh(H)
    if evals[0] < -1e-9 * evals[-1]:
        raise UnstableEquilibriumError(
            f"stationary point is a saddle (min Hessian eigenvalue {evals[0]:.3e})")
    return CrystalConfig(chain, x, energy)


def mass_weighted_hessian(model, voltages, config: CrystalConfig,
                          stray_field=None) -> np.ndarray:
    H = chain_energy(model, voltages, config.chain, config.equilibrium,
                     stray_field, order=2)[2]
    m = np.repeat([s.mass for s in config.chain], 3)
    return H / np.sqrt(np.outer(m, m))


def _phase_rank(vec: np.ndarray, axis: int, n_ions: int) -> int:
    """Number of sign changes of the dominant-axis components across the
    chain; 0 means in-phase. Negligible components are skipped."""
    c = vec.reshape(n_ions, 3)[:, axis]
    big = np.abs(c) > 1e-9 * np.max(np.abs(c))
    signs = np.sign(c[big])
    return int(np.sum(signs[:-1] * signs[1:] < 0))


def normal_modes(model: TrapModel, voltages, config: CrystalConfig,
                 stray_field=None, *, instability_tol: float = 1e-9) -> ModeSpectrum:
    """Diagonalize the mass-weighted Hessian at a stable equilibrium.

    Frequencies f = sqrt(eigenvalue) / 2pi ascending. Labels combine the
    dominant axis (X/Y/Z) with a phase index: modes of one axis are numbered
    by sign-change count of their dominant-axis pattern (in-phase first),
    then by frequency.
    """
    W = mass_weighted_hessian(model, voltages, config, stray_field)
    evals, vecs = np.linalg.eigh(W)
    if evals[0] < -instability_tol * max(evals[-1], 1e-300):
        raise UnstableEquilibriumError(
            f"unstable configuration (eigenvalue {evals[0]:.3e})")
    evals = np.clip(evals, 0.0, None)
    freqs = np.sqrt(evals) / (2.0 * np.pi)

    n_ions = len(config.chain)
    axes_names = "XYZ"
    dominant = []
    for k in range(len(freqs)):
        v = vecs[:, k].reshape(n_ions, 3)
        dominant.append(int(np.argmax(np.sum(v ** 2, axis=0))))

    labels = [""] * len(freqs)
    for axis in range(3):
        members = [k for k in range(len(freqs)) if dominant[k] == axis]
        members.sort(key=lambda k: (_phase_rank(vecs[:, k], axis, n_ions),
                                    freqs[k]))
        for rank, k in enumerate(members):
            labels[k] = f"{axes_names[axis]}{rank + 1}"

    part = np.sum(vecs.reshape(n_ions, 3, -1) ** 2, axis=1)   # (N, n_modes)
    return ModeSpectrum(freqs, vecs, tuple(labels), part)


def spectrum_at(model: TrapModel, voltages, chain: Sequence[Species],
                stray_field=None, guess=None):
    """Convenience: equilibrium plus normal modes in one call."""
    cfg = find_equilibrium(model, voltages, chain, stray_field, guess)
    return cfg, normal_modes(model, voltages, cfg, stray_field)
