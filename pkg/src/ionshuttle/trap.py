"""Trap-model ingestion and evaluation of DC / pseudopotential energy landscapes.

A trap model consists of per-electrode potential moments sampled on a common
axial grid (potential per unit applied volt, its axial gradient, and the full
3x3 curvature tensor), an RF pseudopotential model, and hardware limits.
Sampled quantities are interpolated with natural cubic splines; axial third
and fourth derivatives, when not stored in the file, are obtained from a
local quintic refit of the value samples (cubic splines do not carry a
usable fourth derivative).

Conventions: the trap axis is z (index 2 of each ion's coordinate triple);
ion positions are flat arrays [x1, y1, z1, x2, y2, z2, ...] in meters.
All potential-like quantities are per unit charge (volts); multiply by the
ion charge for energies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
import yaml
from scipy.interpolate import CubicSpline

from .constants import COULOMB_K, Species

AXIS = 2  # axial direction is z

_VOIGT = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]


class TrapModelError(ValueError):
    """Raised for malformed trap-model files or inconsistent model data."""


@dataclass(frozen=True)
class ElectrodeMoment:
    """Sampled potential moments of one DC electrode (per applied volt)."""

    name: str
    value: np.ndarray         # (n,) V/V
    axial_gradient: np.ndarray  # (n,) 1/m
    curvature: np.ndarray     # (n, 3, 3) 1/m^2, symmetric per point
    d3: np.ndarray | None = None  # (n,) 1/m^3, axial third derivative
    d4: np.ndarray | None = None  # (n,) 1/m^4, axial fourth derivative


@dataclass(frozen=True)
class RfModel:
    """RF drive and the radial field-gradient moment of the RF electrodes."""

    amplitude: float          # V
    frequency: float          # Hz (drive frequency Omega/2pi)
    gradient_per_volt: np.ndarray  # (n,) 1/m^2
    axes: np.ndarray          # (n, 2, 3) orthonormal radial principal axes

    @property
    def omega(self) -> float:
        return 2.0 * np.pi * self.frequency


@dataclass(frozen=True)
class TrapModel:
    """Immutable trap description: electrodes, RF model and hardware limits."""

    axial_grid: np.ndarray    # (n,) strictly increasing, meters
    electrodes: tuple[ElectrodeMoment, ...]
    rf: RfModel
    voltage_min: float
    voltage_max: float
    slew_limit: float         # V/s
    filter_cutoff: float      # Hz
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def electrode_names(self) -> list[str]:
        return [e.name for e in self.electrodes]

    def electrode_index(self, name: str) -> int:
        for i, e in enumerate(self.electrodes):
            if e.name == name:
                return i
        raise KeyError(f"unknown electrode {name!r}")

    def voltage_vector(self, voltages: Mapping[str, float] | Sequence[float]) -> np.ndarray:
        """Voltages as an array in electrode order; mappings may be partial."""
        if isinstance(voltages, Mapping):
            u = np.zeros(len(self.electrodes))
            for name, v in voltages.items():
                u[self.electrode_index(name)] = v
            return u
        u = np.asarray(voltages, dtype=float)
        if u.shape != (len(self.electrodes),):
            raise TrapModelError(
                f"voltage vector has shape {u.shape}, expected ({len(self.electrodes)},)")
        return u

    def check_span(self, z: float | np.ndarray):
        z = np.asarray(z)
        g = self.axial_grid
        if np.any(z < g[0]) or np.any(z > g[-1]):
            raise TrapModelError(
                f"axial position out of grid span [{g[0]:.6g}, {g[-1]:.6g}] m")

    # ---- interpolation machinery -------------------------------------------

    def _splines(self):
        """Batched natural cubic splines over all electrodes, cached."""
        if "sp" in self._cache:
            return self._cache["sp"]
        g = self.axial_grid
        ne = len(self.electrodes)
        value = np.stack([e.value for e in self.electrodes], axis=1)         # (n, ne)
        agrad = np.stack([e.axial_gradient for e in self.electrodes], axis=1)
        curv = np.stack([e.curvature for e in self.electrodes], axis=1)      # (n, ne, 3, 3)
        cvoigt = np.stack([curv[:, :, i, j] for i, j in _VOIGT], axis=1)     # (n, 6, ne)

        sp = {
            "value": CubicSpline(g, value, bc_type="natural"),
            "agrad": CubicSpline(g, agrad, bc_type="natural"),
            "curv": CubicSpline(g, cvoigt, bc_type="natural"),
        }
        sp["value_d1"] = sp["value"].derivative(1)
        sp["value_d2"] = sp["value"].derivative(2)
        sp["curv_d1"] = sp["curv"].derivative(1)
        sp["curv_d2"] = sp["curv"].derivative(2)
        # Radial gradient moments a_x, a_y reconstructed from the stored
        # xz / yz curvature entries so the 3D potential model is consistent:
        # a_x(z) = integral of C_xz, hence d(a_x)/dz matches the stored tensor.
        cxz = CubicSpline(g, cvoigt[:, 4, :], bc_type="natural")
        cyz = CubicSpline(g, cvoigt[:, 5, :], bc_type="natural")
        sp["ax"] = cxz.antiderivative()
        sp["ay"] = cyz.antiderivative()
        sp["ax_d1"], sp["ay_d1"] = cxz, cyz
        sp["ax_d2"], sp["ay_d2"] = cxz.derivative(1), cyz.derivative(1)
        # RF gradient moment
        sp["g"] = CubicSpline(g, self.rf.gradient_per_volt, bc_type="natural")
        sp["g_d1"] = sp["g"].derivative(1)
        sp["g_d2"] = sp["g"].derivative(2)
        if any(e.d3 is not None for e in self.electrodes):
            d3 = np.stack([e.d3 if e.d3 is not None else np.zeros_like(g)
                           for e in self.electrodes], axis=1)
            sp["d3"] = CubicSpline(g, d3, bc_type="natural")
        if any(e.d4 is not None for e in self.electrodes):
            d4 = np.stack([e.d4 if e.d4 is not None else np.zeros_like(g)
                           for e in self.electrodes], axis=1)
            sp["d4"] = CubicSpline(g, d4, bc_type="natural")
        self._cache["sp"] = sp
        return sp

    def _fast_pack(self):
        """All moment-spline coefficients packed into one tensor for cheap
        batched evaluation (one searchsorted + Horner instead of a PPoly
        call per moment). Identical values to the PPoly path."""
        if "fp" in self._cache:
            return self._cache["fp"]
        sp = self._splines()
        ne = len(self.electrodes)

        def pad5(c):  # local-power coefficients, highest first, pad to quartic
            c = c.reshape(c.shape[0], c.shape[1], -1)
            if c.shape[0] < 5:
                c = np.concatenate(
                    [np.zeros((5 - c.shape[0],) + c.shape[1:]), c], axis=0)
            return c

        C = np.concatenate([
            pad5(sp["value"].c),                 # ne columns
            pad5(sp["ax"].c),                    # ne
            pad5(sp["ay"].c),                    # ne
            pad5(sp["curv"].c),                  # 6 * ne
            pad5(sp["g"].c[:, :, None]),         # 1
        ], axis=2)
        C1 = C[:4] * np.array([4.0, 3.0, 2.0, 1.0])[:, None, None]
        C2 = C1[:3] * np.array([3.0, 2.0, 1.0])[:, None, None]
        fp = {"C": (C, C1, C2), "ne": ne,
              "sl": {"value": slice(0, ne), "ax": slice(ne, 2 * ne),
                     "ay": slice(2 * ne, 3 * ne),
                     "curv": slice(3 * ne, 9 * ne), "g": 9 * ne}}
        self._cache["fp"] = fp
        return fp

    def _fast_eval(self, z: np.ndarray, order: int) -> dict[str, np.ndarray]:
        """Moments and z-derivatives at positions z, via the packed table.

        Returns value/ax/ay (N, ne), curv (N, 6, ne), g (N,), with _d1/_d2
        variants up to the requested order.
        """
        fp = self._fast_pack()
        g = self.axial_grid
        z = np.atleast_1d(np.asarray(z, dtype=float))
        idx = np.clip(np.searchsorted(g, z, side="right") - 1, 0, len(g) - 2)
        t = (z - g[idx])[:, None]
        packs = fp["C"][:order + 1]
        ne, sl = fp["ne"], fp["sl"]
        out = {}
        for d, pack in enumerate(packs):
            loc = pack[:, idx, :]                # (k, N, F)
            r = loc[0]
            for k in range(1, loc.shape[0]):
                r = r * t + loc[k]
            suffix = "" if d == 0 else f"_d{d}"
            out["value" + suffix] = r[:, sl["value"]]
            out["ax" + suffix] = r[:, sl["ax"]]
            out["ay" + suffix] = r[:, sl["ay"]]
            out["curv" + suffix] = r[:, sl["curv"]].reshape(len(z), 6, ne)
            out["g" + suffix] = r[:, sl["g"]]
        return out

    def _quintic_refit_derivs(self, z: float) -> tuple[np.ndarray, np.ndarray]:
        """Axial 3rd/4th derivatives of every electrode's value moment at z.

        Fits a quintic through the 7 grid samples nearest z (scaled local
        coordinates for conditioning) and differentiates the fit.
        """
        g = self.axial_grid
        k = int(np.searchsorted(g, z))
        lo = max(0, min(k - 3, len(g) - 7))
        win = slice(lo, lo + 7)
        x = g[win]
        scale = x[-1] - x[0]
        xs = (x - z) / scale
        V = np.vander(xs, 6, increasing=True)  # columns 1, t, ..., t^5
        ys = np.stack([e.value[win] for e in self.electrodes], axis=1)
        coef, *_ = np.linalg.lstsq(V, ys, rcond=None)
        d3 = 6.0 * coef[3] / scale**3
        d4 = 24.0 * coef[4] / scale**4
        return d3, d4

    def axial_moments(self, z: float) -> dict[str, np.ndarray]:
        """Per-electrode on-axis moments at z: value, field, curvature Voigt,
        cubic and quartic axial derivatives. Arrays indexed by electrode."""
        self.check_span(z)
        sp = self._splines()
        d3, d4 = None, None
        if "d3" in sp:
            d3 = np.atleast_1d(sp["d3"](z))
        if "d4" in sp:
            d4 = np.atleast_1d(sp["d4"](z))
        if d3 is None or d4 is None:
            q3, q4 = self._quintic_refit_derivs(z)
            d3 = q3 if d3 is None else d3
            d4 = q4 if d4 is None else d4
        return {
            "value": np.atleast_1d(sp["value"](z)),
            "gradient_z": np.atleast_1d(sp["agrad"](z)),
            "gradient_x": np.atleast_1d(sp["ax"](z)),
            "gradient_y": np.atleast_1d(sp["ay"](z)),
            "curvature": np.atleast_2d(sp["curv"](z)),  # (6, ne) Voigt
            "d3": d3,
            "d4": d4,
        }


@dataclass(frozen=True)
class LocalExpansion:
    """Local Taylor data of a potential (per unit charge) at one point."""

    value: float              # V
    gradient: np.ndarray      # (3,) V/m
    curvature: np.ndarray     # (3, 3) V/m^2
    axial_cubic: float = 0.0  # V/m^3
    axial_quartic: float = 0.0  # V/m^4

    def __add__(self, other: "LocalExpansion") -> "LocalExpansion":
        return LocalExpansion(
            self.value + other.value,
            self.gradient + other.gradient,
            self.curvature + other.curvature,
            self.axial_cubic + other.axial_cubic,
            self.axial_quartic + other.axial_quartic,
        )

    def scaled(self, s: float) -> "LocalExpansion":
        return LocalExpansion(s * self.value, s * self.gradient,
                              s * self.curvature, s * self.axial_cubic,
                              s * self.axial_quartic)


def _voigt_to_tensor(v6: np.ndarray) -> np.ndarray:
    t = np.zeros(v6.shape[:-1] + (3, 3)) if v6.ndim > 1 else np.zeros((3, 3))
    for k, (i, j) in enumerate(_VOIGT):
        t[..., i, j] = v6[..., k]
        t[..., j, i] = v6[..., k]
    return t


def dc_expansion(model: TrapModel, voltages, z: float) -> LocalExpansion:
    """Superposition of electrode moments at axial position z (on axis).

    Exactly linear in the voltage vector. Sampled quantities are spline
    interpolated, so at a grid node a unit volt reproduces the stored samples.
    """
    u = model.voltage_vector(voltages)
    m = model.axial_moments(z)
    grad = np.array([m["gradient_x"] @ u, m["gradient_y"] @ u, m["gradient_z"] @ u])
    curv = _voigt_to_tensor(m["curvature"] @ u)  # Voigt (6, ne) @ u -> (6,)
    return LocalExpansion(
        value=float(m["value"] @ u),
        gradient=grad,
        curvature=curv,
        axial_cubic=float(m["d3"] @ u),
        axial_quartic=float(m["d4"] @ u),
    )


def pseudopotential_expansion(model: TrapModel, species: Species, z: float) -> LocalExpansion:
    """Secular pseudopotential expansion (per unit charge) at axial z.

    Near the RF null the field is a radial quadrupole of gradient
    amplitude * g(z), giving a radially isotropic curvature
    q * (amplitude * g)^2 / (2 m Omega^2) that scales as 1/mass.
    """
    model.check_span(z)
    sp = model._splines()
    gz = float(sp["g"](z))
    q = abs(species.charge)
    k = q * (model.rf.amplitude * gz) ** 2 / (2.0 * species.mass * model.rf.omega ** 2)
    curv = np.diag([k, k, 0.0])
    return LocalExpansion(0.0, np.zeros(3), curv, 0.0, 0.0)


# ---- full 3D chain potential ------------------------------------------------

@lru_cache(maxsize=64)
def _chain_arrays(chain: tuple):
    """Cached (|q|, mass, q) arrays for a species tuple (hot-path helper)."""
    qa = np.array([abs(s.charge) for s in chain])
    m = np.array([s.mass for s in chain])
    qs = np.array([s.charge for s in chain])
    return qa, m, qs

def _dc_terms(model: TrapModel, u: np.ndarray, pos: np.ndarray, order: int,
              fe=None):
    """DC potential (per charge), and optionally gradient / Hessian blocks,
    for ion positions pos (N, 3).

    The off-axis model is quadratic in the radial displacement:
    V = v(z) + a_x x + a_y y + (Cxx x^2 + 2 Cxy x y + Cyy y^2)/2
    with all coefficients splines of z; this makes value, gradient and
    Hessian mutually consistent (finite differences of one give the next).
    """
    x, y, z = pos[:, 0], pos[:, 1], pos[:, 2]
    if fe is None:
        model.check_span(z)
        fe = model._fast_eval(z, order)

    cv = fe["curv"] @ u             # (N, 6)
    cxx, cyy, cxy = cv[:, 0], cv[:, 1], cv[:, 3]
    ax, ay = fe["ax"] @ u, fe["ay"] @ u
    v = fe["value"] @ u
    val = v + ax * x + ay * y + 0.5 * (cxx * x * x + cyy * y * y) + cxy * x * y
    if order == 0:
        return val, None, None

    cv1 = fe["curv_d1"] @ u
    cxx1, cyy1, cxy1 = cv1[:, 0], cv1[:, 1], cv1[:, 3]
    ax1, ay1 = fe["ax_d1"] @ u, fe["ay_d1"] @ u
    v1 = fe["value_d1"] @ u
    grad = np.empty_like(pos)
    grad[:, 0] = ax + cxx * x + cxy * y
    grad[:, 1] = ay + cxy * x + cyy * y
    grad[:, 2] = (v1 + ax1 * x + ay1 * y
                  + 0.5 * (cxx1 * x * x + cyy1 * y * y) + cxy1 * x * y)
    if order == 1:
        return val, grad, None

    cv2 = fe["curv_d2"] @ u
    cxx2, cyy2, cxy2 = cv2[:, 0], cv2[:, 1], cv2[:, 3]
    ax2, ay2 = fe["ax_d2"] @ u, fe["ay_d2"] @ u
    v2 = fe["value_d2"] @ u
    hess = np.empty((len(pos), 3, 3))
    hess[:, 0, 0] = cxx
    hess[:, 1, 1] = cyy
    hess[:, 0, 1] = hess[:, 1, 0] = cxy
    hess[:, 0, 2] = hess[:, 2, 0] = ax1 + cxx1 * x + cxy1 * y
    hess[:, 1, 2] = hess[:, 2, 1] = ay1 + cxy1 * x + cyy1 * y
    hess[:, 2, 2] = (v2 + ax2 * x + ay2 * y
                     + 0.5 * (cxx2 * x * x + cyy2 * y * y) + cxy2 * x * y)
    return val, grad, hess


def _pseudo_terms(model: TrapModel, chain: Sequence[Species], pos: np.ndarray,
                  order: int, fe=None):
    """Pseudopotential energy terms (joules) per ion, with derivatives."""
    x, y, z = pos[:, 0], pos[:, 1], pos[:, 2]
    q, m = _chain_arrays(tuple(chain))[:2]
    pref = q * q * model.rf.amplitude ** 2 / (4.0 * m * model.rf.omega ** 2)
    if fe is None:
        fe = model._fast_eval(z, order)
    g0 = fe["g"]
    r2 = x * x + y * y
    # U = pref * g(z)^2 * (x^2 + y^2)
    val = pref * g0 * g0 * r2
    if order == 0:
        return val, None, None
    g1 = fe["g_d1"]
    grad = np.empty_like(pos)
    grad[:, 0] = 2.0 * pref * g0 * g0 * x
    grad[:, 1] = 2.0 * pref * g0 * g0 * y
    grad[:, 2] = 2.0 * pref * g0 * g1 * r2
    if order == 1:
        return val, grad, None
    g2 = fe["g_d2"]
    hess = np.zeros((len(pos), 3, 3))
    hess[:, 0, 0] = hess[:, 1, 1] = 2.0 * pref * g0 * g0
    hess[:, 0, 2] = hess[:, 2, 0] = 4.0 * pref * g0 * g1 * x
    hess[:, 1, 2] = hess[:, 2, 1] = 4.0 * pref * g0 * g1 * y
    hess[:, 2, 2] = 2.0 * pref * (g1 * g1 + g0 * g2) * r2
    return val, grad, hess


def _coulomb_terms(chain: Sequence[Species], pos: np.ndarray, order: int):
    n = len(pos)
    q = _chain_arrays(tuple(chain))[2]
    val = 0.0
    grad = np.zeros((n, 3)) if order >= 1 else None
    hess = np.zeros((3 * n, 3 * n)) if order >= 2 else None
    for i in range(n):
        for j in range(i + 1, n):
            d = pos[i] - pos[j]
            r = np.linalg.norm(d)
            if r == 0.0:
                raise ValueError(f"ions {i} and {j} are coincident")
            kqq = COULOMB_K * q[i] * q[j]
            val += kqq / r
            if order >= 1:
                f = -kqq * d / r ** 3
                grad[i] += f
                grad[j] -= f
            if order >= 2:
                blk = kqq * (3.0 * np.outer(d, d) / r ** 5 - np.eye(3) / r ** 3)
                si, sj = slice(3 * i, 3 * i + 3), slice(3 * j, 3 * j + 3)
                hess[si, si] += blk
                hess[sj, sj] += blk
                hess[si, sj] -= blk
                hess[sj, si] -= blk
    return val, grad, hess


def chain_energy(model: TrapModel, voltages, chain: Sequence[Species],
                 positions: np.ndarray, stray_field: np.ndarray | None = None,
                 *, order: int = 0):
    """Total potential energy of the ion chain, with analytic derivatives.

    U = sum_i [q_i V_dc(r_i) + U_ps(r_i; m_i) - q_i E_stray . r_i]
        + sum_{i<j} k q_i q_j / r_ij

    Returns energy for order=0, (energy, gradient) for order=1 and
    (energy, gradient, hessian) for order=2; gradient is flat (3N,),
    the Hessian (3N, 3N).
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = len(pos)
    if len(chain) != n:
        raise ValueError(f"{n} positions but {len(chain)} species")
    chain = tuple(chain)
    u = model.voltage_vector(voltages)
    qs = _chain_arrays(chain)[2]
    E = np.zeros(3) if stray_field is None else np.asarray(stray_field, dtype=float)

    model.check_span(pos[:, 2])
    fe = model._fast_eval(pos[:, 2], order)
    dv, dg, dh = _dc_terms(model, u, pos, order, fe)
    pv, pg, ph = _pseudo_terms(model, chain, pos, order, fe)
    cv, cg, ch = _coulomb_terms(chain, pos, min(order, 2))

    energy = float(qs @ dv + pv.sum() - qs @ (pos @ E) + cv)
    if order == 0:
        return energy
    grad = (qs[:, None] * dg + pg - qs[:, None] * E[None, :]).reshape(-1) + cg.reshape(-1)
    if order == 1:
        return energy, grad
    hess = ch.copy()
    for i in range(n):
        s = slice(3 * i, 3 * i + 3)
        hess[s, s] += qs[i] * dh[i] + ph[i]
    return energy, grad, hess


def total_energy(model, voltages, chain, positions, stray_field=None) -> float:
    return chain_energy(model, voltages, chain, positions, stray_field, order=0)


def total_gradient(model, voltages, chain, positions, stray_field=None) -> np.ndarray:
    return chain_energy(model, voltages, chain, positions, stray_field, order=1)[1]


def total_hessian(model, voltages, chain, positions, stray_field=None) -> np.ndarray:
    return chain_energy(model, voltages, chain, positions, stray_field, order=2)[2]


# ---- file I/O ---------------------------------------------------------------

def _as_array(node, name, path, shape=None):
    try:
        a = np.asarray(node, dtype=float)
    except (TypeError, ValueError):
        raise TrapModelError(f"{path}: field {name!r} is not numeric") from None
    if shape is not None and a.shape != shape:
        raise TrapModelError(
            f"{path}: field {name!r} has shape {a.shape}, expected {shape}")
    return a


def load_trap_model(path) -> TrapModel:
    """Load and validate a trap model from a YAML document.

    Schema (SI units throughout)::

        grid: [z0, z1, ...]
        electrodes:
          - name: E1
            value: [...]           # len(grid)
            gradient: [...]        # len(grid)
            curvature: [[xx, yy, zz, xy, xz, yz], ...]   # len(grid) x 6
            d3: [...]              # optional
            d4: [...]              # optional
        rf:
          amplitude: 380.0
          frequency: 113.5e6
          gradient_per_volt: [...]
          axes: [[1,0,0], [0,1,0]]   # or one pair per grid point
        limits: {vmin: -10, vmax: 10, slew: 5.0e6, filter_cutoff: 68.0e3}
    """
    path = str(path)
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except FileNotFoundError:
        raise TrapModelError(f"{path}: file not found") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise TrapModelError(f"{path}: parse failure{where}: {exc}") from None
    if not isinstance(doc, dict):
        raise TrapModelError(f"{path}: top level must be a mapping")

    if "grid" not in doc:
        raise TrapModelError(f"{path}: missing 'grid' section")
    grid = _as_array(doc["grid"], "grid", path)
    if grid.ndim != 1 or len(grid) < 4:
        raise TrapModelError(f"{path}: grid must be 1-D with at least 4 points")
    if not np.all(np.diff(grid) > 0):
        raise TrapModelError(f"{path}: grid is not strictly increasing")
    n = len(grid)

    electrodes = []
    for k, e in enumerate(doc.get("electrodes", [])):
        name = e.get("name", f"E{k}")
        where = f"{path}: electrode {name!r}"
        value = _as_array(e.get("value"), "value", where, (n,))
        gradient = _as_array(e.get("gradient"), "gradient", where, (n,))
        cv = _as_array(e.get("curvature"), "curvature", where)
        if cv.shape == (n, 6):
            curv = _voigt_to_tensor(cv)
        elif cv.shape == (n, 3, 3):
            curv = cv
        else:
            raise TrapModelError(
                f"{where}: curvature has shape {cv.shape}, expected ({n}, 6) or ({n}, 3, 3)")
        if not np.allclose(curv, np.swapaxes(curv, -1, -2)):
            raise TrapModelError(f"{where}: curvature tensors are not symmetric")
        d3 = _as_array(e["d3"], "d3", where, (n,)) if "d3" in e else None
        d4 = _as_array(e["d4"], "d4", where, (n,)) if "d4" in e else None
        electrodes.append(ElectrodeMoment(name, value, gradient, curv, d3, d4))
    if not electrodes:
        raise TrapModelError(f"{path}: no electrodes defined")

    if "rf" not in doc:
        raise TrapModelError(f"{path}: missing 'rf' section")
    rfd = doc["rf"]
    gpv = _as_array(rfd.get("gradient_per_volt"), "gradient_per_volt",
                    f"{path}: rf", (n,))
    axes = _as_array(rfd.get("axes", [[1, 0, 0], [0, 1, 0]]), "axes", f"{path}: rf")
    if axes.shape == (2, 3):
        axes = np.broadcast_to(axes, (n, 2, 3)).copy()
    elif axes.shape != (n, 2, 3):
        raise TrapModelError(
            f"{path}: rf axes have shape {axes.shape}, expected (2, 3) or ({n}, 2, 3)")
    dots = np.einsum("nij,nkj->nik", axes, axes)
    if not np.allclose(dots, np.eye(2), atol=1e-9):
        raise TrapModelError(f"{path}: rf principal axes are not orthonormal")
    if np.any(np.abs(axes[:, :, AXIS]) > 1e-9):
        raise TrapModelError(f"{path}: rf principal axes are not radial")
    amplitude = float(rfd.get("amplitude", 0.0))
    frequency = float(rfd.get("frequency", 0.0))
    if frequency <= 0:
        raise TrapModelError(f"{path}: rf frequency must be positive")
    if amplitude < 0:
        raise TrapModelError(f"{path}: rf amplitude must be nonnegative")
    rf = RfModel(amplitude, frequency, gpv, axes)

    lim = doc.get("limits", {})
    vmin = float(lim.get("vmin", -10.0))
    vmax = float(lim.get("vmax", 10.0))
    slew = float(lim.get("slew", np.inf))
    cutoff = float(lim.get("filter_cutoff", np.inf))
    if not vmin < vmax:
        raise TrapModelError(f"{path}: limits require vmin < vmax")
    if slew <= 0 or cutoff <= 0:
        raise TrapModelError(f"{path}: slew and filter_cutoff must be positive")

    return TrapModel(grid, tuple(electrodes), rf, vmin, vmax, slew, cutoff)


def write_trap_model(model: TrapModel, path):
    """Serialize a TrapModel to the YAML schema read by load_trap_model."""
    doc = {
        "grid": model.axial_grid.tolist(),
        "electrodes": [
            {k: v for k, v in {
                "name": e.name,
                "value": e.value.tolist(),
                "gradient": e.axial_gradient.tolist(),
                "curvature": np.stack(
                    [e.curvature[:, i, j] for i, j in _VOIGT], axis=1).tolist(),
                "d3": e.d3.tolist() if e.d3 is not None else None,
                "d4": e.d4.tolist() if e.d4 is not None else None,
            }.items() if v is not None}
            for e in model.electrodes
        ],
        "rf": {
            "amplitude": model.rf.amplitude,
            "frequency": model.rf.frequency,
            "gradient_per_volt": model.rf.gradient_per_volt.tolist(),
            "axes": model.rf.axes.tolist(),
        },
        "limits": {
            "vmin": model.voltage_min,
            "vmax": model.voltage_max,
            "slew": float(model.slew_limit),
            "filter_cutoff": float(model.filter_cutoff),
        },
    }
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, default_flow_style=None)
