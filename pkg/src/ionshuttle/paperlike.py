"""A synthetic segmented-trap model for desk-scale studies.

Ten DC electrodes with Gaussian-lobe moments are laid out symmetrically
around the separation zone at z = 0: a narrow inner quartet for generating
strong higher-order axial terms, and wider outer electrodes for transport
wells. Lobe widths and amplitudes are scaled from the electrode sizes and
an ion-electrode distance of 184 um; the RF drive runs at 380 V and
113.5 MHz. Hardware limits: +-10 V, 68 kHz output filters.

The moment data is synthetic: absolute frequencies and crossing times
produced with this model are qualitatively comparable to a real segmented
trap but are not a reproduction of any specific device.
"""

from __future__ import annotations

import numpy as np

from .trap import ElectrodeMoment, RfModel, TrapModel

ION_ELECTRODE_DISTANCE = 184e-6  # m

# (center, electrode width) in meters; symmetric pairs, narrow near z = 0.
_LAYOUT = [
    (-900e-6, 400e-6),
    (-620e-6, 300e-6),
    (-432.5e-6, 220e-6),
    (-240e-6, 155e-6),
    (-120e-6, 155e-6),
    (120e-6, 155e-6),
    (240e-6, 155e-6),
    (432.5e-6, 220e-6),
    (620e-6, 300e-6),
    (900e-6, 400e-6),
]

# Fraction of the applied voltage reaching the ion (shielding), and the
# split of the radial curvature between x and y (trace-free with C_zz).
_EFFICIENCY = 0.25
_RADIAL_SPLIT = 0.65


def paperlike_trap(grid_step: float = 4e-6, span: float = 1.15e-3,
                   rf_amplitude: float = 380.0, rf_frequency: float = 113.5e6,
                   rf_gradient: float = 2.1e7) -> TrapModel:
    """Build the synthetic trap model.

    rf_gradient is the radial RF field gradient per volt (1/m^2); the
    default sets the Ca-40 radial secular frequency near 3 MHz.
    """
    n = int(round(2 * span / grid_step)) + 1
    grid = np.linspace(-span, span, n)

    electrodes = []
    for k, (zc, width) in enumerate(_LAYOUT):
        sigma = 0.45 * width + 0.35 * ION_ELECTRODE_DISTANCE
        x = (grid - zc) / sigma
        lobe = _EFFICIENCY * np.exp(-0.5 * x * x)
        value = lobe
        grad = -x / sigma * lobe
        d2 = (x * x - 1.0) / sigma ** 2 * lobe
        d3 = x * (3.0 - x * x) / sigma ** 3 * lobe
        d4 = (x ** 4 - 6.0 * x * x + 3.0) / sigma ** 4 * lobe
        # Radial split of the trace: -C_zz shared unevenly between x and y,
        # plus a z^2-free quadrupole (electrodes above/below the ion plane)
        # so the radial DC anisotropy survives where C_zz crosses zero.
        tilt = -0.4 * lobe / ION_ELECTRODE_DISTANCE ** 2
        curv = np.zeros((n, 3, 3))
        curv[:, 2, 2] = d2
        curv[:, 0, 0] = -_RADIAL_SPLIT * d2 + tilt
        curv[:, 1, 1] = -(1.0 - _RADIAL_SPLIT) * d2 - tilt
        electrodes.append(ElectrodeMoment(
            f"E{k + 1}", value, grad, curv, d3, d4))

    # Mild axial variation of the RF gradient: a weak mass-dependent axial
    # pseudopotential force, as present in real segmented traps.
    gpv = rf_gradient * (1.0 + 0.02 * (grid / 1e-3) ** 2)
    axes = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    rf = RfModel(rf_amplitude, rf_frequency, gpv,
                 np.broadcast_to(axes, (n, 2, 3)).copy())

    return TrapModel(
        axial_grid=grid,
        electrodes=tuple(electrodes),
        rf=rf,
        voltage_min=-10.0,
        voltage_max=10.0,
        slew_limit=2e6,
        filter_cutoff=68e3,
    )
