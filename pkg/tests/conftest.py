"""Shared fixtures: the paperlike trap plus small ideal-well models.

The ideal models put a single synthetic electrode on a fine axial grid so
the splined potential is exact (harmonic) or near-exact (quartic) in the
grid interior; they give clean analytic targets for mode-ratio and
integrator tests.
"""

import numpy as np
import pytest

from ionshuttle.constants import CA40
from ionshuttle.paperlike import paperlike_trap
from ionshuttle.trap import ElectrodeMoment, RfModel, TrapModel, _voigt_to_tensor

RF_AMPLITUDE = 380.0
RF_FREQUENCY = 113.5e6


def _radial_gradient(f_radial, species=CA40):
    """RF gradient moment giving the species this radial secular frequency."""
    w = 2.0 * np.pi * f_radial
    return w * species.mass * 2.0 * np.pi * RF_FREQUENCY * np.sqrt(2.0) / (
        abs(species.charge) * RF_AMPLITUDE)


def ideal_harmonic_model(curvature=1.636e7, span=200e-6, n=201,
                         f_radial=3.0e6) -> TrapModel:
    """One electrode with an exactly harmonic axial potential c z^2 / 2."""
    g = np.linspace(-span, span, n)
    value = 0.5 * curvature * g ** 2
    gradient = curvature * g
    voigt = np.zeros((n, 6))
    voigt[:, 0] = voigt[:, 1] = -0.5 * curvature
    voigt[:, 2] = curvature
    el = ElectrodeMoment("well", value, gradient, _voigt_to_tensor(voigt))
    rf = RfModel(RF_AMPLITUDE, RF_FREQUENCY,
                 np.full(n, _radial_gradient(f_radial)),
                 np.broadcast_to(np.array([[1.0, 0, 0], [0, 1.0, 0]]),
                                 (n, 2, 3)).copy())
    return TrapModel(g, (el,), rf, -20.0, 20.0, np.inf, np.inf)


def ideal_quartic_model(quartic, span=150e-6, n=301,
                        f_radial=3.0e6) -> TrapModel:
    """One electrode with a pure quartic axial potential b z^4 (b = quartic)."""
    g = np.linspace(-span, span, n)
    value = quartic * g ** 4
    gradient = 4.0 * quartic * g ** 3
    voigt = np.zeros((n, 6))
    voigt[:, 0] = voigt[:, 1] = -6.0 * quartic * g ** 2
    voigt[:, 2] = 12.0 * quartic * g ** 2
    el = ElectrodeMoment("well", value, gradient, _voigt_to_tensor(voigt),
                         d3=24.0 * quartic * g, d4=np.full(n, 24.0 * quartic))
    rf = RfModel(RF_AMPLITUDE, RF_FREQUENCY,
                 np.full(n, _radial_gradient(f_radial)),
                 np.broadcast_to(np.array([[1.0, 0, 0], [0, 1.0, 0]]),
                                 (n, 2, 3)).copy())
    return TrapModel(g, (el,), rf, -1e6, 1e6, np.inf, np.inf)


@pytest.fixture(scope="session")
def paper_model():
    return paperlike_trap()


@pytest.fixture(scope="session")
def harmonic_model():
    return ideal_harmonic_model()
