"""Physical constants (SI) and the ion species registry."""

from __future__ import annotations

from dataclasses import dataclass

ELEMENTARY_CHARGE = 1.602176634e-19  # C
EPSILON_0 = 8.8541878128e-12  # F/m
COULOMB_K = 1.0 / (4.0 * 3.141592653589793 * EPSILON_0)  # N m^2 / C^2
HBAR = 1.054571817e-34  # J s
PLANCK_H = 6.62607015e-34  # J s
ATOMIC_MASS = 1.66053906660e-27  # kg


@dataclass(frozen=True)
class Species:
    """An ion species: mass in kg, charge in C (signed multiple of e)."""

    name: str
    mass: float
    charge: float

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError(f"species {self.name}: mass must be positive")
        if self.charge == 0:
            raise ValueError(f"species {self.name}: charge must be nonzero")


BE9 = Species("Be9", 9.012 * ATOMIC_MASS, ELEMENTARY_CHARGE)
CA40 = Species("Ca40", 39.963 * ATOMIC_MASS, ELEMENTARY_CHARGE)

SPECIES_REGISTRY = {s.name: s for s in (BE9, CA40)}


def get_species(name: str) -> Species:
    """Look up a registered species by name (e.g. 'Be9', 'Ca40')."""
    try:
        return SPECIES_REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(SPECIES_REGISTRY))
        raise KeyError(f"unknown species {name!r} (known: {known})") from None
