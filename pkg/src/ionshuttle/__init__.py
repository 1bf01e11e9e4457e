"""ionshuttle: voltage waveform design and motional-excitation analysis
for transport and separation of mixed-species trapped-ion crystals."""

__version__ = "0.1.0"

from .constants import BE9, CA40, Species, get_species
from .crossings import (BranchSet, CrossingReport, crossing_gap,
                        landau_zener, simulate_two_level, track_modes)
from .dynamics import (ExcitationReport, FieldScan, HeatingModel, Trajectory,
                       adiabaticity_profile, axial_field_scan, detect_reorder,
                       excitation_report, heating_integral, integrate,
                       mode_excitation)
from .sideband import (FitResult, FlopDataset, fit_flop, flop_model,
                       laguerre_gen, pn_displaced_thermal, pn_thermal,
                       rabi_bsb, synthesize_flop)
from .statics import (CrystalConfig, EquilibriumError, ModeSpectrum,
                      find_equilibrium, normal_modes, spectrum_at)
from .synth import (CalibrationResult, QuadrupolePattern, Waveform,
                    apply_filter, calibrate_quadrupole, inject_quadrupole,
                    make_separation, make_transport, minimum_jerk,
                    raised_cosine)
from .trap import TrapModel, load_trap_model, write_trap_model
