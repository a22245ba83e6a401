"""Simulation, measurement and continuation tools for a vibro-impact capsule
under delayed feedback control."""

__version__ = "0.1.0"

from .model import (
    MODES, DimensionalParams, Mode, ModeError, Params, State, classify_mode,
    control_signal, event_residuals, mass_force_on_capsule, nondimensionalize,
    vector_field,
)
from .integrator import (
    IntegrationError, IntegrationSettings, Trajectory, evaluate, integrate, locate_event,
    switch_on_control,
)
from .chain import ChainConfig, ChainState, compare_with_dde, integrate_chain, lift
from .analysis import (
    Measures, SweepResult, average_velocity, basin_grid, classify_attractor, control_energy,
    convergence_time, invasiveness, max_velocity_difference, measure_control, psd,
    stroboscopic_sweep,
)
from .continuation import (
    Branch, ContinuationSettings, SegmentedOrbit, continue_branch, continue_grazing_locus,
    continue_pd_locus, floquet_multipliers, orbit_from_dde, orbit_from_simulation,
)
