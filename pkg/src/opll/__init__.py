"""Baseband simulator of a digital optical phase-locked loop with a phase-noise analysis toolkit."""

__version__ = "0.1.0"

from .analysis import (
    AllanCurve,
    Spectrum,
    carrier_phase_variance,
    fit_loglog_slope,
    mod_allan,
    rms_phase_variance,
    sa_noise_corrections,
    welch_psd,
)
from .laser import LaserParams, LaserState, current_fm_response, piezo_response, step_laser
from .loopfilter import FilterChainState, LoopConfig, filter_step, lead_response
from .noise import (
    DbcSpec,
    PhaseSeries,
    PowerLawNoiseSpec,
    dbc_to_phase_psd,
    pfd_noise_floor_dbc,
    synthesize_power_law,
)
from .pfd import PfdConfig, PfdState, edges_from_phase, pfd_step
from .simengine import SimConfig, SimRecord, run_simulation, two_slave_experiment

__all__ = [
    "AllanCurve",
    "DbcSpec",
    "FilterChainState",
    "LaserParams",
    "LaserState",
    "LoopConfig",
    "PfdConfig",
    "PfdState",
    "PhaseSeries",
    "PowerLawNoiseSpec",
    "SimConfig",
    "SimRecord",
    "Spectrum",
    "carrier_phase_variance",
    "current_fm_response",
    "dbc_to_phase_psd",
    "edges_from_phase",
    "filter_step",
    "fit_loglog_slope",
    "lead_response",
    "mod_allan",
    "pfd_noise_floor_dbc",
    "pfd_step",
    "piezo_response",
    "rms_phase_variance",
    "run_simulation",
    "sa_noise_corrections",
    "step_laser",
    "synthesize_power_law",
    "two_slave_experiment",
    "welch_psd",
]
