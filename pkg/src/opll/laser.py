"""Slave ECDL model: phase integrator with a fast current actuator and a slow piezo.

The current-to-frequency response combines a thermal term (positive, low-pass)
and a carrier-density term (negative, flat)::

    H_fm(f) = k_thermal / (1 + i f / f_thermal) - k_carrier

so the response phase runs from 0 at DC to -180 deg at high frequency and
passes -90 deg at ``f_x = f_thermal * sqrt(k_thermal / k_carrier - 1)``.

The piezo is a second-order resonant low-pass with DC gain ``k_piezo``.
Both actuators are discretized with the bilinear transform (prewarped at
their corner frequencies) which keeps the resonator stable for any step.

Default gains are engineering choices; the data the model was built from
gives no numeric actuator coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .noise import PowerLawNoiseSpec


class ModeHopError(RuntimeError):
    """Current-induced detuning left the configured mode-hop-free range."""


def default_free_run_noise() -> PowerLawNoiseSpec:
    # white FM giving a ~50 kHz Lorentzian linewidth (pi * b), plus flicker FM
    return PowerLawNoiseSpec(((-2, 1.6e4), (-3, 3.0e8)))


@dataclass(frozen=True)
class LaserParams:
    free_run_noise: PowerLawNoiseSpec = field(default_factory=default_free_run_noise)
    k_thermal: float = 1.0e6  # Hz/mA
    f_thermal: float = 1.0e6  # Hz
    k_carrier: float = 1.0e5  # Hz/mA, enters with negative sign
    k_piezo: float = 1.0e7  # Hz/V
    f_piezo: float = 3.0e3  # Hz
    q_piezo: float = 3.0
    detuning0: float = 0.0  # Hz
    mode_hop_limit: float = 5.0e8  # Hz, bound on current-induced detuning

    def __post_init__(self) -> None:
        for name in ("k_thermal", "f_thermal", "k_carrier", "f_piezo", "q_piezo", "mode_hop_limit"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
        for name in ("k_piezo", "detuning0"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.k_thermal <= self.k_carrier:
            raise ValueError("k_thermal must exceed k_carrier (positive DC current tuning)")
        if self.f_thermal >= self.crossover_frequency:
            raise ValueError("f_thermal must lie below the FM crossover frequency")

    @property
    def crossover_frequency(self) -> float:
        """Frequency where the current-FM phase passes -90 degrees."""
        return self.f_thermal * math.sqrt(self.k_thermal / self.k_carrier - 1.0)

    @property
    def dc_current_tuning(self) -> float:
        return self.k_thermal - self.k_carrier


@dataclass(frozen=True)
class LaserState:
    phase: float = 0.0  # rad, relative to master + target beat ramp
    freq: float = 0.0  # Hz, frequency offset during the last step
    thermal_y: float = 0.0
    thermal_u: float = 0.0
    piezo_s1: float = 0.0
    piezo_s2: float = 0.0


class ActuatorCoefficients(NamedTuple):
    th_b0: float
    th_a1: float
    pz_b0: float
    pz_b1: float
    pz_b2: float
    pz_a1: float
    pz_a2: float


def actuator_coefficients(params: LaserParams, dt: float) -> ActuatorCoefficients:
    """Bilinear (prewarped) coefficients of the thermal low-pass and piezo resonator."""
    w_t = 2 * math.pi * params.f_thermal
    k = w_t / math.tan(w_t * dt / 2)
    norm = 1 + k / w_t
    th_b0 = params.k_thermal / norm
    th_a1 = (1 - k / w_t) / norm

    w_p = 2 * math.pi * params.f_piezo
    k = w_p / math.tan(w_p * dt / 2)
    a0 = k * k + k * w_p / params.q_piezo + w_p * w_p
    a1 = 2 * (w_p * w_p - k * k)
    a2 = k * k - k * w_p / params.q_piezo + w_p * w_p
    g = params.k_piezo * w_p * w_p / a0
    return ActuatorCoefficients(th_b0, th_a1, g, 2 * g, g, a1 / a0, a2 / a0)


def current_fm_response(params: LaserParams, f) -> np.ndarray | complex:
    """Complex current-to-frequency response in Hz/mA."""
    f = np.asarray(f, dtype=float)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    h = params.k_thermal / (1 + 1j * f / params.f_thermal) - params.k_carrier
    return complex(h) if np.ndim(h) == 0 else h


def piezo_response(params: LaserParams, f) -> np.ndarray | complex:
    """Complex piezo voltage-to-frequency response in Hz/V."""
    f = np.asarray(f, dtype=float)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    s = 2j * np.pi * f
    w = 2 * np.pi * params.f_piezo
    h = params.k_piezo * w**2 / (s**2 + s * w / params.q_piezo + w**2)
    return complex(h) if np.ndim(h) == 0 else h


def max_step(params: LaserParams) -> float:
    """Largest step that still resolves the current-FM crossover (20 points per period)."""
    return 1.0 / (20.0 * params.crossover_frequency)


def step_laser(
    state: LaserState,
    params: LaserParams,
    i_mod: float,
    v_piezo: float,
    noise_sample: float,
    dt: float,
    coeffs: ActuatorCoefficients | None = None,
) -> LaserState:
    """Advance the laser by one step of length ``dt``.

    ``i_mod`` (mA) drives the current actuator, ``v_piezo`` (V) the piezo and
    ``noise_sample`` (Hz) is the free-running frequency fluctuation for this
    step.  Raises :class:`ModeHopError` when the current-induced detuning
    exceeds ``params.mode_hop_limit``.
    """
    if not dt > 0 or dt > max_step(params) * (1 + 1e-12):
        raise ValueError(f"dt={dt!r} outside (0, {max_step(params):.3e}]")
    if not all(math.isfinite(x) for x in (i_mod, v_piezo, noise_sample)):
        raise ValueError("non-finite laser input")
    c = coeffs if coeffs is not None else actuator_coefficients(params, dt)

    thermal = c.th_b0 * (i_mod + state.thermal_u) - c.th_a1 * state.thermal_y
    current_shift = thermal - params.k_carrier * i_mod
    if abs(current_shift) > params.mode_hop_limit:
        raise ModeHopError(
            f"current-induced detuning {current_shift:.4g} Hz exceeds {params.mode_hop_limit:.4g} Hz"
        )

    piezo = c.pz_b0 * v_piezo + state.piezo_s1
    s1 = c.pz_b1 * v_piezo - c.pz_a1 * piezo + state.piezo_s2
    s2 = c.pz_b2 * v_piezo - c.pz_a2 * piezo

    freq = params.detuning0 + current_shift + piezo + noise_sample
    return replace(
        state,
        phase=state.phase + 2 * math.pi * freq * dt,
        freq=freq,
        thermal_y=thermal,
        thermal_u=i_mod,
        piezo_s1=s1,
        piezo_s2=s2,
    )
