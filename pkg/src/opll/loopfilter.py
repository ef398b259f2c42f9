"""Analog feedback chain between the charge pump and the laser actuators.

Signal flow::

    i_pump -> PI node (R9, C1; clamped 0..5 V) -> x2 preamp -> +(-5 V) bias
           -> x300 main stage (clamped) -+-> lead filter -> fast gain -> current modulator
                                         +-> slow integrator (R18, C8; clamped) -> piezo

Component values are expressed as time constants.  The defaults put the
loop bandwidth near 1 MHz with the laser defaults of :mod:`opll.laser`.

Without the current path the piezo loop integrates twice beyond the PI node,
so its phase never clears -180 degrees and it oscillates at any slow gain.
The fast path restores the margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class LoopConfig:
    r9_tau: float = 1.0  # V/mA, proportional transimpedance of the PI node
    c1_tau: float = 8.0e-7  # mA*s/V, integral constant of the PI node
    rail_lo: float = 0.0
    rail_hi: float = 5.0
    pre_gain: float = 2.0
    bias: float = -5.0
    main_gain: float = 300.0
    main_rails: float = 12.0  # V, symmetric
    lead_tau1: float = 5.03e-7
    lead_tau2: float = 5.03e-8
    fast_gain: float = 0.5
    slow_tau: float = 1.0e-2  # s, R18*C8
    slow_limits: float = 10.0  # V, symmetric
    rails_enabled: bool = True

    def __post_init__(self) -> None:
        values = [getattr(self, name) for name in self.__dataclass_fields__ if name != "rails_enabled"]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("loop constants must be finite")
        if not self.lead_tau1 > self.lead_tau2 > 0:
            raise ValueError("lead filter needs lead_tau1 > lead_tau2 > 0")
        if not self.rail_lo < self.rail_hi:
            raise ValueError("rail_lo must be below rail_hi")
        for name in ("r9_tau", "c1_tau", "slow_tau", "main_rails", "slow_limits", "pre_gain"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.fast_gain < 0:
            raise ValueError("fast_gain must be non-negative")

    @property
    def pi_lock_voltage(self) -> float:
        """PI-node voltage that centers the main stage output on zero."""
        return -self.bias / self.pre_gain


@dataclass(frozen=True)
class FilterChainState:
    pi_integral: float = 0.0
    lead_state: float = 0.0
    slow_integral: float = 0.0
    overrun: bool = False
    v_main: float = 0.0  # last main-stage output, diagnostic only

    @classmethod
    def locked(cls, cfg: LoopConfig) -> "FilterChainState":
        """Operating point with the main stage at zero and both integrators centered."""
        return cls(pi_integral=cfg.pi_lock_voltage)

    def reset_overrun(self) -> "FilterChainState":
        return replace(self, overrun=False)


def _clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def filter_step(
    state: FilterChainState, cfg: LoopConfig, i_pump: float, dt: float
) -> tuple[FilterChainState, float, float]:
    """Advance the chain by ``dt`` with step-averaged pump current ``i_pump`` (mA).

    Returns ``(state, fast_out, slow_out)``.  The PI capacitor voltage is held
    inside the node rails as well (the pump cannot drive it past them).
    The lead filter is discretized exactly for a held input, so a step at its
    input appears at the output multiplied by ``lead_tau1 / lead_tau2``.
    """
    if not (dt > 0 and math.isfinite(i_pump)):
        raise ValueError("need dt > 0 and a finite pump current")
    clamp = cfg.rails_enabled

    integral = state.pi_integral + i_pump * dt / cfg.c1_tau
    v_pi = i_pump * cfg.r9_tau + integral
    if clamp:
        integral = _clamp(integral, cfg.rail_lo, cfg.rail_hi)
        v_pi = _clamp(v_pi, cfg.rail_lo, cfg.rail_hi)

    v3 = cfg.main_gain * (cfg.pre_gain * v_pi + cfg.bias)
    if clamp:
        v3 = _clamp(v3, -cfg.main_rails, cfg.main_rails)

    ratio = cfg.lead_tau1 / cfg.lead_tau2
    decay = math.exp(-dt / cfg.lead_tau2)
    lead_out = ratio * v3 + (1.0 - ratio) * state.lead_state
    lead_state = decay * state.lead_state + (1.0 - decay) * v3
    fast_out = cfg.fast_gain * lead_out

    slow = state.slow_integral + v3 * dt / cfg.slow_tau
    overrun = state.overrun
    if clamp and abs(slow) >= cfg.slow_limits:
        slow = math.copysign(cfg.slow_limits, slow)
        overrun = True

    new = FilterChainState(integral, lead_state, slow, overrun, v3)
    return new, fast_out, slow


def lead_response(cfg: LoopConfig, f) -> np.ndarray | complex:
    """Continuous lead-filter response ``(1 + i w tau1) / (1 + i w tau2)``."""
    f = np.asarray(f, dtype=float)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    w = 2 * np.pi * f
    h = (1 + 1j * w * cfg.lead_tau1) / (1 + 1j * w * cfg.lead_tau2)
    return complex(h) if np.ndim(h) == 0 else h


def pi_response(cfg: LoopConfig, f) -> np.ndarray | complex:
    """Small-signal PI-node impedance ``r9_tau + 1 / (s c1_tau)`` in V/mA."""
    f = np.asarray(f, dtype=float)
    s = 2j * np.pi * f
    with np.errstate(divide="ignore"):
        h = cfg.r9_tau + 1.0 / (s * cfg.c1_tau)
    return complex(h) if np.ndim(h) == 0 else h


def max_phase_advance(cfg: LoopConfig) -> tuple[float, float]:
    """Peak phase lead (deg) of the lead filter and the frequency where it occurs."""
    r = cfg.lead_tau1 / cfg.lead_tau2
    f_star = 1.0 / (2 * math.pi * math.sqrt(cfg.lead_tau1 * cfg.lead_tau2))
    return math.degrees(math.asin((r - 1) / (r + 1))), f_star
