"""Digital phase-frequency discriminator: dividers, dual flip-flop, charge pump.

Dividers are modeled as phase counters: a divide-by-M stage emits one edge
every time the accumulated input phase advances by ``2*pi*M``.  Working on
baseband phase is exact for a counter and avoids ever sampling the GHz beat.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .noise import PhaseSeries

N_DIV_RANGE = (24, 500_000)
R_DIV_RANGE = (1, 16_383)

TWO_PI = 2.0 * math.pi

# crossings closer than this (in counter cycles) to a threshold count as reached
_EDGE_TOL = 1e-9


class NegativeFrequencyError(ValueError):
    """Phase decreased: the divider input would need a negative frequency."""


@dataclass(frozen=True)
class PfdConfig:
    prescaler_p: int = 1
    n_div: int = 96
    r_div: int = 3
    i_cp: float = 1.0  # mA, normalized pump magnitude

    def __post_init__(self) -> None:
        for name in ("prescaler_p", "n_div", "r_div"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ValueError(f"{name} must be an integer")
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.prescaler_p < 1:
            raise ValueError("prescaler_p must be >= 1")
        lo, hi = N_DIV_RANGE
        if not lo <= self.n_div <= hi:
            raise ValueError(f"n_div={self.n_div} outside [{lo}, {hi}]")
        lo, hi = R_DIV_RANGE
        if not lo <= self.r_div <= hi:
            raise ValueError(f"r_div={self.r_div} outside [{lo}, {hi}]")
        if not (math.isfinite(self.i_cp) and self.i_cp > 0):
            raise ValueError("i_cp must be positive")

    @property
    def beat_modulus(self) -> int:
        """Total division applied to the beat note (prescaler times N)."""
        return self.prescaler_p * self.n_div


@dataclass(frozen=True)
class PfdState:
    up: bool = False
    down: bool = False
    ref_accum: float = 0.0  # rad, divided-reference phase
    div_accum: float = 0.0  # rad, divided-beat phase


def edges_from_phase(series: PhaseSeries, modulus: int) -> np.ndarray:
    """Times at which the accumulated phase crosses multiples of ``2*pi*modulus``.

    Phase is accumulated from the first sample; crossing instants are
    linearly interpolated between samples.
    """
    if int(modulus) != modulus or modulus < 1:
        raise ValueError("modulus must be a positive integer")
    phi = series.samples
    step = np.diff(phi)
    if np.any(step < 0):
        raise NegativeFrequencyError("phase decreases: negative beat frequency is unphysical here")
    u = (phi - phi[0]) / (TWO_PI * modulus)
    counts = np.floor(u + _EDGE_TOL).astype(np.int64)
    new = np.diff(counts)
    idx = np.nonzero(new)[0]
    if idx.size == 0:
        return np.empty(0)
    reps = new[idx]
    start = np.repeat(idx, reps)
    # threshold index for every edge: counts[i] + 1 ... counts[i+1]
    offsets = np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps)
    level = counts[start] + 1 + offsets
    u0 = u[start]
    frac = np.clip((level - u0) / (u[start + 1] - u0), 0.0, 1.0)
    return series.t0 + (start + frac) / series.sample_rate


def divide_edges(edges: np.ndarray, modulus: int) -> np.ndarray:
    """Counter applied to an edge train: keep every ``modulus``-th edge."""
    if int(modulus) != modulus or modulus < 1:
        raise ValueError("modulus must be a positive integer")
    return np.asarray(edges)[modulus - 1 :: modulus]


def pfd_step(state: PfdState, ref_edge: bool, div_edge: bool, i_cp: float = 1.0) -> tuple[PfdState, float]:
    """Apply one pair of edge flags to the dual flip-flop.

    A reference edge sets UP and a divided-beat edge sets DOWN.  When both
    are set the AND gate resets them (ideal, zero reset delay).  Returns the new
    state and the pump current ``i_cp * (up - down)``.
    """
    up = state.up or ref_edge
    down = state.down or div_edge
    if up and down:
        up = down = False
    out = i_cp * (int(up) - int(down))
    return replace(state, up=up, down=down), out


def _crossings(start: float, end: float) -> list[float]:
    """Fractions of the interval at which a phase going start -> end crosses 2*pi*m."""
    if end <= start:
        return []
    first = math.floor(start / TWO_PI) + 1
    last = math.floor(end / TWO_PI)
    span = end - start
    return [(TWO_PI * m - start) / span for m in range(first, last + 1)]


def pfd_interval(
    state: PfdState, ref_end: float, div_end: float, i_cp: float = 1.0
) -> tuple[PfdState, float]:
    """Run the discriminator over one simulation step.

    Divided phases move linearly from the accumulators in ``state`` to
    ``ref_end`` / ``div_end``.  Edges inside the step are applied in time
    order; the pump output is piecewise constant between them.  Returns the
    updated state and the step-averaged pump current (charge / dt).
    """
    events = [(t, True) for t in _crossings(state.ref_accum, ref_end)]
    events += [(t, False) for t in _crossings(state.div_accum, div_end)]
    events.sort(key=lambda e: e[0])

    current = i_cp * (int(state.up) - int(state.down))
    charge = 0.0
    t_prev = 0.0
    k = 0
    while k < len(events):
        t = events[k][0]
        ref = div = False
        while k < len(events) and events[k][0] == t:
            if events[k][1]:
                ref = True
            else:
                div = True
            k += 1
        charge += current * (t - t_prev)
        state, current = pfd_step(state, ref, div, i_cp)
        t_prev = t
    charge += current * (1.0 - t_prev)
    return replace(state, ref_accum=ref_end, div_accum=div_end), charge


def mean_pump_output(
    f_ref_div: float,
    f_beat_div: float,
    duration: float,
    dt: float,
    i_cp: float = 1.0,
    phase_offset: float = 0.0,
) -> float:
    """Time-averaged pump current for constant divided frequencies.

    ``phase_offset`` (rad) is the initial lead of the divided reference over
    the divided beat; a negative value makes the beat lead instead.
    """
    n = int(round(duration / dt))
    ref0 = max(phase_offset, 0.0)
    div0 = max(-phase_offset, 0.0)
    state = PfdState(ref_accum=ref0, div_accum=div0)
    total = 0.0
    for k in range(1, n + 1):
        t = k * dt
        state, q = pfd_interval(state, ref0 + TWO_PI * f_ref_div * t, div0 + TWO_PI * f_beat_div * t, i_cp)
        total += q
    return total / n
