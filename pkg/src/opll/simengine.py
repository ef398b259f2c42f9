"""Closed-loop OPLL simulation in the baseband phase domain.

Only the beat phase (slave minus master optical phase) is simulated; the GHz
carrier exists as a deterministic ramp ``2*pi*f_beat*t`` that is divided
down together with the fluctuations.  Each fixed step of length ``dt``:

1. drives the laser actuators with the previous filter outputs,
2. advances the laser phase,
3. runs the discriminator over the step with sub-step edge timing,
4. feeds the step-averaged pump current through the filter chain.

Noise sources (all drawn up front, one independent stream each):

* slave free-running frequency noise,
* master phase noise (enters the beat with a minus sign),
* reference-oscillator phase noise from a dBc/Hz table,
* the discriminator floor, injected as white phase noise at the PFD input,
* detector (measurement) noise, added to the recorded beat phase only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import signal

from . import _kernel
from .laser import LaserParams, actuator_coefficients, current_fm_response, max_step, piezo_response
from .loopfilter import FilterChainState, LoopConfig, lead_response, pi_response
from .noise import (
    DbcSpec,
    PhaseSeries,
    PowerLawNoiseSpec,
    pfd_noise_floor_dbc,
    synthesize_psd,
)
from .pfd import PfdConfig

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# noise stream identifiers for SeedSequence
_STREAM_LASER = 1
_STREAM_MASTER = 2
_STREAM_REF = 3
_STREAM_PFD = 4
_STREAM_DETECTOR = 5


class ConfigError(ValueError):
    """A SimConfig violates one of its invariants."""


class LockConditionError(ConfigError):
    """f_ref / R does not match f_beat / (P * N)."""


class NotLockedError(RuntimeError):
    """A loop failed to lock in a multi-loop experiment."""

    def __init__(self, loop: str, record: "SimRecord"):
        super().__init__(f"loop {loop!r} did not lock ({record.abort_reason or 'phase error unbounded'})")
        self.loop = loop
        self.record = record


@dataclass(frozen=True)
class SimConfig:
    f_beat_target: float = 6.9e9
    f_ref: float | None = None  # None: derived from the lock condition
    laser: LaserParams = field(default_factory=LaserParams)
    pfd: PfdConfig = field(default_factory=PfdConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    ref_noise: DbcSpec | None = None
    ref_noise_bandwidth: float = 1.0e7  # Hz; reference noise is zero above this offset
    master_noise: PowerLawNoiseSpec = field(default_factory=PowerLawNoiseSpec)
    detector_floor: PowerLawNoiseSpec = field(default_factory=PowerLawNoiseSpec)
    pfd_floor: bool = True
    fs: float = 2.0e8
    duration: float = 1.0e-2
    seed: int = 0
    master_seed: int | None = None
    ref_seed: int | None = None
    modulator_gain: float = 1.0  # mA/V of the current modulator
    hold_loop_gain: bool = True
    gain_ref_modulus: int = 96
    fast_enabled: bool = True
    slow_enabled: bool = True
    start_locked: bool = True
    lock_threshold: float = math.pi / 2  # divided-phase rad
    lock_periods: int = 10_000
    divergence_bound: float = 1.0e5  # rad of beat phase error
    max_samples: int = 50_000_000
    record_every: int = 1

    @property
    def dt(self) -> float:
        return 1.0 / self.fs

    @property
    def n_steps(self) -> int:
        return int(round(self.duration * self.fs))

    @property
    def ref_frequency(self) -> float:
        if self.f_ref is not None:
            return self.f_ref
        return self.f_beat_target * self.pfd.r_div / self.pfd.beat_modulus

    @property
    def f_pfd(self) -> float:
        """Comparison frequency at the discriminator."""
        return self.f_beat_target / self.pfd.beat_modulus

    @property
    def effective_i_cp(self) -> float:
        """Pump current after optional rescaling that keeps the loop gain independent of P*N."""
        if self.hold_loop_gain:
            return self.pfd.i_cp * self.pfd.beat_modulus / self.gain_ref_modulus
        return self.pfd.i_cp

    def with_updates(self, **kwargs) -> "SimConfig":
        return replace(self, **kwargs)


@dataclass(eq=False)
class SimRecord:
    beat_phase: PhaseSeries
    phase_error: np.ndarray
    fast_drive: np.ndarray
    slow_drive: np.ndarray
    main_stage: np.ndarray
    lock_flag_time: float | None
    overrun_events: list[float]
    abort_reason: str | None = None
    f_beat_target: float = 0.0
    beat_modulus: int = 1

    @property
    def locked(self) -> bool:
        return self.lock_flag_time is not None and self.abort_reason is None

    @property
    def fs(self) -> float:
        return self.beat_phase.sample_rate

    @property
    def times(self) -> np.ndarray:
        return self.beat_phase.times

    def locked_slice(self) -> slice:
        """Samples from the lock time onwards (everything if never locked)."""
        if self.lock_flag_time is None:
            return slice(0, len(self.phase_error))
        start = int(math.ceil((self.lock_flag_time - self.beat_phase.t0) * self.fs))
        return slice(max(start, 0), len(self.phase_error))

    def locked_phase_variance(self) -> float:
        """Variance of the phase error after lock (mean removed)."""
        err = self.phase_error[self.locked_slice()]
        err = err[np.isfinite(err)]
        return float(np.var(err)) if err.size else float("nan")


def validate(cfg: SimConfig) -> None:
    """Raise :class:`ConfigError` if ``cfg`` breaks an invariant."""
    if not (cfg.f_beat_target > 0 and cfg.fs > 0 and cfg.duration > 0):
        raise ConfigError("f_beat_target, fs and duration must be positive")
    f_ref = cfg.ref_frequency
    if not f_ref > 0:
        raise ConfigError("f_ref must be positive")
    mismatch = abs(f_ref / cfg.pfd.r_div - cfg.f_pfd) / cfg.f_pfd
    if mismatch > 1e-6:
        raise LockConditionError(
            f"lock condition violated: f_ref/R = {f_ref / cfg.pfd.r_div:.9g} Hz but "
            f"f_beat/(P*N) = {cfg.f_pfd:.9g} Hz (mismatch {mismatch:.3g} > 1 ppm)"
        )
    if cfg.dt > max_step(cfg.laser) * (1 + 1e-12):
        raise ConfigError(
            f"fs={cfg.fs:.4g} Hz too low to resolve the FM crossover; need >= {1 / max_step(cfg.laser):.4g} Hz"
        )
    bw = estimate_loop_bandwidth(cfg)
    if bw is not None and cfg.fs < 20 * bw:
        raise ConfigError(f"fs={cfg.fs:.4g} Hz below 20x loop bandwidth ({bw:.4g} Hz)")
    if cfg.n_steps < 2:
        raise ConfigError("duration * fs must give at least two steps")
    if cfg.n_steps > cfg.max_samples:
        raise ConfigError(f"{cfg.n_steps} steps exceed the memory budget of {cfg.max_samples}")
    if cfg.record_every < 1:
        raise ConfigError("record_every must be >= 1")
    if cfg.modulator_gain < 0:
        raise ConfigError("modulator_gain must be non-negative")
    if not cfg.ref_noise_bandwidth > 0:
        raise ConfigError("ref_noise_bandwidth must be positive")


# ---------------------------------------------------------------------------
# linear small-signal model


def open_loop_gain(cfg: SimConfig, f, delay: float | None = None) -> np.ndarray:
    """Small-signal open-loop gain from beat phase error back to beat phase.

    ``delay`` (s) models the discriminator sampling and the one-step latency;
    by default half a comparison period plus one simulation step.
    """
    f = np.asarray(f, dtype=float)
    if delay is None:
        delay = 0.5 / cfg.f_pfd + cfg.dt
    s = 2j * np.pi * f
    loop = cfg.loop
    kpd = cfg.effective_i_cp / (TWO_PI * cfg.pfd.beat_modulus)
    front = kpd * pi_response(loop, f) * loop.pre_gain * loop.main_gain
    act = np.zeros_like(s)
    if cfg.fast_enabled:
        act = act + loop.fast_gain * cfg.modulator_gain * lead_response(loop, f) * current_fm_response(cfg.laser, f)
    if cfg.slow_enabled:
        act = act + piezo_response(cfg.laser, f) / (s * loop.slow_tau)
    return front * act * TWO_PI / s * np.exp(-s * delay)


def estimate_loop_bandwidth(cfg: SimConfig) -> float | None:
    """Highest frequency where the open-loop gain magnitude crosses unity."""
    f = np.logspace(0, math.log10(cfg.fs / 2), 4000)
    mag = np.abs(open_loop_gain(cfg, f, delay=0.0))
    above = np.nonzero(mag >= 1)[0]
    if above.size == 0:
        return None
    return float(f[above[-1]])


def predicted_phase_variance(cfg: SimConfig, f_lo: float | None = None, n_points: int = 20000) -> dict:
    """Linear-model estimate of the locked phase-error variance, by source.

    Integrates each noise PSD times its closed-loop transfer over
    ``[f_lo, fs/2]`` (``f_lo`` defaults to ``1/duration``).
    """
    f_lo = f_lo or 1.0 / cfg.duration
    f = np.logspace(math.log10(f_lo), math.log10(cfg.fs / 2), n_points)
    gain = open_loop_gain(cfg, f)
    err = np.abs(1.0 / (1.0 + gain)) ** 2
    track = np.abs(gain / (1.0 + gain)) ** 2
    mult = cfg.pfd.beat_modulus / cfg.pfd.r_div
    parts = {
        "laser": np.trapezoid(cfg.laser.free_run_noise.psd(f) * err, f),
        "master": np.trapezoid(cfg.master_noise.psd(f) * err, f),
        "reference": np.trapezoid(_ref_psd(cfg)(f) * mult**2 * track, f) if cfg.ref_noise else 0.0,
        "pfd_floor": np.trapezoid(_floor_psd(cfg)(f) * track, f) if cfg.pfd_floor else 0.0,
    }
    parts = {k: float(v) for k, v in parts.items()}
    parts["total"] = sum(parts.values())
    return parts


# ---------------------------------------------------------------------------
# noise


def pfd_floor_psd(cfg: SimConfig) -> float:
    """Beat-referred one-sided phase PSD (rad^2/Hz) of the discriminator floor."""
    level = pfd_noise_floor_dbc(cfg.pfd.beat_modulus, cfg.f_beat_target)
    return 2.0 * 10.0 ** (level / 10.0)


def _band_limited(psd, f_max: float):
    return lambda f: np.where(f <= f_max, psd(f), 0.0)


def _ref_psd(cfg: SimConfig):
    # a finite source bandwidth keeps the divided-and-sampled reference from
    # aliasing a floor whose extent would otherwise be set by fs
    return _band_limited(cfg.ref_noise.psd, cfg.ref_noise_bandwidth)


def _floor_psd(cfg: SimConfig):
    # an in-band figure of the sampled detector: white up to half the comparison rate
    level = pfd_floor_psd(cfg)
    return _band_limited(lambda f: np.full_like(f, level), 0.5 * cfg.f_pfd)


def _stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def _draw(psd, n_points: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    # transform length tied to the record duration, not the point count, so that
    # halving dt keeps the frequency grid and the low-frequency draws
    n_fft = 2 * (n_points - 1)
    return synthesize_psd(psd, n_points, fs, rng, n_fft=max(n_fft, n_points))


def pfd_floor_noise(cfg: SimConfig) -> PhaseSeries:
    """The white phase noise injected at the discriminator input (beat-referred)."""
    n = cfg.n_steps + 1
    if not cfg.pfd_floor:
        return PhaseSeries(np.zeros(n), cfg.fs)
    return PhaseSeries(_draw(_floor_psd(cfg), n, cfg.fs, _stream(cfg.seed, _STREAM_PFD)), cfg.fs)


@dataclass(eq=False)
class NoiseRealization:
    laser_freq: np.ndarray  # Hz per step, length n
    master_phase: np.ndarray  # rad at step boundaries, length n+1
    ref_phase: np.ndarray  # rad of the reference oscillator, length n+1
    pfd_phase: np.ndarray  # beat-referred rad, length n+1
    detector_phase: np.ndarray  # rad, length n (record samples)


def draw_noise(cfg: SimConfig) -> NoiseRealization:
    n = cfg.n_steps
    fs = cfg.fs
    zeros = np.zeros(n + 1)

    spec = cfg.laser.free_run_noise
    if spec.is_zero:
        laser_freq = np.zeros(n)
    else:
        phi = _draw(spec.psd, n + 1, fs, _stream(cfg.seed, _STREAM_LASER))
        laser_freq = np.diff(phi) * fs / TWO_PI

    master_seed = cfg.seed if cfg.master_seed is None else cfg.master_seed
    if cfg.master_noise.is_zero:
        master = zeros
    else:
        master = _draw(cfg.master_noise.psd, n + 1, fs, _stream(master_seed, _STREAM_MASTER))

    ref_seed = cfg.seed if cfg.ref_seed is None else cfg.ref_seed
    ref = zeros if cfg.ref_noise is None else _draw(_ref_psd(cfg), n + 1, fs, _stream(ref_seed, _STREAM_REF))

    pfd = pfd_floor_noise(cfg).samples

    if cfg.detector_floor.is_zero:
        det = np.zeros(n)
    else:
        det = _draw(cfg.detector_floor.psd, n, fs, _stream(cfg.seed, _STREAM_DETECTOR))
    return NoiseRealization(laser_freq, master, ref, pfd, det)


# ---------------------------------------------------------------------------
# simulation


def _lock_time(err_div: np.ndarray, fs: float, t0: float, threshold: float, window: int) -> float | None:
    """Earliest time after which the divided phase error stays within +-threshold of a fixed point.

    Scans suffixes: lock is declared at the first sample whose suffix has a
    half-range <= threshold and spans at least ``window`` samples.
    """
    if err_div.size == 0 or not np.all(np.isfinite(err_div)):
        return None
    hi = np.maximum.accumulate(err_div[::-1])[::-1]
    lo = np.minimum.accumulate(err_div[::-1])[::-1]
    ok = (hi - lo) <= 2 * threshold
    # ok is monotone non-decreasing along the record
    idx = int(np.argmax(ok)) if ok[-1] else None
    if idx is None or err_div.size - idx < window:
        return None
    return t0 + idx / fs


def _overrun_times(slow: np.ndarray, limit: float, times: np.ndarray) -> list[float]:
    at = np.abs(np.nan_to_num(slow)) >= limit
    start = np.nonzero(at & ~np.concatenate(([False], at[:-1])))[0]
    return [float(times[i]) for i in start]


def run_simulation(cfg: SimConfig, noise: NoiseRealization | None = None) -> SimRecord:
    """Run one closed-loop simulation; never raises for a loop that fails to lock."""
    validate(cfg)
    n = cfg.n_steps
    dt = cfg.dt
    noise = noise if noise is not None else draw_noise(cfg)
    t = np.arange(n + 1) * dt
    modulus = cfg.pfd.beat_modulus
    r = cfg.pfd.r_div

    # phase processes are referenced to their t=0 values so that a loop
    # started at its operating point sees zero initial phase mismatch
    ref_phase = noise.ref_phase - noise.ref_phase[0]
    master = noise.master_phase - noise.master_phase[0]
    pfd_phase = noise.pfd_phase - noise.pfd_phase[0]
    ref_div = (TWO_PI * cfg.ref_frequency * t + ref_phase) / r
    beat_div_base = (TWO_PI * cfg.f_beat_target * t + pfd_phase - master) / modulus

    c = actuator_coefficients(cfg.laser, dt)
    loop = cfg.loop
    state0 = FilterChainState.locked(loop) if cfg.start_locked else FilterChainState()
    fast_gain = loop.fast_gain if cfg.fast_enabled else 0.0
    laser = cfg.laser

    phase_err, fast, slow, main, _pump, status, stop = _kernel.run_loop(
        n,
        dt,
        laser.detuning0,
        laser.k_carrier,
        c.th_b0,
        c.th_a1,
        c.pz_b0,
        c.pz_b1,
        c.pz_b2,
        c.pz_a1,
        c.pz_a2,
        laser.mode_hop_limit,
        noise.laser_freq,
        beat_div_base,
        ref_div,
        float(modulus),
        cfg.effective_i_cp,
        loop.r9_tau,
        loop.c1_tau,
        loop.rail_lo,
        loop.rail_hi,
        loop.pre_gain,
        loop.bias,
        loop.main_gain,
        loop.main_rails,
        loop.lead_tau1 / loop.lead_tau2,
        math.exp(-dt / loop.lead_tau2),
        fast_gain,
        loop.slow_tau,
        loop.slow_limits,
        loop.rails_enabled,
        cfg.modulator_gain,
        cfg.slow_enabled,
        state0.pi_integral,
        state0.lead_state,
        state0.slow_integral,
        master,
        cfg.divergence_bound,
    )

    abort = None
    if status == _kernel.STATUS_MODE_HOP:
        abort = f"mode hop: current-induced detuning exceeded {laser.mode_hop_limit:.4g} Hz at t={stop * dt:.6g} s"
    elif status == _kernel.STATUS_DIVERGED:
        abort = f"diverged: |phase error| > {cfg.divergence_bound:.4g} rad with actuator at clamp at t={stop * dt:.6g} s"
    if abort:
        log.warning(abort)

    times = (np.arange(n) + 1) * dt
    beat = TWO_PI * cfg.f_beat_target * times + phase_err + noise.detector_phase

    lock_time = None
    if abort is None:
        window = int(math.ceil(cfg.lock_periods / cfg.f_pfd * cfg.fs))
        err_div = phase_err / modulus
        lock_time = _lock_time(err_div, cfg.fs, dt, cfg.lock_threshold, window)

    overruns = _overrun_times(slow, loop.slow_limits, times) if cfg.slow_enabled and loop.rails_enabled else []

    k = cfg.record_every
    return SimRecord(
        beat_phase=PhaseSeries(beat[k - 1 :: k], cfg.fs / k, t0=dt * k),
        phase_error=phase_err[k - 1 :: k],
        fast_drive=fast[k - 1 :: k],
        slow_drive=slow[k - 1 :: k],
        main_stage=main[k - 1 :: k],
        lock_flag_time=lock_time,
        overrun_events=overruns,
        abort_reason=abort,
        f_beat_target=cfg.f_beat_target,
        beat_modulus=modulus,
    )


def two_slave_experiment(
    cfg_a: SimConfig,
    cfg_b: SimConfig,
    shared_seed: int = 0,
    require_lock: bool = True,
    highpass_hz: float | None = None,
) -> PhaseSeries:
    """Differential phase of two slaves locked to one master and one reference.

    Master and reference noise are drawn from ``shared_seed`` for both loops;
    loop-local noise (slave, discriminator floor, detector) follows each
    config's own ``seed``.  Raises :class:`NotLockedError` naming the loop
    that failed when ``require_lock`` is set.

    ``highpass_hz`` optionally passes the result through a causal first-order
    high-pass.  It stands in for a slow servo that holds a measurement
    interferometer at mid-fringe, which removes drift below the corner.
    """
    if cfg_a.n_steps != cfg_b.n_steps or cfg_a.fs != cfg_b.fs or cfg_a.record_every != cfg_b.record_every:
        raise ConfigError("both loops need the same fs, duration and record_every")
    records = {}
    for name, cfg in (("a", cfg_a), ("b", cfg_b)):
        cfg = replace(cfg, master_seed=shared_seed, ref_seed=shared_seed)
        rec = run_simulation(cfg)
        if require_lock and not rec.locked:
            raise NotLockedError(name, rec)
        records[name] = rec
    diff = records["a"].beat_phase - records["b"].beat_phase
    return diff if highpass_hz is None else highpass(diff, highpass_hz)


def highpass(series: PhaseSeries, corner_hz: float) -> PhaseSeries:
    """Causal first-order high-pass (bilinear, prewarped) of a phase series."""
    if not 0 < corner_hz < series.sample_rate / 2:
        raise ValueError("corner_hz must lie between 0 and the Nyquist frequency")
    sos = signal.butter(1, corner_hz, btype="highpass", fs=series.sample_rate, output="sos")
    x = series.samples - series.samples[0]
    return PhaseSeries(signal.sosfilt(sos, x), series.sample_rate, t0=series.t0)


def run_sweep(configs: Sequence[SimConfig], workers: int = 1) -> list[SimRecord]:
    """Run independent simulations, optionally on a thread pool (the kernel releases the GIL).

    Results come back in input order regardless of ``workers``.
    """
    if workers <= 1 or len(configs) <= 1:
        return [run_simulation(c) for c in configs]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_simulation, configs))
