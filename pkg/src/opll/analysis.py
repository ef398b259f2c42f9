"""Measurement pipeline: spectra, carrier-fraction phase variance, MVAR, RMS phase."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import signal, stats

from .noise import PhaseSeries

log = logging.getLogger(__name__)

#: Log-scale envelope-detector averaging bias for noise, dB (10*gamma/ln 10).
LOG_DETECTOR_CORRECTION_DB = 2.51
#: Noise bandwidth of the resolution filter relative to its nominal RBW, dB.
RBW_SHAPE_CORRECTION_DB = 0.52


class CarrierNotDominantWarning(UserWarning):
    """Carrier fraction below 1 %: the small-noise premise of the estimator fails."""


@dataclass(eq=False)
class Spectrum:
    """One-sided power spectral density on a uniform frequency grid."""

    freqs: np.ndarray
    psd: np.ndarray
    rbw_equivalent: float
    units: str = "rad^2/Hz"

    def __post_init__(self) -> None:
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.psd = np.asarray(self.psd, dtype=float)
        if self.freqs.shape != self.psd.shape or self.freqs.ndim != 1:
            raise ValueError("freqs and psd must be 1-D arrays of equal length")
        if np.any(self.psd < 0):
            raise ValueError("psd must be non-negative")
        if self.freqs.size > 2:
            steps = np.diff(self.freqs)
            if not np.allclose(steps, steps[0], rtol=1e-6, atol=0):
                raise ValueError("frequency grid must be uniform")

    @property
    def df(self) -> float:
        return float(self.freqs[1] - self.freqs[0]) if self.freqs.size > 1 else self.rbw_equivalent

    def integrate(self, f_lo: float = -np.inf, f_hi: float = np.inf) -> float:
        """Total power between ``f_lo`` and ``f_hi`` (rectangle rule on the bin grid)."""
        sel = (self.freqs >= f_lo) & (self.freqs <= f_hi)
        return float(np.sum(self.psd[sel]) * self.df)


@dataclass(eq=False)
class AllanCurve:
    taus: np.ndarray
    mdev: np.ndarray
    n_samples_per_tau: np.ndarray
    snapped: list[tuple[float, float]] = field(default_factory=list)


class SlopeFit(NamedTuple):
    slope: float
    halfwidth: float  # 95 % confidence half-width
    intercept: float


def welch_psd(
    series: PhaseSeries,
    seg_len: int | None = None,
    overlap: float = 0.5,
    window: str = "hann",
    detrend: str | bool = "constant",
) -> Spectrum:
    """Welch-averaged one-sided PSD of a phase record (density scaling)."""
    n = len(series)
    seg_len = n if seg_len is None else int(seg_len)
    if not 2 <= seg_len <= n:
        raise ValueError(f"seg_len={seg_len} must lie in [2, {n}]")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must lie in [0, 1)")
    noverlap = int(overlap * seg_len)
    if (n - noverlap) // (seg_len - noverlap) < 1:
        raise ValueError("record too short for a single segment")
    freqs, psd = signal.welch(
        series.samples,
        fs=series.sample_rate,
        window=window,
        nperseg=seg_len,
        noverlap=noverlap,
        detrend=detrend,
        scaling="density",
    )
    w = signal.get_window(window, seg_len)
    enbw = series.sample_rate * np.sum(w**2) / np.sum(w) ** 2
    return Spectrum(freqs, psd, float(enbw))


def _baseband_power(series: PhaseSeries, detrend: bool) -> np.ndarray:
    phi = series.samples
    if detrend and phi.size > 1:
        t = np.arange(phi.size)
        phi = phi - np.polyval(np.polyfit(t, phi, 1), t)
    s = np.exp(1j * phi)
    return np.abs(np.fft.fft(s)) ** 2 / s.size**2


def carrier_fraction(data: PhaseSeries | Spectrum, carrier_bins: int = 3, detrend: bool = True) -> float:
    """Ratio of carrier power to total power.

    For a :class:`PhaseSeries` the unit-amplitude carrier ``exp(i phi)`` is
    formed (after removing a linear phase trend unless ``detrend`` is
    false) and its periodogram used; for a :class:`Spectrum` the bins are
    taken as given.  The carrier is the maximum bin together with its
    neighbours, ``carrier_bins`` bins in total.  The denominator is the full
    span, carrier included.
    """
    if carrier_bins < 1:
        raise ValueError("carrier_bins must be >= 1")
    if isinstance(data, PhaseSeries):
        power = _baseband_power(data, detrend)
        circular = True
    else:
        power = data.psd * data.df
        circular = False
    total = float(np.sum(power))
    if total <= 0:
        raise ValueError("spectrum carries no power")
    peak = int(np.argmax(power))
    half = carrier_bins // 2
    idx = np.arange(peak - half, peak - half + carrier_bins)
    if circular:
        idx %= power.size
    else:
        idx = idx[(idx >= 0) & (idx < power.size)]
    return float(np.sum(power[idx])) / total


def carrier_phase_variance(
    data: PhaseSeries | Spectrum,
    carrier_bins: int = 3,
    carrier_bin_width: float | None = None,
    detrend: bool = True,
) -> float:
    """Mean-square phase deviation from the carrier power fraction.

    ``<dphi^2> = -ln(P_carrier / P_total)``.  ``carrier_bin_width`` (Hz), when
    given, overrides ``carrier_bins``.  Emits
    :class:`CarrierNotDominantWarning` when the carrier holds less than 1 % of
    the power.
    """
    if carrier_bin_width is not None:
        df = data.sample_rate / len(data) if isinstance(data, PhaseSeries) else data.df
        carrier_bins = max(1, int(round(carrier_bin_width / df)))
    frac = carrier_fraction(data, carrier_bins, detrend)
    if frac < 0.01:
        warnings.warn(
            f"carrier fraction {frac:.3g} < 0.01; phase variance estimate unreliable",
            CarrierNotDominantWarning,
            stacklevel=2,
        )
    return max(0.0, -math.log(min(frac, 1.0))) if frac > 0 else math.inf


def sa_noise_corrections(reading, rbw: float):
    """Convert an averaged log-detector noise reading (dB) to a 1-Hz density.

    Adds the log-averaging bias, subtracts the resolution-filter shape
    correction and normalizes the resolution bandwidth to 1 Hz.
    """
    if not rbw > 0:
        raise ValueError("rbw must be positive")
    return (
        np.asarray(reading, dtype=float) + LOG_DETECTOR_CORRECTION_DB - RBW_SHAPE_CORRECTION_DB - 10 * np.log10(rbw)
    )


def sa_carrier_phase_variance(
    freqs: Sequence[float],
    readings_dbm: Sequence[float],
    rbw: float,
    exclusion_hz: float | None = None,
) -> float:
    """Phase variance from a swept-analyzer trace with average log detection.

    The carrier power is the direct reading at the peak; every other point
    more than ``exclusion_hz`` (default: one RBW) from the peak is corrected
    to a 1-Hz density and integrated over the point spacing.
    """
    freqs = np.asarray(freqs, dtype=float)
    readings = np.asarray(readings_dbm, dtype=float)
    if freqs.shape != readings.shape or freqs.size < 3:
        raise ValueError("need matching frequency and reading arrays of at least 3 points")
    exclusion_hz = rbw if exclusion_hz is None else exclusion_hz
    peak = int(np.argmax(readings))
    p_carrier = 10 ** (readings[peak] / 10)
    spacing = float(np.mean(np.diff(freqs)))
    noise = np.abs(freqs - freqs[peak]) > exclusion_hz
    density = 10 ** (sa_noise_corrections(readings[noise], rbw) / 10)
    total = p_carrier + float(np.sum(density)) * spacing
    return -math.log(p_carrier / total)


def _snap_taus(taus: Sequence[float], fs: float) -> tuple[np.ndarray, list[tuple[float, float]]]:
    m = []
    snapped = []
    for tau in taus:
        n = max(1, int(round(tau * fs)))
        if not math.isclose(n / fs, tau, rel_tol=1e-9):
            snapped.append((float(tau), n / fs))
        m.append(n)
    return np.array(m, dtype=np.int64), snapped


def default_taus(n_samples: int, fs: float, per_decade: int = 8) -> np.ndarray:
    """Log-spaced averaging times from 1/fs up to the longest usable (M >= 3n+1)."""
    n_max = max(1, (n_samples - 1) // 3)
    ns = np.unique(np.round(np.logspace(0, math.log10(n_max), max(2, int(per_decade * math.log10(n_max + 1)) + 1))))
    return ns.astype(np.int64) / fs


def mod_allan(series: PhaseSeries, nu0: float, taus: Sequence[float] | None = None) -> AllanCurve:
    """Modified Allan deviation of a phase record with carrier frequency ``nu0``.

    Phase is converted to time deviation ``x = phi / (2 pi nu0)``.  For
    averaging factor ``n`` (``tau = n / fs``)::

        mvar = sum_j (sum_{i=j}^{j+n-1} x[i+2n] - 2 x[i+n] + x[i])^2 / (2 n^2 tau^2 (M - 3n + 1))

    Requested ``taus`` are snapped to integer multiples of the sample period;
    the changes are listed in ``AllanCurve.snapped``.
    """
    if not nu0 > 0:
        raise ValueError("nu0 must be positive")
    fs = series.sample_rate
    x = series.samples / (2 * math.pi * nu0)
    m = x.size
    if taus is None:
        taus = default_taus(m, fs)
    ns, snapped = _snap_taus(taus, fs)
    for req, used in snapped:
        log.info("tau %.6g s snapped to %.6g s", req, used)
    out = np.empty(ns.size)
    counts = np.empty(ns.size, dtype=np.int64)
    for k, n in enumerate(ns):
        if m < 3 * n + 1:
            raise ValueError(f"tau={n / fs:.4g} s needs {3 * n + 1} samples, series has {m}")
        d = x[2 * n :] - 2 * x[n:-n] + x[: -2 * n]
        cs = np.concatenate(([0.0], np.cumsum(d)))
        sums = cs[n:] - cs[:-n]
        tau = n / fs
        count = m - 3 * n + 1
        out[k] = math.sqrt(np.sum(sums**2) / (2.0 * n**2 * tau**2 * count))
        counts[k] = count
    return AllanCurve(ns / fs, out, counts, snapped)


def fit_loglog_slope(data, lo: float | None = None, hi: float | None = None) -> SlopeFit:
    """Least-squares slope of ``log y`` against ``log x`` within ``[lo, hi]``.

    ``data`` is an :class:`AllanCurve`, a :class:`Spectrum` or an ``(x, y)`` pair.
    """
    if isinstance(data, AllanCurve):
        x, y = data.taus, data.mdev
    elif isinstance(data, Spectrum):
        x, y = data.freqs, data.psd
    else:
        x, y = (np.asarray(a, dtype=float) for a in data)
    sel = np.ones(x.shape, dtype=bool)
    if lo is not None:
        sel &= x >= lo
    if hi is not None:
        sel &= x <= hi
    if isinstance(data, Spectrum):
        sel &= x > 0
    x, y = x[sel], y[sel]
    if x.size < 5:
        raise ValueError(f"need at least 5 points in range, got {x.size}")
    if np.any(y <= 0) or np.any(x <= 0):
        raise ValueError("log-log fit needs positive values")
    res = stats.linregress(np.log10(x), np.log10(y))
    t = stats.t.ppf(0.975, x.size - 2)
    return SlopeFit(float(res.slope), float(t * res.stderr), float(res.intercept))


def rms_phase_variance(series: PhaseSeries, sample_rate_out: float) -> float:
    """Phase variance after bin-mean decimation to ``sample_rate_out`` and linear detrending."""
    if not 0 < sample_rate_out <= series.sample_rate * (1 + 1e-12):
        raise ValueError("sample_rate_out must lie in (0, fs]")
    k = max(1, int(round(series.sample_rate / sample_rate_out)))
    phi = series.samples
    usable = phi.size - phi.size % k
    if usable < k:
        raise ValueError("series shorter than one decimation bin")
    dec = phi[:usable].reshape(-1, k).mean(axis=1)
    if dec.size < 2:
        return 0.0
    t = np.arange(dec.size)
    resid = dec - np.polyval(np.polyfit(t, dec, 1), t)
    return float(np.var(resid))
