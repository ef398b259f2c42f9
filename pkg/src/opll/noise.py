"""Phase-noise descriptions and stochastic phase synthesis.

Two ways of describing a phase-noise spectrum are supported:

* :class:`PowerLawNoiseSpec` -- a sum of power-law terms ``b_alpha * f**alpha``
  (one-sided phase PSD in rad^2/Hz), covering the usual taxonomy
  (white PM ``alpha=0``, flicker PM ``-1``, white FM ``-2``, flicker FM ``-3``,
  random-walk FM ``-4``).
* :class:`DbcSpec` -- a tabulated single-sideband ``L(f)`` in dBc/Hz, as quoted
  on oscillator data sheets.

Synthesis shapes white Gaussian noise in the frequency domain.  Bins are drawn
in order of increasing frequency, so two realizations with the same seed and
the same record duration share their low-frequency content even when their
sample rates differ.  This keeps step-size convergence studies meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

ALLOWED_EXPONENTS = (0, -1, -2, -3, -4)

#: Normalized phase-noise figure of merit of a typical integer-N synthesizer chip, dBc/Hz.
PFD_FLOOR_FOM_DBC = -219.0

# synthesized records are cropped from a longer periodic realization
_PAD_FACTOR = 2


@dataclass(frozen=True)
class PowerLawNoiseSpec:
    """One-sided phase PSD ``S_phi(f) = sum(b * f**alpha)``.

    ``terms`` is a sequence of ``(alpha, b)`` pairs; ``b`` carries units of
    rad^2 Hz^(-alpha-1).  The empty spec describes a noiseless process.
    """

    terms: tuple[tuple[int, float], ...] = ()

    def __post_init__(self) -> None:
        clean = []
        seen = set()
        for alpha, b in self.terms:
            if int(alpha) != alpha or int(alpha) not in ALLOWED_EXPONENTS:
                raise ValueError(f"power-law exponent {alpha!r} not in {ALLOWED_EXPONENTS}")
            alpha = int(alpha)
            if alpha in seen:
                raise ValueError(f"duplicate power-law exponent {alpha}")
            b = float(b)
            if not math.isfinite(b):
                raise ValueError(f"non-finite coefficient for exponent {alpha}")
            if b < 0:
                raise ValueError(f"negative coefficient {b} for exponent {alpha}")
            seen.add(alpha)
            clean.append((alpha, b))
        object.__setattr__(self, "terms", tuple(sorted(clean, reverse=True)))

    @classmethod
    def from_mapping(cls, mapping: dict) -> "PowerLawNoiseSpec":
        """Build from ``{alpha: b}`` (keys may be strings, as in config files)."""
        return cls(tuple((int(k), float(v)) for k, v in mapping.items()))

    @property
    def is_zero(self) -> bool:
        return all(b == 0 for _, b in self.terms)

    def coefficient(self, alpha: int) -> float:
        for a, b in self.terms:
            if a == alpha:
                return b
        return 0.0

    def scaled(self, factor: float) -> "PowerLawNoiseSpec":
        """Return a spec with every coefficient multiplied by ``factor``."""
        return PowerLawNoiseSpec(tuple((a, b * factor) for a, b in self.terms))

    def psd(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        out = np.zeros_like(f)
        pos = f > 0
        for alpha, b in self.terms:
            if b:
                out[pos] += b * f[pos] ** alpha
        return out


@dataclass(frozen=True)
class DbcSpec:
    """Tabulated single-sideband phase noise ``L(f)`` in dBc/Hz."""

    offsets_hz: tuple[float, ...]
    dbc: tuple[float, ...]

    def __post_init__(self) -> None:
        offsets = tuple(float(x) for x in self.offsets_hz)
        levels = tuple(float(x) for x in self.dbc)
        if not offsets:
            raise ValueError("DbcSpec needs at least one point")
        if len(offsets) != len(levels):
            raise ValueError("offsets_hz and dbc differ in length")
        if offsets[0] <= 0 or any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ValueError("offsets must be positive and strictly increasing")
        for level in levels:
            try:
                s = 2.0 * 10.0 ** (level / 10.0)
            except OverflowError:
                s = math.inf
            if not (math.isfinite(s) and s > 0):
                raise ValueError(f"dBc level {level} gives no finite positive PSD")
        object.__setattr__(self, "offsets_hz", offsets)
        object.__setattr__(self, "dbc", levels)

    @classmethod
    def flat(cls, level_dbc: float) -> "DbcSpec":
        return cls((1.0,), (level_dbc,))

    @classmethod
    def from_points(cls, points: Iterable[Sequence[float]]) -> "DbcSpec":
        pts = list(points)
        return cls(tuple(p[0] for p in pts), tuple(p[1] for p in pts))

    def shifted(self, delta_db: float) -> "DbcSpec":
        return DbcSpec(self.offsets_hz, tuple(x + delta_db for x in self.dbc))

    def psd(self, f) -> np.ndarray:
        return dbc_to_phase_psd(self, f)


@dataclass(eq=False)
class PhaseSeries:
    """Uniformly sampled, unwrapped instantaneous phase in radians."""

    samples: np.ndarray
    sample_rate: float
    t0: float = 0.0

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("PhaseSeries needs a non-empty 1-D sample array")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) / self.sample_rate

    def __sub__(self, other: "PhaseSeries") -> "PhaseSeries":
        if other.sample_rate != self.sample_rate or len(other) != len(self):
            raise ValueError("series differ in sample rate or length")
        return PhaseSeries(self.samples - other.samples, self.sample_rate, self.t0)


def dbc_to_phase_psd(spec: DbcSpec, f) -> np.ndarray | float:
    """One-sided phase PSD (rad^2/Hz) from a dBc/Hz table, ``S = 2 * 10**(L/10)``.

    Levels are interpolated linearly in dB against log frequency (a straight
    line on a log-log plot) and held flat outside the tabulated offsets.
    """
    scalar = np.ndim(f) == 0
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0) or not np.all(np.isfinite(f)):
        raise ValueError("offset frequency must be positive and finite")
    level = np.interp(np.log10(f), np.log10(spec.offsets_hz), spec.dbc)
    s = 2.0 * 10.0 ** (level / 10.0)
    return float(s) if scalar else s


def pfd_noise_floor_dbc(n_div: float, f_beat: float, fom_dbc: float = PFD_FLOOR_FOM_DBC) -> float:
    """In-band phase-noise floor of the divider/discriminator, dBc/Hz.

    Reads the data-sheet product ``FOM x N x f_beat`` in the log domain:
    ``FOM + 10 log10(N * f_beat / 1 Hz)``.  At a fixed comparison frequency
    ``f_beat / N`` this is the familiar ``FOM + 20 log10 N + 10 log10 f_pfd``.
    """
    if not n_div >= 1:
        raise ValueError("n_div must be >= 1")
    if not f_beat > 0:
        raise ValueError("f_beat must be positive")
    return fom_dbc + 10.0 * math.log10(n_div * f_beat)


def _make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def synthesize_psd(
    psd: Callable[[np.ndarray], np.ndarray],
    n: int,
    fs: float,
    seed=None,
    n_fft: int | None = None,
) -> np.ndarray:
    """Draw ``n`` samples of a zero-mean Gaussian process with one-sided PSD ``psd``.

    Each positive-frequency bin gets an independent complex Gaussian amplitude
    scaled by ``sqrt(S(f) * fs * m / 2)`` (``m`` the internal transform length);
    the DC bin is set to zero.  The realization is computed on a record
    ``_PAD_FACTOR`` times longer and cropped, which suppresses the wrap-around
    correlation of a purely periodic synthesis for steep spectra.  ``n_fft``
    overrides the internal transform length (must be >= ``n``).
    """
    if n < 2:
        raise ValueError("need n >= 2")
    if not fs > 0:
        raise ValueError("fs must be positive")
    rng = _make_rng(seed)
    m = _PAD_FACTOR * int(n) if n_fft is None else int(n_fft)
    if m < n:
        raise ValueError("n_fft must be >= n")
    freqs = np.fft.rfftfreq(m, d=1.0 / fs)
    s = np.zeros_like(freqs)
    s[1:] = psd(freqs[1:])
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ValueError("PSD must be finite and non-negative")
    # bins drawn low to high frequency; see module docstring
    z = rng.standard_normal((freqs.size, 2))
    spectrum = (z[:, 0] + 1j * z[:, 1]) * np.sqrt(s * fs * m / 4.0)
    spectrum[0] = 0.0
    if m % 2 == 0:
        spectrum[-1] = z[-1, 0] * math.sqrt(s[-1] * fs * m / 2.0)
    return np.fft.irfft(spectrum, n=m)[:n]


def synthesize_power_law(spec: PowerLawNoiseSpec, n: int, fs: float, seed=None) -> PhaseSeries:
    """Synthesize a phase record whose PSD follows ``spec``; deterministic per seed."""
    if spec.is_zero:
        if n < 2 or not fs > 0:
            raise ValueError("need n >= 2 and fs > 0")
        return PhaseSeries(np.zeros(n), fs)
    return PhaseSeries(synthesize_psd(spec.psd, n, fs, seed), fs)


def synthesize_dbc(spec: DbcSpec, n: int, fs: float, seed=None) -> PhaseSeries:
    """Synthesize a phase record following a dBc/Hz table."""
    return PhaseSeries(synthesize_psd(spec.psd, n, fs, seed), fs)

