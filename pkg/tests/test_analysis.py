import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opll.analysis import (
    AllanCurve,
    CarrierNotDominantWarning,
    Spectrum,
    carrier_fraction,
    carrier_phase_variance,
    default_taus,
    fit_loglog_slope,
    mod_allan,
    rms_phase_variance,
    sa_carrier_phase_variance,
    sa_noise_corrections,
    welch_psd,
)
from opll.noise import PhaseSeries, PowerLawNoiseSpec, synthesize_power_law
from opll.pfd import PfdConfig
from opll.scenarios import scenario_config
from opll.simengine import two_slave_experiment

TWO_PI = 2 * math.pi


# --- Welch ------------------------------------------------------------------


def test_welch_tone_power():
    fs, n, amp = 1e4, 2**16, 0.7
    t = np.arange(n) / fs
    x = amp * np.sin(TWO_PI * 1234.5 * t)
    spec = welch_psd(PhaseSeries(x, fs), seg_len=4096)
    assert spec.integrate() == pytest.approx(amp**2 / 2, rel=0.02)
    assert spec.freqs[np.argmax(spec.psd)] == pytest.approx(1234.5, abs=fs / 4096)


def test_welch_white_level():
    fs, n, sigma = 1e4, 2**16, 0.3
    acc = 0
    for s in range(10):
        x = np.random.default_rng(s).normal(0, sigma, n)
        acc = acc + welch_psd(PhaseSeries(x, fs), seg_len=1024).psd
    level = acc[1:-1] / 10
    assert np.mean(level) == pytest.approx(sigma**2 / (fs / 2), rel=0.05)


def test_welch_additivity():
    fs, n = 1e4, 2**17
    t = np.arange(n) / fs
    tone = 0.5 * np.sin(TWO_PI * 1000 * t)
    noise = np.random.default_rng(9).normal(0, 0.1, n)
    kw = dict(seg_len=2048)
    s_sum = welch_psd(PhaseSeries(tone + noise, fs), **kw)
    s_tone = welch_psd(PhaseSeries(tone, fs), **kw)
    s_noise = welch_psd(PhaseSeries(noise, fs), **kw)
    both = s_tone.psd + s_noise.psd
    away = np.abs(s_sum.freqs - 1000) > 50
    assert np.median(s_sum.psd[away] / both[away]) == pytest.approx(1.0, rel=0.05)
    near = ~away
    assert s_sum.integrate() == pytest.approx(s_tone.integrate() + s_noise.integrate(), rel=0.01)
    assert np.sum(s_sum.psd[near]) == pytest.approx(np.sum(both[near]), rel=0.02)


def test_welch_argument_checks():
    series = PhaseSeries(np.zeros(100), 1.0)
    with pytest.raises(ValueError):
        welch_psd(series, seg_len=200)
    with pytest.raises(ValueError):
        welch_psd(series, seg_len=50, overlap=1.0)
    with pytest.raises(ValueError):
        welch_psd(series, seg_len=1)


def test_spectrum_invariants():
    with pytest.raises(ValueError):
        Spectrum(np.arange(4.0), np.array([1.0, -1.0, 1.0, 1.0]), 1.0)
    with pytest.raises(ValueError):
        Spectrum(np.array([0.0, 1.0, 3.0]), np.ones(3), 1.0)


# --- carrier fraction ------------------------------------------------------


def test_noiseless_tone_has_zero_variance():
    fs, n = 1e6, 4096
    phi = TWO_PI * 12_345.6 * np.arange(n) / fs  # off-bin tone
    assert carrier_phase_variance(PhaseSeries(phi, fs)) == pytest.approx(0.0, abs=1e-12)


def test_fraction_inversion_example():
    freqs = np.arange(101) * 10.0
    psd = np.zeros(101)
    psd[50] = math.exp(-0.08) / 10.0
    psd[[10, 20, 80, 90]] = (1 - math.exp(-0.08)) / 4 / 10.0
    spec = Spectrum(freqs, psd, 10.0, units="W/Hz")
    assert carrier_fraction(spec, carrier_bins=3) == pytest.approx(0.9231, abs=1e-4)
    assert carrier_phase_variance(spec, carrier_bins=3) == pytest.approx(0.08, rel=1e-12)


@pytest.mark.parametrize("target", [0.01, 0.08, 0.19, 0.33])
def test_gaussian_phase_round_trip(target):
    # oracle: the time-domain sample variance of each synthesized record
    fs, n = 1e6, 2**16
    estimates, truths = [], []
    for s in range(10):
        phi = np.random.default_rng(s).normal(0, math.sqrt(target), n)
        series = PhaseSeries(TWO_PI * 1e4 * np.arange(n) / fs + phi, fs)
        estimates.append(carrier_phase_variance(series))
        truths.append(np.var(phi))
    assert np.mean(estimates) == pytest.approx(np.mean(truths), rel=0.2)
    assert np.mean(estimates) == pytest.approx(target, rel=0.2)


def test_colored_phase_round_trip():
    # wander slower than one bin is indistinguishable from the carrier, so the
    # oracle drops the same three bins from the detrended phase spectrum
    spec = PowerLawNoiseSpec(((0, 2e-8), (-2, 10.0)))
    fs, n = 1e6, 2**16
    ratios = []
    for s in range(10):
        phi = synthesize_power_law(spec, n, fs, seed=s).samples
        est = carrier_phase_variance(PhaseSeries(phi, fs))
        t = np.arange(n)
        resid = phi - np.polyval(np.polyfit(t, phi, 1), t)
        coeffs = np.fft.fft(resid)
        coeffs[[0, 1, -1]] = 0
        truth = np.sum(np.abs(coeffs) ** 2) / n**2
        ratios.append(est / truth)
    assert np.mean(ratios) == pytest.approx(1.0, rel=0.2)


@given(scale=st.floats(1e-6, 1e6))
@settings(max_examples=30)
def test_amplitude_scale_invariance(scale):
    rng = np.random.default_rng(0)
    psd = rng.uniform(0, 1e-3, 257)
    psd[100] = 1.0
    freqs = np.arange(257) * 5.0
    base = carrier_phase_variance(Spectrum(freqs, psd, 5.0))
    scaled = carrier_phase_variance(Spectrum(freqs, psd * scale, 5.0))
    assert scaled == pytest.approx(base, rel=1e-9)


def test_carrier_bin_width_override():
    freqs = np.arange(11) * 2.0
    psd = np.array([0, 0, 0, 1, 1, 10, 1, 1, 0, 0, 1.0])
    spec = Spectrum(freqs, psd, 2.0)
    assert carrier_phase_variance(spec, carrier_bin_width=10.0) == pytest.approx(-math.log(14 / 15))
    assert carrier_phase_variance(spec) == pytest.approx(-math.log(12 / 15))


def test_carrier_not_dominant_warns():
    phi = np.random.default_rng(1).normal(0, math.sqrt(6.0), 4096)
    with pytest.warns(CarrierNotDominantWarning):
        carrier_phase_variance(PhaseSeries(phi, 1e3), detrend=False)


def test_large_clean_carrier_does_not_warn():
    phi = np.random.default_rng(1).normal(0, 0.1, 4096)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        carrier_phase_variance(PhaseSeries(phi, 1e3))


# --- spectrum-analyzer corrections ------------------------------------------


def test_sa_correction_examples():
    assert sa_noise_corrections(-60.0, 3000.0) == pytest.approx(-92.78, abs=0.005)
    assert sa_noise_corrections(0.0, 1.0) == pytest.approx(1.99, abs=1e-12)
    with pytest.raises(ValueError):
        sa_noise_corrections(-60.0, 0.0)


@pytest.mark.parametrize("rbw", [300.0, 3000.0])
def test_sa_corrections_recover_density(rbw):
    # emulate an averaged log detector: noise power in the resolution filter is
    # exponentially distributed; the filter's noise bandwidth exceeds the RBW by 0.52 dB
    density_dbm = -140.0
    mean_power_mw = 10 ** (density_dbm / 10) * rbw * 10**0.052
    rng = np.random.default_rng(int(rbw))
    samples = rng.exponential(mean_power_mw, 400_000)
    reading = float(np.mean(10 * np.log10(samples)))
    assert sa_noise_corrections(reading, rbw) == pytest.approx(density_dbm, abs=0.05)


def test_sa_trace_phase_variance():
    span = np.linspace(-5e6, 5e6, 1001)
    rbw = 3000.0
    carrier_dbm = 0.0
    density_dbm = -75.0  # dBm/Hz true noise density
    reading = density_dbm - (2.51 - 0.52 - 10 * math.log10(rbw))
    readings = np.full(span.size, reading)
    readings[500] = carrier_dbm
    spacing = span[1] - span[0]
    noise_mw = 10 ** (density_dbm / 10) * spacing * (span.size - 1)
    expected = -math.log(1.0 / (1.0 + noise_mw))
    assert sa_carrier_phase_variance(span, readings, rbw) == pytest.approx(expected, rel=1e-9)


# --- modified Allan deviation -----------------------------------------------


def _mvar_brute(x, n, tau0):
    m = x.size
    total = 0.0
    for j in range(m - 3 * n + 1):
        s = 0.0
        for i in range(j, j + n):
            s += x[i + 2 * n] - 2 * x[i + n] + x[i]
        total += s * s
    return total / (2 * n**2 * (n * tau0) ** 2 * (m - 3 * n + 1))


def test_mvar_matches_brute_force():
    rng = np.random.default_rng(4)
    fs, nu0 = 100.0, 5.0
    phi = np.cumsum(rng.normal(size=300))
    curve = mod_allan(PhaseSeries(phi, fs), nu0, taus=[0.01, 0.03, 0.1, 0.5])
    x = phi / (TWO_PI * nu0)
    for tau, dev, count in zip(curve.taus, curve.mdev, curve.n_samples_per_tau):
        n = int(round(tau * fs))
        assert dev**2 == pytest.approx(_mvar_brute(x, n, 1 / fs), rel=1e-10)
        assert count == 300 - 3 * n + 1


def test_mvar_linear_ramp_is_zero():
    fs = 1e3
    phi = TWO_PI * 3.84 * np.arange(5000) / fs
    curve = mod_allan(PhaseSeries(phi, fs), nu0=4e9)
    assert np.all(curve.mdev < 1e-20)


def test_mvar_white_pm_analytic():
    # iid time deviation of variance s2: mvar = 3 s2 tau0 / tau^3
    fs, nu0, n = 1.0, 1.0, 2**16
    sigma_x = 1e-3
    acc = 0
    taus = [1, 2, 4, 8, 16, 64, 256]
    for s in range(10):
        x = np.random.default_rng(s).normal(0, sigma_x, n)
        acc = acc + mod_allan(PhaseSeries(TWO_PI * nu0 * x, fs), nu0, taus).mdev ** 2
    tau = np.array(taus, dtype=float)
    assert np.allclose(np.sqrt(acc / 10), np.sqrt(3 * sigma_x**2 / tau**3), rtol=0.05)


@pytest.mark.parametrize(
    "alpha,slope",
    [(0, -1.5), (-1, -1.0), (-2, -0.5), (-3, 0.0), (-4, 0.5)],
)
def test_mvar_power_law_slopes(alpha, slope):
    series = synthesize_power_law(PowerLawNoiseSpec(((alpha, 1.0),)), 2**17, 1.0, seed=alpha + 10)
    fit = fit_loglog_slope(mod_allan(series, 1.0), 2, 2000)
    assert fit.slope == pytest.approx(slope, abs=0.15)


def test_mvar_snaps_and_validates_taus():
    series = PhaseSeries(np.random.default_rng(0).normal(size=1000), 10.0)
    curve = mod_allan(series, 1.0, taus=[0.1, 0.26])
    assert np.allclose(curve.taus, [0.1, 0.3])
    assert curve.snapped == [(0.26, 0.3)]
    with pytest.raises(ValueError):
        mod_allan(series, 1.0, taus=[40.0])
    with pytest.raises(ValueError):
        mod_allan(series, 0.0)


def test_default_taus_usable():
    taus = default_taus(1000, 10.0)
    assert taus[0] == pytest.approx(0.1)
    assert np.all(np.diff(taus) > 0)
    assert int(round(taus[-1] * 10)) * 3 + 1 <= 1000


# --- slope fitting ----------------------------------------------------------


def test_fit_exact_power_law():
    x = np.logspace(-3, 3, 40)
    fit = fit_loglog_slope((x, 7.0 * x**-0.37))
    assert fit.slope == pytest.approx(-0.37, abs=1e-12)
    assert fit.halfwidth < 1e-10


def test_fit_piecewise_subrange():
    x = np.logspace(0, 4, 81)
    y = np.where(x < 100, x**-1.0, 0.01 * (x / 100) ** 0.5)
    assert fit_loglog_slope((x, y), 1, 80).slope == pytest.approx(-1.0, abs=0.1)
    assert fit_loglog_slope((x, y), 120, 1e4).slope == pytest.approx(0.5, abs=0.1)


def test_fit_errors():
    x = np.arange(1.0, 5.0)
    with pytest.raises(ValueError):
        fit_loglog_slope((x, x))
    x = np.arange(1.0, 10.0)
    with pytest.raises(ValueError):
        fit_loglog_slope((x, x - 3))


def test_fit_accepts_curve_and_spectrum():
    taus = np.logspace(0, 2, 10)
    curve = AllanCurve(taus, taus**-1.5, np.ones(10, dtype=int))
    assert fit_loglog_slope(curve).slope == pytest.approx(-1.5)
    freqs = np.arange(0, 101.0)
    spec = Spectrum(freqs, np.where(freqs > 0, 1 / np.maximum(freqs, 1) ** 2, 0.0), 1.0)
    assert fit_loglog_slope(spec, 1, 100).slope == pytest.approx(-2.0)


# --- RMS phase --------------------------------------------------------------


def test_rms_examples():
    assert rms_phase_variance(PhaseSeries(np.full(1000, 2.0), 1e6), 5e5) == pytest.approx(0.0, abs=1e-20)
    ramp = 3.0 + 0.25 * np.arange(10_000)
    assert rms_phase_variance(PhaseSeries(ramp, 1e7), 5e6) == pytest.approx(0.0, abs=1e-18)


def test_rms_decimation_averages_white_noise():
    x = np.random.default_rng(3).normal(0, 1.0, 2**18)
    assert rms_phase_variance(PhaseSeries(x, 1e7), 1e6) == pytest.approx(0.1, rel=0.05)
    with pytest.raises(ValueError):
        rms_phase_variance(PhaseSeries(x, 1e7), 2e7)


def test_rms_of_differential_phase_tracks_reference_noise():
    # slaves with different N/R multiply the shared reference noise differently
    values = []
    for shift in (0.0, -10.0, -20.0):
        a = scenario_config("n96_r3")
        a = replace(a, ref_noise=a.ref_noise.shifted(shift), duration=2e-3, seed=1)
        b = replace(a, pfd=PfdConfig(n_div=96, r_div=1), seed=2)
        diff = two_slave_experiment(a, b, shared_seed=5)
        values.append(rms_phase_variance(diff, 5e6))
    assert all(np.isfinite(values))
    assert values[0] > values[1] > values[2]
