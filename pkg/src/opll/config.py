"""TOML run configuration with explicit units in every key name.

Layout (every key optional; omitted keys take the library defaults)::

    [run]        seed, fs_hz, duration_s, record_every, max_samples
    [beat]       f_beat_hz, f_ref_hz (omit to derive from the lock condition)
    [pfd]        prescaler, n_div, r_div, i_cp_ma, floor_enabled, hold_loop_gain, gain_ref_modulus
    [laser]      k_thermal_hz_per_ma, f_thermal_hz, k_carrier_hz_per_ma, k_piezo_hz_per_v,
                 f_piezo_hz, q_piezo, detuning0_hz, mode_hop_limit_hz, [laser.noise]
    [loop]       r9_v_per_ma, c1_ma_s_per_v, rail_lo_v, rail_hi_v, pre_gain, bias_v, main_gain,
                 main_rails_v, lead_tau1_s, lead_tau2_s, fast_gain, slow_tau_s, slow_limits_v,
                 rails_enabled, fast_enabled, slow_enabled, modulator_ma_per_v, start_locked
    [reference]  offsets_hz + dbc (table) or level_dbc (flat), bandwidth_hz, enabled
    [master.noise], [detector.noise]
    [lock]       threshold_rad, periods, divergence_bound_rad

Noise tables name the power-law coefficients of the one-sided phase PSD:
``white_pm``, ``flicker_pm``, ``white_fm``, ``flicker_fm``, ``random_walk_fm``.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import replace
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .laser import LaserParams
from .loopfilter import LoopConfig
from .noise import DbcSpec, PowerLawNoiseSpec
from .pfd import PfdConfig
from .simengine import ConfigError, SimConfig

NOISE_KEYS = {
    "white_pm": 0,
    "flicker_pm": -1,
    "white_fm": -2,
    "flicker_fm": -3,
    "random_walk_fm": -4,
}

# (section, key) -> (target object, attribute)
_RUN = {
    "seed": "seed",
    "fs_hz": "fs",
    "duration_s": "duration",
    "record_every": "record_every",
    "max_samples": "max_samples",
}
_BEAT = {"f_beat_hz": "f_beat_target", "f_ref_hz": "f_ref"}
_PFD = {"prescaler": "prescaler_p", "n_div": "n_div", "r_div": "r_div", "i_cp_ma": "i_cp"}
_PFD_SIM = {"floor_enabled": "pfd_floor", "hold_loop_gain": "hold_loop_gain", "gain_ref_modulus": "gain_ref_modulus"}
_LASER = {
    "k_thermal_hz_per_ma": "k_thermal",
    "f_thermal_hz": "f_thermal",
    "k_carrier_hz_per_ma": "k_carrier",
    "k_piezo_hz_per_v": "k_piezo",
    "f_piezo_hz": "f_piezo",
    "q_piezo": "q_piezo",
    "detuning0_hz": "detuning0",
    "mode_hop_limit_hz": "mode_hop_limit",
}
_LOOP = {
    "r9_v_per_ma": "r9_tau",
    "c1_ma_s_per_v": "c1_tau",
    "rail_lo_v": "rail_lo",
    "rail_hi_v": "rail_hi",
    "pre_gain": "pre_gain",
    "bias_v": "bias",
    "main_gain": "main_gain",
    "main_rails_v": "main_rails",
    "lead_tau1_s": "lead_tau1",
    "lead_tau2_s": "lead_tau2",
    "fast_gain": "fast_gain",
    "slow_tau_s": "slow_tau",
    "slow_limits_v": "slow_limits",
    "rails_enabled": "rails_enabled",
}
_LOOP_SIM = {
    "fast_enabled": "fast_enabled",
    "slow_enabled": "slow_enabled",
    "modulator_ma_per_v": "modulator_gain",
    "start_locked": "start_locked",
}
_REF_SIM = {"bandwidth_hz": "ref_noise_bandwidth"}
_LOCK = {"threshold_rad": "lock_threshold", "periods": "lock_periods", "divergence_bound_rad": "divergence_bound"}
_INT_FIELDS = {"seed", "record_every", "max_samples", "prescaler_p", "n_div", "r_div", "gain_ref_modulus", "lock_periods"}

SECTIONS = {"run", "beat", "pfd", "laser", "loop", "reference", "master", "detector", "lock"}


def config_hash(text: str) -> str:
    """SHA-256 of the config text with normalized line endings."""
    norm = text.replace("\r\n", "\n").replace("\r", "\n")
    return hashlib.sha256(norm.encode("utf-8")).hexdigest()


def parse_text(text: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc


def _coerce(section: str, key: str, attr: str, value: Any):
    where = f"[{section}] {key}"
    if isinstance(value, bool):
        return value
    if attr in _INT_FIELDS:
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(value, (int, float)):
        return float(value)
    raise ConfigError(f"{where}: expected a number, got {value!r}")


def _take(section: str, table: dict, mapping: dict, bools: set[str] = frozenset()) -> dict:
    out = {}
    for key, attr in mapping.items():
        if key in table:
            value = table[key]
            if key in bools or attr in ("rails_enabled",):
                if not isinstance(value, bool):
                    raise ConfigError(f"[{section}] {key}: expected true/false, got {value!r}")
                out[attr] = value
            else:
                out[attr] = _coerce(section, key, attr, value)
    return out


def _check_keys(section: str, table: dict, allowed: set[str]) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(sorted(unknown))}")


def _noise(section: str, table: dict | None) -> PowerLawNoiseSpec:
    if not table:
        return PowerLawNoiseSpec()
    _check_keys(f"{section}.noise", table, set(NOISE_KEYS))
    terms = []
    for key, value in table.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}.noise] {key}: expected a number")
        terms.append((NOISE_KEYS[key], float(value)))
    try:
        return PowerLawNoiseSpec(tuple(terms))
    except ValueError as exc:
        raise ConfigError(f"[{section}.noise] {exc}") from exc


def _reference(table: dict | None) -> DbcSpec | None:
    if not table:
        return None
    _check_keys("reference", table, {"offsets_hz", "dbc", "level_dbc", "enabled", "bandwidth_hz"})
    if table.get("enabled", True) is False or not set(table) - {"bandwidth_hz", "enabled"}:
        return None
    try:
        if "level_dbc" in table:
            if "offsets_hz" in table or "dbc" in table:
                raise ConfigError("[reference] give either level_dbc or offsets_hz/dbc, not both")
            level = table["level_dbc"]
            if isinstance(level, bool) or not isinstance(level, (int, float)):
                raise ConfigError("[reference] level_dbc: expected a number")
            return DbcSpec.flat(float(level))
        if "offsets_hz" not in table or "dbc" not in table:
            raise ConfigError("[reference] needs offsets_hz and dbc (or level_dbc)")
        return DbcSpec(tuple(table["offsets_hz"]), tuple(table["dbc"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[reference] {exc}") from exc


def config_from_dict(data: dict) -> SimConfig:
    """Build a validated-by-construction :class:`SimConfig` from parsed TOML."""
    unknown = set(data) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    run = data.get("run", {})
    beat = data.get("beat", {})
    pfd = data.get("pfd", {})
    laser = data.get("laser", {})
    loop = data.get("loop", {})
    lock = data.get("lock", {})
    _check_keys("run", run, set(_RUN))
    _check_keys("beat", beat, set(_BEAT))
    _check_keys("pfd", pfd, set(_PFD) | set(_PFD_SIM))
    _check_keys("laser", laser, set(_LASER) | {"noise"})
    _check_keys("loop", loop, set(_LOOP) | set(_LOOP_SIM))
    _check_keys("lock", lock, set(_LOCK))
    for name in ("master", "detector"):
        _check_keys(name, data.get(name, {}), {"noise"})

    sim_kwargs = {}
    sim_kwargs.update(_take("run", run, _RUN))
    sim_kwargs.update(_take("beat", beat, _BEAT))
    sim_kwargs.update(_take("pfd", pfd, _PFD_SIM, bools={"floor_enabled", "hold_loop_gain"}))
    sim_kwargs.update(_take("loop", loop, _LOOP_SIM, bools={"fast_enabled", "slow_enabled", "start_locked"}))
    sim_kwargs.update(_take("lock", lock, _LOCK))
    sim_kwargs.update(_take("reference", data.get("reference") or {}, _REF_SIM))

    try:
        pfd_cfg = PfdConfig(**_take("pfd", pfd, _PFD))
    except ValueError as exc:
        raise ConfigError(f"[pfd] {exc}") from exc
    try:
        laser_cfg = LaserParams(free_run_noise=_noise("laser", laser.get("noise")), **_take("laser", laser, _LASER))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[laser] {exc}") from exc
    try:
        loop_cfg = LoopConfig(**_take("loop", loop, _LOOP))
    except ValueError as exc:
        raise ConfigError(f"[loop] {exc}") from exc

    return SimConfig(
        laser=laser_cfg,
        pfd=pfd_cfg,
        loop=loop_cfg,
        ref_noise=_reference(data.get("reference")),
        master_noise=_noise("master", data.get("master", {}).get("noise")),
        detector_floor=_noise("detector", data.get("detector", {}).get("noise")),
        **sim_kwargs,
    )


def load_config(path: str | Path) -> tuple[SimConfig, str]:
    """Read and parse a config file; returns the config and the raw text."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(parse_text(text)), text


def set_dotted(data: dict, dotted: str, value: Any) -> dict:
    """Copy of ``data`` with ``section.key`` set; the key must be a known numeric field."""
    parts = dotted.split(".")
    if len(parts) != 2:
        raise ConfigError(f"axis {dotted!r} must look like section.key")
    section, key = parts
    numeric = {
        "run": _RUN,
        "beat": _BEAT,
        "pfd": {**_PFD, "gain_ref_modulus": "gain_ref_modulus"},
        "laser": _LASER,
        "loop": {k: v for k, v in {**_LOOP, **_LOOP_SIM}.items() if v not in ("rails_enabled", "fast_enabled", "slow_enabled", "start_locked")},
        "lock": _LOCK,
        "reference": {"level_dbc": "level_dbc", **_REF_SIM},
    }
    if key not in numeric.get(section, {}):
        raise ConfigError(f"axis {dotted!r} is not a numeric config field")
    out = copy.deepcopy(data)
    table = out.setdefault(section, {})
    if section == "reference" and key == "level_dbc":
        table.pop("offsets_hz", None)
        table.pop("dbc", None)
    table[key] = value
    return out


def with_seed(cfg: SimConfig, seed: int | None) -> SimConfig:
    return cfg if seed is None else replace(cfg, seed=int(seed))
