"""Reference-oscillator scenarios for N/R comparisons at a 6.9 GHz beat.

The dBc/Hz tables are illustrative profiles, not datasheet values: two
arbitrary waveform generators of different quality plus a low-noise crystal
source.  Each pairs with the divider setting it is used with.
"""

from __future__ import annotations

from dataclasses import replace

from .noise import DbcSpec
from .pfd import PfdConfig
from .simengine import SimConfig

OFFSETS_HZ = (1e2, 1e3, 1e4, 1e5, 1e6)

REFERENCES = {
    "awg_clean": DbcSpec(OFFSETS_HZ, (-98.0, -108.0, -115.0, -120.0, -133.0)),
    "awg_noisy": DbcSpec(OFFSETS_HZ, (-90.0, -90.0, -90.0, -115.0, -135.0)),
    "crystal": DbcSpec(OFFSETS_HZ, (-75.0, -85.0, -96.0, -111.0, -131.0)),
}

# name -> (n_div, r_div, reference)
SCENARIOS = {
    "n384_r1": (384, 1, "awg_clean"),
    "n96_r1": (96, 1, "awg_noisy"),
    "n96_r3": (96, 3, "crystal"),
}


def scenario_config(name: str, base: SimConfig | None = None) -> SimConfig:
    """``base`` with the divider setting and reference profile of scenario ``name``."""
    n_div, r_div, ref = SCENARIOS[name]
    base = base or SimConfig()
    return replace(
        base,
        f_ref=None,
        pfd=replace(base.pfd, n_div=n_div, r_div=r_div),
        ref_noise=REFERENCES[ref],
    )
