"""Compiled closed-loop stepping kernel.

Implements exactly the per-step arithmetic of :func:`opll.laser.step_laser`,
:func:`opll.pfd.pfd_interval` and :func:`opll.loopfilter.filter_step`, fused
into one loop so that millions of steps run at native speed.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi

STATUS_OK = 0
STATUS_MODE_HOP = 1
STATUS_DIVERGED = 2


@njit(cache=True, nogil=True)
def run_loop(
    n,
    dt,
    # laser
    detuning0,
    k_carrier,
    th_b0,
    th_a1,
    pz_b0,
    pz_b1,
    pz_b2,
    pz_a1,
    pz_a2,
    mode_hop_limit,
    laser_noise_hz,
    # discriminator
    beat_div_base,
    ref_div,
    beat_modulus,
    i_cp,
    # filter chain
    r9_tau,
    c1_tau,
    rail_lo,
    rail_hi,
    pre_gain,
    bias,
    main_gain,
    main_rails,
    lead_ratio,
    lead_decay,
    fast_gain,
    slow_tau,
    slow_limits,
    rails_enabled,
    modulator_gain,
    slow_enabled,
    pi_integral0,
    lead_state0,
    slow_integral0,
    # supervision
    master_phase,
    divergence_bound,
):
    phase_err = np.full(n, np.nan)
    fast_rec = np.full(n, np.nan)
    slow_rec = np.full(n, np.nan)
    main_rec = np.full(n, np.nan)
    pump_rec = np.full(n, np.nan)

    phase = 0.0
    th_y = 0.0
    th_u = 0.0
    pz_s1 = 0.0
    pz_s2 = 0.0

    up = False
    down = False
    r_acc = ref_div[0]
    d_acc = beat_div_base[0]

    integral = pi_integral0
    lead_state = lead_state0
    slow = slow_integral0
    fast_out = 0.0
    slow_out = slow_integral0 if slow_enabled else 0.0

    status = STATUS_OK
    stop = n
    for k in range(n):
        # laser
        i_mod = modulator_gain * fast_out
        v_pz = slow_out
        thermal = th_b0 * (i_mod + th_u) - th_a1 * th_y
        shift = thermal - k_carrier * i_mod
        if abs(shift) > mode_hop_limit:
            status = STATUS_MODE_HOP
            stop = k
            break
        piezo = pz_b0 * v_pz + pz_s1
        pz_s1 = pz_b1 * v_pz - pz_a1 * piezo + pz_s2
        pz_s2 = pz_b2 * v_pz - pz_a2 * piezo
        th_y = thermal
        th_u = i_mod
        freq = detuning0 + shift + piezo + laser_noise_hz[k]
        phase += TWO_PI * freq * dt

        # discriminator over the step
        r_end = ref_div[k + 1]
        d_end = beat_div_base[k + 1] + phase / beat_modulus
        if r_end > r_acc:
            r_m = math.floor(r_acc / TWO_PI) + 1.0
            r_last = math.floor(r_end / TWO_PI)
        else:
            r_m = 1.0
            r_last = 0.0
        if d_end > d_acc:
            d_m = math.floor(d_acc / TWO_PI) + 1.0
            d_last = math.floor(d_end / TWO_PI)
        else:
            d_m = 1.0
            d_last = 0.0
        current = i_cp * ((1.0 if up else 0.0) - (1.0 if down else 0.0))
        charge = 0.0
        t_prev = 0.0
        while r_m <= r_last or d_m <= d_last:
            tr = (TWO_PI * r_m - r_acc) / (r_end - r_acc) if r_m <= r_last else 2.0
            td = (TWO_PI * d_m - d_acc) / (d_end - d_acc) if d_m <= d_last else 2.0
            if tr < td:
                t = tr
                up = True
                r_m += 1.0
            elif td < tr:
                t = td
                down = True
                d_m += 1.0
            else:
                t = tr
                up = True
                down = True
                r_m += 1.0
                d_m += 1.0
            if up and down:
                up = False
                down = False
            charge += current * (t - t_prev)
            current = i_cp * ((1.0 if up else 0.0) - (1.0 if down else 0.0))
            t_prev = t
        charge += current * (1.0 - t_prev)
        r_acc = r_end
        d_acc = d_end
        i_pump = charge

        # filter chain
        integral = integral + i_pump * dt / c1_tau
        v_pi = i_pump * r9_tau + integral
        if rails_enabled:
            integral = min(max(integral, rail_lo), rail_hi)
            v_pi = min(max(v_pi, rail_lo), rail_hi)
        v3 = main_gain * (pre_gain * v_pi + bias)
        if rails_enabled:
            v3 = min(max(v3, -main_rails), main_rails)
        lead_out = lead_ratio * v3 + (1.0 - lead_ratio) * lead_state
        lead_state = lead_decay * lead_state + (1.0 - lead_decay) * v3
        fast_out = fast_gain * lead_out
        if slow_enabled:
            slow = slow + v3 * dt / slow_tau
            if rails_enabled and abs(slow) >= slow_limits:
                slow = slow_limits if slow > 0 else -slow_limits
            slow_out = slow

        err = phase - master_phase[k + 1]
        phase_err[k] = err
        fast_rec[k] = fast_out
        slow_rec[k] = slow_out
        main_rec[k] = v3
        pump_rec[k] = i_pump

        if abs(err) > divergence_bound:
            at_clamp = abs(v3) >= main_rails or (slow_enabled and abs(slow) >= slow_limits)
            if at_clamp or not rails_enabled:
                status = STATUS_DIVERGED
                stop = k + 1
                break

    return phase_err, fast_rec, slow_rec, main_rec, pump_rec, status, stop
