"""Hot inner loops of the contact simulator: physics substeps and rasterizer.

Both kernels exist twice: a numba @njit build and the identical pure-Python/
numpy function it was compiled from. Selection happens once at import via the
FMTFORGE_NUMBA env var ("0" forces the fallback; default uses numba when
importable). The two paths agree to float rounding; bit-exact reproducibility
holds within one backend.

State vector layout (float64, length 20):
  0 x, 1 z, 2 theta, 3 vx, 4 vz, 5 substep count,
  6 in_slot / released, 7 press_time, 8 arm_idx, 9 arm_current,
  10 grace_deadline, 11 reseat, 12 success, 13 pulse_end,
  14 prev_in_zone / hooked, 15 lid_z, 16 pulse_amp, 17 success_time

Param vector layout (float64, length 28):
  0 dt, 1 vmax, 2 wmax, 3 k_contact, 4 damping, 5 pen_cap,
  6 feature_x, 7 half_width (clearance / handle), 8 slot_depth, 9 theta_tol,
  10 jam_floor, 11 k_jam, 12 click_amp, 13 spike_amp, 14 pulse_width,
  15 seat_pen_cmd, 16 click_pen, 17 press_pen, 18 grace, 19 z_slip,
  20 z_reseat, 21 z_success, 22 tool_half_w, 23 tool_len, 24 k_hook,
  25 world_half, 26 z_max, 27 insert_depth

Event codes: 1 click, 2 release spike, 3 re-engage, 4 slip, 5 seat, 6 success.
"""

from __future__ import annotations

import math
import os

import numpy as np

TASK_PEG = 0
TASK_LATCH = 1

EV_CLICK = 1
EV_RELEASE = 2
EV_REENGAGE = 3
EV_SLIP = 4
EV_SEAT = 5
EV_SUCCESS = 6

STATE_SIZE = 20
PARAM_SIZE = 28


def _frame_substeps(state, params, task_id, n_sub, target, tick_period, ft_out, ft_t_out, ev_out, arm_queue):
    dt = params[0]
    vmax = params[1]
    wmax = params[2]
    k = params[3]
    damp = params[4]
    pen_cap = params[5]
    fx_feat = params[6]
    half_w = params[7]
    slot_depth = params[8]
    theta_tol = params[9]
    jam_floor = params[10]
    k_jam = params[11]
    pulse_width = params[14]
    seat_pen_cmd = params[15]
    click_pen = params[16]
    press_pen = params[17]
    grace = params[18]
    z_slip = params[19]
    z_reseat = params[20]
    z_success = params[21]
    tool_half_w = params[22]
    tool_len = params[23]
    k_hook = params[24]
    world_half = params[25]
    z_max = params[26]
    insert_depth = params[27]

    n_ft = 0
    n_ev = 0
    step_len = vmax * dt
    for _ in range(n_sub):
        x = state[0]
        z = state[1]
        theta = state[2]
        t = state[5] * dt

        # rate-limited motion toward the frame target
        dx = target[0] - x
        dz = target[1] - z
        norm = math.sqrt(dx * dx + dz * dz)
        if norm > step_len:
            dx = dx / norm * step_len
            dz = dz / norm * step_len
        dth = target[2] - theta
        w_step = wmax * dt
        if dth > w_step:
            dth = w_step
        elif dth < -w_step:
            dth = -w_step
        xn = x + dx
        zn = z + dz
        theta = theta + dth
        if xn > world_half:
            xn = world_half
        elif xn < -world_half:
            xn = -world_half
        if zn > z_max:
            zn = z_max

        fx_w = 0.0
        fz_w = 0.0
        tau_extra = 0.0
        corner = 0.0
        vz_prev = state[4]

        if task_id == TASK_PEG:
            in_zone = abs(xn - fx_feat) < half_w
            in_slot = state[6] > 0.5
            if in_slot:
                lo = fx_feat - half_w
                hi = fx_feat + half_w
                if xn < lo:
                    fx_w += k * (lo - xn)
                    xn = lo
                elif xn > hi:
                    fx_w -= k * (xn - hi)
                    xn = hi
                floor = -slot_depth
                if abs(theta) > theta_tol:
                    floor = jam_floor
                if zn < floor:
                    pen = floor - zn
                    fz_w += k * pen
                    if vz_prev < 0.0:
                        fz_w -= damp * vz_prev
                    if pen > pen_cap:
                        zn = floor - pen_cap
                    if abs(theta) > theta_tol:
                        tau_extra -= k_jam * theta
                if zn > 0.001:
                    state[6] = 0.0
                if state[12] < 0.5 and zn <= -insert_depth and abs(theta) <= theta_tol and n_ev < ev_out.shape[0]:
                    state[12] = 1.0
                    state[17] = t
                    ev_out[n_ev, 0] = EV_SUCCESS
                    ev_out[n_ev, 1] = t
                    n_ev += 1
            else:
                if zn < 0.0:
                    pen_cmd = -target[1]
                    if in_zone and pen_cmd >= seat_pen_cmd and n_ev < ev_out.shape[0]:
                        state[6] = 1.0
                        ev_out[n_ev, 0] = EV_SEAT
                        ev_out[n_ev, 1] = t
                        n_ev += 1
                    else:
                        pen = -zn
                        fz_w += k * pen
                        if vz_prev < 0.0:
                            fz_w -= damp * vz_prev
                        if pen > pen_cap:
                            zn = -pen_cap
                        if abs(theta) > 0.01:
                            corner = -tool_half_w if theta > 0.0 else tool_half_w
                        if in_zone and state[14] < 0.5 and pen >= click_pen and n_ev < ev_out.shape[0]:
                            state[13] = t + pulse_width
                            state[16] = params[12]
                            ev_out[n_ev, 0] = EV_CLICK
                            ev_out[n_ev, 1] = t
                            n_ev += 1
                state[14] = 1.0 if in_zone else 0.0
        else:
            released = state[6] > 0.5
            over_handle = abs(xn - fx_feat) < half_w
            if zn < 0.0:
                pen = -zn
                fz_w += k * pen
                if vz_prev < 0.0:
                    fz_w -= damp * vz_prev
                if pen > pen_cap:
                    zn = -pen_cap
                if (not released) and over_handle:
                    state[14] = 1.0  # hooked onto the handle
                    if pen >= press_pen and state[11] < 0.5:
                        state[7] += dt
                        if state[7] >= state[9] and n_ev < ev_out.shape[0]:
                            state[6] = 1.0
                            state[10] = t + grace
                            state[13] = t + pulse_width
                            state[16] = params[13]
                            state[14] = 0.0
                            ev_out[n_ev, 0] = EV_RELEASE
                            ev_out[n_ev, 1] = t
                            n_ev += 1
            else:
                if not over_handle:
                    state[14] = 0.0  # slid off the handle laterally
                if (not released) and state[14] > 0.5 and zn > 0.0:
                    fz_w -= k_hook * zn
                    if zn > z_slip and n_ev < ev_out.shape[0]:
                        state[14] = 0.0
                        state[11] = 1.0
                        ev_out[n_ev, 0] = EV_SLIP
                        ev_out[n_ev, 1] = t
                        n_ev += 1
                if state[11] > 0.5 and zn >= z_reseat:
                    state[11] = 0.0
            if state[6] > 0.5:
                lid = zn if zn > 0.0 else 0.0
                if state[12] > 0.5 and state[15] > lid:
                    lid = state[15]
                state[15] = lid
                if state[12] < 0.5 and zn >= z_success and n_ev < ev_out.shape[0]:
                    state[12] = 1.0
                    state[17] = t
                    ev_out[n_ev, 0] = EV_SUCCESS
                    ev_out[n_ev, 1] = t
                    n_ev += 1
                if state[12] < 0.5 and state[6] > 0.5 and t >= state[10] and n_ev < ev_out.shape[0]:
                    state[6] = 0.0
                    state[7] = 0.0
                    state[8] += 1.0
                    idx = int(state[8])
                    if idx >= arm_queue.shape[0]:
                        idx = arm_queue.shape[0] - 1
                    state[9] = arm_queue[idx]
                    state[15] = 0.0
                    ev_out[n_ev, 0] = EV_REENGAGE
                    ev_out[n_ev, 1] = t
                    n_ev += 1

        state[3] = (xn - state[0]) / dt
        state[4] = (zn - state[1]) / dt
        state[0] = xn
        state[1] = zn
        state[2] = theta
        state[5] += 1.0

        if int(state[5]) % tick_period == 0:
            t_s = state[5] * dt
            c = math.cos(theta)
            s = math.sin(theta)
            f_tool_x = c * fx_w - s * fz_w
            f_tool_z = s * fx_w + c * fz_w
            if t_s <= state[13]:
                f_tool_z += state[16]
            tau_y = -tool_len * f_tool_x - corner * f_tool_z + tau_extra
            ft_out[n_ft, 0] = f_tool_x
            ft_out[n_ft, 1] = f_tool_z
            ft_out[n_ft, 2] = tau_y
            ft_out[n_ft, 3] = theta
            ft_t_out[n_ft] = t_s
            n_ft += 1

    return n_ft, n_ev


def _render(out, scales, x, z, theta, task_id, feature_x, lid_z, half_w_feat, slot_depth, clearance):
    n_cam = out.shape[0]
    size = out.shape[1]
    half = (size - 1) / 2.0
    c = math.cos(theta)
    s = math.sin(theta)
    for cam in range(n_cam):
        scale = scales[cam]
        for r in range(size):
            for col in range(size):
                ox = (col - half) * scale
                oz = (half - r) * scale
                wx = x + c * ox + s * oz
                wz = z + (-s * ox + c * oz)
                val = 0.0
                if task_id == TASK_PEG:
                    if -0.03 <= wz <= 0.0:
                        val = 0.4
                        if abs(wx - feature_x) <= 0.005 and wz >= -0.004:
                            val = 0.7
                        if abs(wx - feature_x) < clearance and wz >= -slot_depth:
                            val = 0.0
                else:
                    rel = wz - lid_z
                    if -0.03 <= rel <= 0.0:
                        val = 0.55
                    if abs(wx - feature_x) <= half_w_feat and 0.0 <= rel <= 0.004:
                        val = 0.9
                if abs(ox) <= 0.006 and 0.0 <= oz <= 0.05:
                    val = 1.0
                out[cam, r, col] = val


def _numba_enabled() -> bool:
    flag = os.environ.get("FMTFORGE_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


USING_NUMBA = False
frame_substeps = _frame_substeps
render = _render

if _numba_enabled():
    try:
        from numba import njit

        frame_substeps = njit(cache=True)(_frame_substeps)
        render = njit(cache=True)(_render)
        USING_NUMBA = True
    except ImportError:
        pass


def kernel_backend() -> str:
    return "numba" if USING_NUMBA else "numpy"
