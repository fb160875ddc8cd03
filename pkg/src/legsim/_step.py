"""Compiled control-step kernel: all simulation substeps of one policy step.

Runs the joint-level actuator (ideal PD or the learned network) at the
simulation rate, advances the hard-contact dynamics, maintains the joint
position-error / velocity history ring, and pools per-substep contact
statistics needed by the cost functions, all in one call so the Python-side
environment does one kernel invocation per policy step.

Pooled outputs (see OUT_* indices): contact events from every substep count
individually; impulse magnitudes are per-substep impulses, so their mean is
the mean per-substep contact impulse.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from ._math import JIT
from ._contact import hybrid_step
from ._dynamics import fk, body_velocities

OUT_BASE_CONTACT = 0    # 1.0 if any contact involved the base link
OUT_N_EVENTS = 1        # pooled active contact count over substeps
OUT_SUM_SPEED_SQ = 2    # sum of squared contact-point speeds over events
OUT_N_BODY = 3          # pooled non-foot contact count
OUT_SUM_BODY_IMP = 4    # sum of impulse magnitudes over non-foot events
OUT_SUM_INTERNAL = 5    # pooled robot-robot contact count
OUT_SIZE = 6


@njit(**JIT)
def _net_forward(x, W1, b1, W2, b2, W3, b3, W4, b4, h1, h2, h3):
    """softsign MLP 6-32-32-32-1 forward for one joint; returns the scalar."""
    for k in range(32):
        s = b1[k]
        for i in range(6):
            s += x[i] * W1[i, k]
        h1[k] = s / (1.0 + abs(s))
    for k in range(32):
        s = b2[k]
        for i in range(32):
            s += h1[i] * W2[i, k]
        h2[k] = s / (1.0 + abs(s))
    for k in range(32):
        s = b3[k]
        for i in range(32):
            s += h2[i] * W3[i, k]
        h3[k] = s / (1.0 + abs(s))
    s = b4[0]
    for i in range(32):
        s += h3[i] * W4[i, 0]
    return s


@njit(**JIT)
def policy_step(m, q, u, target, kp, kd, nsub, use_net,
                W1, b1, W2, b2, W3, b3, W4, b4, net_clip,
                err_ring, vel_ring, head_arr, tap,
                base_force, gravity, mu, dt, erp, margin, tol, max_sweeps,
                ws, cw, q_buf, u_buf, tau_full, xbuf, h1, h2, h3,
                tau_mean, foot_flag, foot_gap, foot_vel, out):
    """Advance nsub substeps under one position target; q, u updated in place.

    err_ring/vel_ring are (ring_size, nj); head_arr[0] is the ring head and
    taps sit ``tap`` slots apart. foot_* are filled from the final substep
    (flags are OR-ed over substeps). Returns nothing; results in the output
    arrays.
    """
    nj = m.nj
    nf = len(m.foot_cols)
    ring_size = err_ring.shape[0]
    for i in range(OUT_SIZE):
        out[i] = 0.0
    for j in range(nj):
        tau_mean[j] = 0.0
    for f in range(nf):
        foot_flag[f] = 0.0

    for s in range(nsub):
        # history push (current error and velocity)
        h = (head_arr[0] + 1) % ring_size
        head_arr[0] = h
        for j in range(nj):
            err_ring[h, j] = target[j] - q[7 + j]
            vel_ring[h, j] = u[6 + j]

        # actuator
        for j in range(nj):
            if use_net:
                t1 = (h - tap) % ring_size
                t2 = (h - 2 * tap) % ring_size
                xbuf[0] = err_ring[h, j]
                xbuf[1] = err_ring[t1, j]
                xbuf[2] = err_ring[t2, j]
                xbuf[3] = vel_ring[h, j]
                xbuf[4] = vel_ring[t1, j]
                xbuf[5] = vel_ring[t2, j]
                tj = _net_forward(xbuf, W1, b1, W2, b2, W3, b3, W4, b4, h1, h2, h3)
                if tj > net_clip:
                    tj = net_clip
                elif tj < -net_clip:
                    tj = -net_clip
            else:
                tj = kp * (target[j] - q[7 + j]) - kd * u[6 + j]
            lim = m.tau_max[j]
            if tj > lim:
                tj = lim
            elif tj < -lim:
                tj = -lim
            tau_full[6 + j] = tj
            tau_mean[j] += tj / nsub
        for k in range(3):
            tau_full[k] = base_force[k]
            tau_full[3 + k] = 0.0

        nact = hybrid_step(m, q, u, tau_full, gravity, mu, dt, erp, margin,
                           tol, max_sweeps, ws, cw, q_buf, u_buf)
        for i in range(q.shape[0]):
            q[i] = q_buf[i]
        for i in range(u.shape[0]):
            u[i] = u_buf[i]

        # divergence bail-out: a blowing-up state must not reach the
        # narrowphase again (coordinates beyond float resolution degenerate
        # the geometry); leave the state for the caller's failure check
        diverged = False
        for i in range(u.shape[0]):
            if not np.isfinite(u[i]) or abs(u[i]) > 1e7:
                diverged = True
                break
        if not diverged:
            for i in range(q.shape[0]):
                if not np.isfinite(q[i]) or abs(q[i]) > 1e9:
                    diverged = True
                    break
        if diverged:
            break

        # pooled contact statistics
        for a in range(nact):
            ci = cw.act[a]
            # post-impulse contact-point velocity in the local frame
            v0 = 0.0
            v1 = 0.0
            v2 = 0.0
            for col in range(m.nu):
                v0 += cw.J[3 * ci, col] * u[col]
                v1 += cw.J[3 * ci + 1, col] * u[col]
                v2 += cw.J[3 * ci + 2, col] * u[col]
            sp2 = v0 * v0 + v1 * v1 + v2 * v2
            l0 = cw.lam[3 * a]
            l1 = cw.lam[3 * a + 1]
            l2 = cw.lam[3 * a + 2]
            imp = np.sqrt(l0 * l0 + l1 * l1 + l2 * l2)
            cola = cw.cnd_cola[ci]
            colb = cw.cnd_colb[ci]
            out[OUT_N_EVENTS] += 1.0
            out[OUT_SUM_SPEED_SQ] += sp2
            is_foot = False
            if colb == -1:
                for f in range(nf):
                    if m.foot_cols[f] == cola:
                        is_foot = True
                        foot_flag[f] = 1.0
            else:
                out[OUT_SUM_INTERNAL] += 1.0
            if not is_foot:
                out[OUT_N_BODY] += 1.0
                out[OUT_SUM_BODY_IMP] += imp
            if m.col_body[cola] == 0 or (colb != -1 and m.col_body[colb] == 0):
                out[OUT_BASE_CONTACT] = 1.0

    # post-step foot kinematics (bottom height above ground, world velocity)
    foot_readout(m, q, u, ws, foot_gap, foot_vel)


@njit(**JIT)
def foot_readout(m, q, u, ws, foot_gap, foot_vel):
    """Foot sphere bottom heights and center world velocities at (q, u)."""
    fk(m, q, ws)
    body_velocities(m, u, ws)
    for f in range(len(m.foot_cols)):
        ci = m.foot_cols[f]
        b = m.col_body[ci]
        cx = (ws.p[b, 0] + ws.R[b, 0, 0] * m.col_pos[ci, 0]
              + ws.R[b, 0, 1] * m.col_pos[ci, 1] + ws.R[b, 0, 2] * m.col_pos[ci, 2])
        cy = (ws.p[b, 1] + ws.R[b, 1, 0] * m.col_pos[ci, 0]
              + ws.R[b, 1, 1] * m.col_pos[ci, 1] + ws.R[b, 1, 2] * m.col_pos[ci, 2])
        cz = (ws.p[b, 2] + ws.R[b, 2, 0] * m.col_pos[ci, 0]
              + ws.R[b, 2, 1] * m.col_pos[ci, 1] + ws.R[b, 2, 2] * m.col_pos[ci, 2])
        foot_gap[f] = cz - m.col_size[ci, 0]
        rx = cx - ws.p[b, 0]
        ry = cy - ws.p[b, 1]
        rz = cz - ws.p[b, 2]
        foot_vel[f, 0] = ws.vorg[b, 0] + ws.omg[b, 1] * rz - ws.omg[b, 2] * ry
        foot_vel[f, 1] = ws.vorg[b, 1] + ws.omg[b, 2] * rx - ws.omg[b, 0] * rz
        foot_vel[f, 2] = ws.vorg[b, 2] + ws.omg[b, 0] * ry - ws.omg[b, 1] * rx
