"""Compiled articulated-dynamics kernels.

Generalized coordinates: q = [base position (world), base quaternion (w,x,y,z),
joint angles]; generalized velocity: u = [base linear velocity (world), base
angular velocity (body frame), joint rates]. Dynamics are formed directly in
these coordinates by world-frame Newton-Euler recursion projected through each
body's Jacobian, so M(q) u_dot + h(q, u) = tau holds with tau conjugate to u.

All kernels write into caller-owned workspace arrays (see :func:`alloc_ws`)
and are written element-wise: no temporaries are allocated per call.
"""

from collections import namedtuple

import numpy as np
from numba import njit

from ._math import (JIT, cross3, dot3, mat3_vec, axis_angle_rot, mat3_mat3,
                    rot_inertia, quat_to_rot, quat_mul, quat_from_rotvec,
                    quat_normalize, cholesky_factor, cholesky_solve)

Ws = namedtuple(
    "Ws",
    [
        "R", "p", "axw", "comw",            # forward kinematics, per body
        "omg", "vcom", "vorg",              # world-frame velocities, per body
        "domg", "aorg",                     # acceleration recursion, per body
        "Iw", "t33",                        # world inertia scratch
        "Jw", "Jc", "IJw", "dof",           # per-body Jacobian columns
        "M", "L", "h", "rhs", "acc",        # joint-space matrices/vectors
        "Lp", "yp",                         # profile factor (permuted) + scratch
        "zero_u",                           # constant zero udot for bias calls
        "v3a", "v3b", "v3c", "v3d",
        "q4a", "q4b",
    ],
)


def alloc_ws(cm) -> Ws:
    nb, nu = cm.nb, cm.nu
    maxc = 6 + cm.chain.shape[1]
    return Ws(
        R=np.zeros((nb, 3, 3)), p=np.zeros((nb, 3)),
        axw=np.zeros((nb, 3)), comw=np.zeros((nb, 3)),
        omg=np.zeros((nb, 3)), vcom=np.zeros((nb, 3)), vorg=np.zeros((nb, 3)),
        domg=np.zeros((nb, 3)), aorg=np.zeros((nb, 3)),
        Iw=np.zeros((3, 3)), t33=np.zeros((3, 3)),
        Jw=np.zeros((maxc, 3)), Jc=np.zeros((maxc, 3)), IJw=np.zeros((maxc, 3)),
        dof=np.zeros(maxc, dtype=np.int32),
        M=np.zeros((nu, nu)), L=np.zeros((nu, nu)), h=np.zeros(nu),
        rhs=np.zeros(nu), acc=np.zeros(nu),
        Lp=np.zeros((nu, nu)), yp=np.zeros(nu),
        zero_u=np.zeros(nu),
        v3a=np.zeros(3), v3b=np.zeros(3), v3c=np.zeros(3), v3d=np.zeros(3),
        q4a=np.zeros(4), q4b=np.zeros(4),
    )


@njit(**JIT)
def fk(m, q, ws):
    """Fill world rotations, body origins, joint axes, and com positions."""
    R, p, axw, comw = ws.R, ws.p, ws.axw, ws.comw
    quat_to_rot(q[3:7], R[0])
    p[0, 0], p[0, 1], p[0, 2] = q[0], q[1], q[2]
    mat3_vec(R[0], m.com[0], comw[0])
    for i in range(3):
        comw[0, i] += p[0, i]
    for b in range(1, m.nb):
        pa = m.parent[b]
        axis_angle_rot(m.jaxis[b], q[6 + b], ws.t33)
        mat3_mat3(R[pa], ws.t33, R[b])
        mat3_vec(R[pa], m.jorigin[b], p[b])
        for i in range(3):
            p[b, i] += p[pa, i]
        mat3_vec(R[b], m.jaxis[b], axw[b])
        mat3_vec(R[b], m.com[b], comw[b])
        for i in range(3):
            comw[b, i] += p[b, i]


@njit(**JIT)
def body_velocities(m, u, ws):
    """World angular velocity and com/origin linear velocities per body."""
    omg, vcom, vorg = ws.omg, ws.vcom, ws.vorg
    mat3_vec(ws.R[0], u[3:6], omg[0])
    vorg[0, 0], vorg[0, 1], vorg[0, 2] = u[0], u[1], u[2]
    for b in range(m.nb):
        if b > 0:
            pa = m.parent[b]
            for i in range(3):
                ws.v3a[i] = ws.p[b, i] - ws.p[pa, i]
            cross3(omg[pa], ws.v3a, ws.v3b)
            for i in range(3):
                vorg[b, i] = vorg[pa, i] + ws.v3b[i]
                omg[b, i] = omg[pa, i] + ws.axw[b, i] * u[5 + b]
        for i in range(3):
            ws.v3a[i] = ws.comw[b, i] - ws.p[b, i]
        cross3(omg[b], ws.v3a, ws.v3b)
        for i in range(3):
            vcom[b, i] = vorg[b, i] + ws.v3b[i]


@njit(**JIT)
def body_point_columns(m, b, point, ws):
    """Jacobian columns of a world point rigidly attached to body b.

    Fills ws.Jw, ws.Jc, ws.dof; returns the column count. Column order is the
    six base dofs then the joints along the chain root-first, so dof indices
    are strictly increasing.
    """
    Jw, Jc, dof = ws.Jw, ws.Jc, ws.dof
    for k in range(3):
        for i in range(3):
            Jw[k, i] = 0.0
            Jc[k, i] = 1.0 if i == k else 0.0
        dof[k] = k
    for i in range(3):
        ws.v3a[i] = point[i] - ws.p[0, i]
    for k in range(3):
        # base angular velocity is body-frame: world contribution is R0 e_k
        for i in range(3):
            Jw[3 + k, i] = ws.R[0, i, k]
        cross3(Jw[3 + k], ws.v3a, Jc[3 + k])
        dof[3 + k] = 3 + k
    nc = 6
    for k in range(m.depth[b]):
        a = m.chain[b, k]
        for i in range(3):
            Jw[nc, i] = ws.axw[a, i]
            ws.v3b[i] = point[i] - ws.p[a, i]
        cross3(ws.axw[a], ws.v3b, Jc[nc])
        dof[nc] = 5 + a
        nc += 1
    return nc


@njit(**JIT)
def mass_matrix(m, ws):
    """Joint-space inertia matrix from per-body Jacobian products (fk first)."""
    M = ws.M
    M[:] = 0.0
    for b in range(m.nb):
        nc = body_point_columns(m, b, ws.comw[b], ws)
        rot_inertia(ws.R[b], m.inertia[b], ws.Iw, ws.t33)
        for j in range(nc):
            mat3_vec(ws.Iw, ws.Jw[j], ws.IJw[j])
        mb = m.mass[b]
        for i in range(nc):
            di = ws.dof[i]
            for j in range(i, nc):
                M[di, ws.dof[j]] += mb * dot3(ws.Jc[i], ws.Jc[j]) + dot3(ws.Jw[i], ws.IJw[j])
    for i in range(m.nu):
        for j in range(i + 1, m.nu):
            M[j, i] = M[i, j]


@njit(**JIT)
def newton_euler(m, u, udot, gravity, ws, out):
    """Generalized force producing acceleration udot at the current state
    (requires fk and body_velocities). With udot = 0 this is the bias term h
    (Coriolis, centrifugal, gravity)."""
    domg, aorg = ws.domg, ws.aorg
    # base: world angular acceleration is R0 udot_ang exactly (the transport
    # term omega x omega vanishes), origin acceleration is udot_lin
    mat3_vec(ws.R[0], udot[3:6], domg[0])
    aorg[0, 0], aorg[0, 1], aorg[0, 2] = udot[0], udot[1], udot[2]
    out[:] = 0.0
    for b in range(m.nb):
        if b > 0:
            pa = m.parent[b]
            for i in range(3):
                ws.v3a[i] = ws.p[b, i] - ws.p[pa, i]
            cross3(domg[pa], ws.v3a, ws.v3b)
            cross3(ws.omg[pa], ws.v3a, ws.v3c)
            cross3(ws.omg[pa], ws.v3c, ws.v3d)
            for i in range(3):
                aorg[b, i] = aorg[pa, i] + ws.v3b[i] + ws.v3d[i]
            cross3(ws.omg[pa], ws.axw[b], ws.v3b)
            for i in range(3):
                domg[b, i] = domg[pa, i] + ws.v3b[i] * u[5 + b] + ws.axw[b, i] * udot[5 + b]
        # com acceleration: a_org + domg x rc + omg x (omg x rc)
        for i in range(3):
            ws.v3a[i] = ws.comw[b, i] - ws.p[b, i]
        cross3(domg[b], ws.v3a, ws.v3b)
        cross3(ws.omg[b], ws.v3a, ws.v3c)
        cross3(ws.omg[b], ws.v3c, ws.v3d)
        fx = m.mass[b] * (aorg[b, 0] + ws.v3b[0] + ws.v3d[0] - gravity[0])
        fy = m.mass[b] * (aorg[b, 1] + ws.v3b[1] + ws.v3d[1] - gravity[1])
        fz = m.mass[b] * (aorg[b, 2] + ws.v3b[2] + ws.v3d[2] - gravity[2])
        # N = I_w domg + omg x I_w omg
        rot_inertia(ws.R[b], m.inertia[b], ws.Iw, ws.t33)
        mat3_vec(ws.Iw, ws.omg[b], ws.v3a)
        cross3(ws.omg[b], ws.v3a, ws.v3b)
        mat3_vec(ws.Iw, domg[b], ws.v3c)
        nx = ws.v3c[0] + ws.v3b[0]
        ny = ws.v3c[1] + ws.v3b[1]
        nz = ws.v3c[2] + ws.v3b[2]
        nc = body_point_columns(m, b, ws.comw[b], ws)
        for i in range(nc):
            out[ws.dof[i]] += (fx * ws.Jc[i, 0] + fy * ws.Jc[i, 1] + fz * ws.Jc[i, 2]
                               + nx * ws.Jw[i, 0] + ny * ws.Jw[i, 1] + nz * ws.Jw[i, 2])


@njit(**JIT)
def inertia_and_bias(m, u, udot, gravity, ws, out):
    """mass_matrix and newton_euler in one pass: the per-body Jacobian columns
    and world inertia are built once and feed both accumulations, with results
    bit-identical to the separate calls (requires fk and body_velocities).

    The com-point column build (body_point_columns) is written out in the body
    loop here, with the constant base columns hoisted: the translation columns
    are the identity with zero angular part, so their inertia products vanish
    and they only contribute mass dot products."""
    domg, aorg = ws.domg, ws.aorg
    Jw, Jc, dof = ws.Jw, ws.Jc, ws.dof
    mat3_vec(ws.R[0], udot[3:6], domg[0])
    aorg[0, 0], aorg[0, 1], aorg[0, 2] = udot[0], udot[1], udot[2]
    out[:] = 0.0
    M = ws.M
    M[:] = 0.0
    for k in range(3):
        for i in range(3):
            Jw[k, i] = 0.0
            Jc[k, i] = 1.0 if i == k else 0.0
            Jw[3 + k, i] = ws.R[0, i, k]
        dof[k] = k
        dof[3 + k] = 3 + k
    for b in range(m.nb):
        if b > 0:
            pa = m.parent[b]
            for i in range(3):
                ws.v3a[i] = ws.p[b, i] - ws.p[pa, i]
            cross3(domg[pa], ws.v3a, ws.v3b)
            cross3(ws.omg[pa], ws.v3a, ws.v3c)
            cross3(ws.omg[pa], ws.v3c, ws.v3d)
            for i in range(3):
                aorg[b, i] = aorg[pa, i] + ws.v3b[i] + ws.v3d[i]
            cross3(ws.omg[pa], ws.axw[b], ws.v3b)
            for i in range(3):
                domg[b, i] = domg[pa, i] + ws.v3b[i] * u[5 + b] + ws.axw[b, i] * udot[5 + b]
        for i in range(3):
            ws.v3a[i] = ws.comw[b, i] - ws.p[b, i]
        cross3(domg[b], ws.v3a, ws.v3b)
        cross3(ws.omg[b], ws.v3a, ws.v3c)
        cross3(ws.omg[b], ws.v3c, ws.v3d)
        mb = m.mass[b]
        fx = mb * (aorg[b, 0] + ws.v3b[0] + ws.v3d[0] - gravity[0])
        fy = mb * (aorg[b, 1] + ws.v3b[1] + ws.v3d[1] - gravity[1])
        fz = mb * (aorg[b, 2] + ws.v3b[2] + ws.v3d[2] - gravity[2])
        rot_inertia(ws.R[b], m.inertia[b], ws.Iw, ws.t33)
        mat3_vec(ws.Iw, ws.omg[b], ws.v3a)
        cross3(ws.omg[b], ws.v3a, ws.v3b)
        mat3_vec(ws.Iw, domg[b], ws.v3c)
        nx = ws.v3c[0] + ws.v3b[0]
        ny = ws.v3c[1] + ws.v3b[1]
        nz = ws.v3c[2] + ws.v3b[2]
        # com-point columns: base rotation then the joints along the chain
        for i in range(3):
            ws.v3a[i] = ws.comw[b, i] - ws.p[0, i]
        for k in range(3):
            cross3(Jw[3 + k], ws.v3a, Jc[3 + k])
        nc = 6
        for k in range(m.depth[b]):
            a = m.chain[b, k]
            for i in range(3):
                Jw[nc, i] = ws.axw[a, i]
                ws.v3b[i] = ws.comw[b, i] - ws.p[a, i]
            cross3(ws.axw[a], ws.v3b, Jc[nc])
            dof[nc] = 5 + a
            nc += 1
        for j in range(3, nc):
            mat3_vec(ws.Iw, Jw[j], ws.IJw[j])
        for i in range(3):
            out[i] += fx * Jc[i, 0] + fy * Jc[i, 1] + fz * Jc[i, 2]
            for j in range(i, nc):
                M[i, dof[j]] += mb * dot3(Jc[i], Jc[j])
        for i in range(3, nc):
            di = dof[i]
            out[di] += (fx * Jc[i, 0] + fy * Jc[i, 1] + fz * Jc[i, 2]
                        + nx * Jw[i, 0] + ny * Jw[i, 1] + nz * Jw[i, 2])
            for j in range(i, nc):
                M[di, dof[j]] += mb * dot3(Jc[i], Jc[j]) + dot3(Jw[i], ws.IJw[j])
    for i in range(m.nu):
        for j in range(i + 1, m.nu):
            M[j, i] = M[i, j]


@njit(**JIT)
def forward_dynamics(m, q, u, tau, gravity, ws):
    """Fill ws.acc with udot solving M udot = tau - h. Refreshes fk/velocities."""
    fk(m, q, ws)
    body_velocities(m, u, ws)
    mass_matrix(m, ws)
    newton_euler(m, u, ws.zero_u, gravity, ws, ws.h)
    for i in range(m.nu):
        ws.rhs[i] = tau[i] - ws.h[i]
    cholesky_factor(ws.M, ws.L, m.nu)
    cholesky_solve(ws.L, ws.rhs, ws.acc, m.nu)


@njit(**JIT)
def integrate(q, u, dt, q_out, ws):
    """Advance positions with the (already updated) velocity u."""
    q_out[0] = q[0] + dt * u[0]
    q_out[1] = q[1] + dt * u[1]
    q_out[2] = q[2] + dt * u[2]
    ws.v3a[0] = u[3] * dt
    ws.v3a[1] = u[4] * dt
    ws.v3a[2] = u[5] * dt
    quat_from_rotvec(ws.v3a, ws.q4a)
    for i in range(4):
        ws.q4b[i] = q[3 + i]
    quat_mul(ws.q4b, ws.q4a, q_out[3:7])
    quat_normalize(q_out[3:7])
    for j in range(len(q) - 7):
        q_out[7 + j] = q[7 + j] + dt * u[6 + j]


@njit(**JIT)
def kinetic_energy(m, ws):
    """Sum of per-body kinetic energies (fk and body_velocities first)."""
    e = 0.0
    for b in range(m.nb):
        rot_inertia(ws.R[b], m.inertia[b], ws.Iw, ws.t33)
        mat3_vec(ws.Iw, ws.omg[b], ws.v3a)
        e += 0.5 * m.mass[b] * dot3(ws.vcom[b], ws.vcom[b])
        e += 0.5 * dot3(ws.omg[b], ws.v3a)
    return e


@njit(**JIT)
def potential_energy(m, gravity, ws):
    e = 0.0
    for b in range(m.nb):
        e -= m.mass[b] * dot3(gravity, ws.comw[b])
    return e


@njit(**JIT)
def joint_limit_violation(m, q):
    for j in range(m.nj):
        if q[7 + j] < m.limit_lo[j] or q[7 + j] > m.limit_hi[j]:
            return True
    return False
