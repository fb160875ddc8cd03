"""Compiled contact detection and hard-contact impulse solver.

Detection covers collision primitives (sphere, capsule, box) against the
ground plane z = 0 and whitelisted robot-robot pairs. The solver works at the
velocity-impulse level: per-contact exact solves (separation test, sticking
3x3 solve, sliding via bisection on the friction-cone direction angle) swept
in Gauss-Seidel fashion over the Delassus operator G = J M^-1 J^T until the
complementarity residual is below tolerance.

Normal velocity targets: a separated contact may approach at most gap/dt (it
cannot cross the surface within the step); a penetrated contact is pushed out
at erp * depth / dt. Contacts activate within a margin of the surface, widened
by the free-velocity approach distance so fast impacts cannot tunnel.
"""

from collections import namedtuple

import numpy as np
from numba import njit

from ._math import (JIT, cross3, cholesky_factor_profile,
                    cholesky_solve_profile)
from . import _dynamics as dk
from .model import COL_SPHERE, COL_CAPSULE, COL_BOX

# candidates further than this from contact are not considered at all; an
# approach faster than CONSIDER_BAND/dt per step is outside the design range
CONSIDER_BAND = 0.05

CWs = namedtuple(
    "CWs",
    [
        "cnd_pos", "cnd_n", "cnd_t1", "cnd_t2",   # (maxc,3)
        "cnd_gap",                                 # (maxc,)
        "cnd_cola", "cnd_colb", "cnd_ba", "cnd_bb",  # (maxc,) int32
        "cnd_hasj",                                # (maxc,) int32
        "row_blo", "row_bhi",                      # (maxc,) int32 permuted span
        "row_clo", "row_chi",                      # (maxc,) int32 original span
        "J",                                       # (3*maxc, nu) contact-frame rows
        "vfree",                                   # (3*maxc,)
        "act",                                     # (maxc,) int32 active candidate ids
        "W",                                       # (3*maxc, nu) rows of M^-1 J^T
        "G",                                       # (3*maxc, 3*maxc) active Delassus
        "lam", "vcur",                             # (3*maxc,) active-slot impulse/velocity
        "vdes",                                    # (maxc,) active-slot normal targets
        "u_free", "u_plus",                        # (nu,)
        "jrow",                                    # (nu,) scratch
        "g3", "b3", "l3",                          # 3x3 solve scratch
        "stats",                                   # (4,) int64: sweeps, fallbacks, nact, ncand
    ],
)


def alloc_cws(cm) -> CWs:
    maxc, nu = cm.max_contacts, cm.nu
    return CWs(
        cnd_pos=np.zeros((maxc, 3)), cnd_n=np.zeros((maxc, 3)),
        cnd_t1=np.zeros((maxc, 3)), cnd_t2=np.zeros((maxc, 3)),
        cnd_gap=np.zeros(maxc),
        cnd_cola=np.zeros(maxc, dtype=np.int32), cnd_colb=np.zeros(maxc, dtype=np.int32),
        cnd_ba=np.zeros(maxc, dtype=np.int32), cnd_bb=np.zeros(maxc, dtype=np.int32),
        cnd_hasj=np.zeros(maxc, dtype=np.int32),
        row_blo=np.zeros(maxc, dtype=np.int32), row_bhi=np.zeros(maxc, dtype=np.int32),
        row_clo=np.zeros(maxc, dtype=np.int32), row_chi=np.zeros(maxc, dtype=np.int32),
        J=np.zeros((3 * maxc, nu)), vfree=np.zeros(3 * maxc),
        act=np.zeros(maxc, dtype=np.int32),
        W=np.zeros((3 * maxc, nu)), G=np.zeros((3 * maxc, 3 * maxc)),
        lam=np.zeros(3 * maxc), vcur=np.zeros(3 * maxc), vdes=np.zeros(maxc),
        u_free=np.zeros(nu), u_plus=np.zeros(nu), jrow=np.zeros(nu),
        g3=np.zeros((3, 3)), b3=np.zeros(3), l3=np.zeros(3),
        stats=np.zeros(4, dtype=np.int64),
    )


@njit(**JIT)
def _tangent_basis(n, t1, t2):
    # pick the world axis least aligned with n for a stable basis
    if abs(n[0]) < 0.9:
        t1[0], t1[1], t1[2] = 0.0, -n[2], n[1]
    else:
        t1[0], t1[1], t1[2] = -n[2], 0.0, n[0]
    s = np.sqrt(t1[0] ** 2 + t1[1] ** 2 + t1[2] ** 2)
    t1[0] /= s
    t1[1] /= s
    t1[2] /= s
    cross3(n, t1, t2)


@njit(**JIT)
def _add_candidate(cw, k, px, py, pz, nx, ny, nz, gap, cola, colb, ba, bb):
    cw.cnd_pos[k, 0], cw.cnd_pos[k, 1], cw.cnd_pos[k, 2] = px, py, pz
    cw.cnd_n[k, 0], cw.cnd_n[k, 1], cw.cnd_n[k, 2] = nx, ny, nz
    cw.cnd_gap[k] = gap
    cw.cnd_cola[k] = cola
    cw.cnd_colb[k] = colb
    cw.cnd_ba[k] = ba
    cw.cnd_bb[k] = bb
    _tangent_basis(cw.cnd_n[k], cw.cnd_t1[k], cw.cnd_t2[k])


@njit(**JIT)
def _add_ground_candidate(cw, k, px, py, gap, cola, ba):
    # ground normal is +z, so the tangent basis is a constant (what
    # _tangent_basis returns for n = +z)
    cw.cnd_pos[k, 0], cw.cnd_pos[k, 1], cw.cnd_pos[k, 2] = px, py, gap
    cw.cnd_n[k, 0], cw.cnd_n[k, 1], cw.cnd_n[k, 2] = 0.0, 0.0, 1.0
    cw.cnd_t1[k, 0], cw.cnd_t1[k, 1], cw.cnd_t1[k, 2] = 0.0, -1.0, 0.0
    cw.cnd_t2[k, 0], cw.cnd_t2[k, 1], cw.cnd_t2[k, 2] = 1.0, 0.0, 0.0
    cw.cnd_gap[k] = gap
    cw.cnd_cola[k] = cola
    cw.cnd_colb[k] = -1
    cw.cnd_ba[k] = ba
    cw.cnd_bb[k] = -1


@njit(**JIT)
def _detect(m, ws, cw):
    """Fill candidate arrays from current kinematics; returns candidate count.

    Ground candidates farther than the consider band are not emitted (they
    can never activate), except for feet, whose gaps and rows downstream
    readers want every step.
    """
    k = 0
    # --- ground plane z = 0, normal +z ---
    for ci in range(m.ncol):
        b = m.col_body[ci]
        kind = m.col_kind[ci]
        isf = False
        for f in range(len(m.foot_cols)):
            if m.foot_cols[f] == ci:
                isf = True
        if kind == COL_SPHERE:
            cx, cy, cz = _center_xyz(m, ws, ci)
            gap = cz - m.col_size[ci, 0]
            if isf or gap <= CONSIDER_BAND:
                _add_ground_candidate(cw, k, cx, cy, gap, ci, b)
                k += 1
        elif kind == COL_CAPSULE:
            r = m.col_size[ci, 0]
            e0x, e0y, e0z, e1x, e1y, e1z = _segment_ends(m, ws, ci)
            if isf or e0z - r <= CONSIDER_BAND:
                _add_ground_candidate(cw, k, e0x, e0y, e0z - r, ci, b)
                k += 1
            if isf or e1z - r <= CONSIDER_BAND:
                _add_ground_candidate(cw, k, e1x, e1y, e1z - r, ci, b)
                k += 1
        else:
            for sx in range(2):
                for sy in range(2):
                    for sz in range(2):
                        lx = m.col_size[ci, 0] * (2 * sx - 1) + m.col_pos[ci, 0]
                        ly = m.col_size[ci, 1] * (2 * sy - 1) + m.col_pos[ci, 1]
                        lz = m.col_size[ci, 2] * (2 * sz - 1) + m.col_pos[ci, 2]
                        pzw = ws.p[b, 2] + ws.R[b, 2, 0] * lx + ws.R[b, 2, 1] * ly + ws.R[b, 2, 2] * lz
                        if not (isf or pzw <= CONSIDER_BAND):
                            continue
                        pxw = ws.p[b, 0] + ws.R[b, 0, 0] * lx + ws.R[b, 0, 1] * ly + ws.R[b, 0, 2] * lz
                        pyw = ws.p[b, 1] + ws.R[b, 1, 0] * lx + ws.R[b, 1, 1] * ly + ws.R[b, 1, 2] * lz
                        _add_ground_candidate(cw, k, pxw, pyw, pzw, ci, b)
                        k += 1
    # --- robot-robot pairs ---
    # bounding-sphere prune on scalars before entering the narrowphase call;
    # the call itself is ~1us of refcount traffic even on a miss, and almost
    # every pair misses almost every step
    for pi in range(len(m.pairs)):
        i = m.pairs[pi, 0]
        j = m.pairs[pi, 1]
        ba = m.col_body[i]
        bb = m.col_body[j]
        dx = (ws.p[ba, 0] - ws.p[bb, 0]
              + ws.R[ba, 0, 0] * m.col_pos[i, 0] + ws.R[ba, 0, 1] * m.col_pos[i, 1]
              + ws.R[ba, 0, 2] * m.col_pos[i, 2]
              - ws.R[bb, 0, 0] * m.col_pos[j, 0] - ws.R[bb, 0, 1] * m.col_pos[j, 1]
              - ws.R[bb, 0, 2] * m.col_pos[j, 2])
        dy = (ws.p[ba, 1] - ws.p[bb, 1]
              + ws.R[ba, 1, 0] * m.col_pos[i, 0] + ws.R[ba, 1, 1] * m.col_pos[i, 1]
              + ws.R[ba, 1, 2] * m.col_pos[i, 2]
              - ws.R[bb, 1, 0] * m.col_pos[j, 0] - ws.R[bb, 1, 1] * m.col_pos[j, 1]
              - ws.R[bb, 1, 2] * m.col_pos[j, 2])
        dz = (ws.p[ba, 2] - ws.p[bb, 2]
              + ws.R[ba, 2, 0] * m.col_pos[i, 0] + ws.R[ba, 2, 1] * m.col_pos[i, 1]
              + ws.R[ba, 2, 2] * m.col_pos[i, 2]
              - ws.R[bb, 2, 0] * m.col_pos[j, 0] - ws.R[bb, 2, 1] * m.col_pos[j, 1]
              - ws.R[bb, 2, 2] * m.col_pos[j, 2])
        bound = m.col_rbound[i] + m.col_rbound[j] + CONSIDER_BAND
        if dx * dx + dy * dy + dz * dz > bound * bound:
            continue
        # capsule-box pairs that pass the bounding test get a tighter prune:
        # the box distance is 1-Lipschitz, so the capsule surface is at least
        # d(axis center) - half_length - radius from the box
        ka = m.col_kind[i]
        kb = m.col_kind[j]
        if ka == COL_CAPSULE and kb == COL_BOX:
            ax, ay, az = _center_xyz(m, ws, i)
            if (_box_point_dist(m, ws, j, ax, ay, az)
                    - m.col_size[i, 1] - m.col_size[i, 0] > CONSIDER_BAND):
                continue
        elif kb == COL_CAPSULE and ka == COL_BOX:
            bx, by, bz = _center_xyz(m, ws, j)
            if (_box_point_dist(m, ws, i, bx, by, bz)
                    - m.col_size[j, 1] - m.col_size[j, 0] > CONSIDER_BAND):
                continue
        k = _pair_candidate(m, ws, cw, k, i, j)
    return k


@njit(**JIT)
def _pair_candidate(m, ws, cw, k, i, j):
    """At most one candidate per whitelisted pair (caller prunes by bounding
    spheres first).

    Scalar locals and a single exit keep the compiler's refcount elision
    effective; array scratch here costs about a microsecond per call.
    """
    ka = m.col_kind[i]
    kb = m.col_kind[j]
    if ka > kb:  # canonical order: sphere before capsule before box
        t_ = i
        i = j
        j = t_
        t_ = ka
        ka = kb
        kb = t_
    ba = m.col_body[i]
    bb = m.col_body[j]
    ra = m.col_size[i, 0]
    px = py = pz = nx = ny = nz = gap = 0.0
    found = False
    if kb == COL_BOX:
        # a is round: closest point of its center/axis to the box, then a
        # sphere-box contact at that point
        near = True
        if ka == COL_SPHERE:
            ax, ay, az = _center_xyz(m, ws, i)
        else:
            ax, ay, az = _center_xyz(m, ws, i)
            # the box distance is 1-Lipschitz, so the capsule surface is at
            # least d(axis center) - half_length - radius away; one eval here
            # usually prunes the line search below
            if (_box_point_dist(m, ws, j, ax, ay, az) - m.col_size[i, 1] - ra
                    > CONSIDER_BAND):
                near = False
        if near and ka == COL_CAPSULE:
            e0x, e0y, e0z, e1x, e1y, e1z = _segment_ends(m, ws, i)
            # golden-section on the convex segment-to-box distance: one eval
            # per shrink, 20 shrinks localize t to ~7e-5 of the segment, and
            # the distance is quadratically flat at the minimum, so the depth
            # error is far below solver tolerances
            inv_phi = 0.6180339887498949
            lo = 0.0
            hi = 1.0
            t1 = 1.0 - inv_phi
            t2 = inv_phi
            d1 = _box_point_dist(m, ws, j, e0x + (e1x - e0x) * t1,
                                 e0y + (e1y - e0y) * t1, e0z + (e1z - e0z) * t1)
            d2 = _box_point_dist(m, ws, j, e0x + (e1x - e0x) * t2,
                                 e0y + (e1y - e0y) * t2, e0z + (e1z - e0z) * t2)
            for _ in range(20):
                if d1 < d2:
                    hi = t2
                    t2 = t1
                    d2 = d1
                    t1 = hi - inv_phi * (hi - lo)
                    d1 = _box_point_dist(m, ws, j, e0x + (e1x - e0x) * t1,
                                         e0y + (e1y - e0y) * t1,
                                         e0z + (e1z - e0z) * t1)
                else:
                    lo = t1
                    t1 = t2
                    d1 = d2
                    t2 = lo + inv_phi * (hi - lo)
                    d2 = _box_point_dist(m, ws, j, e0x + (e1x - e0x) * t2,
                                         e0y + (e1y - e0y) * t2,
                                         e0z + (e1z - e0z) * t2)
            tm = 0.5 * (lo + hi)
            ax = e0x + (e1x - e0x) * tm
            ay = e0y + (e1y - e0y) * tm
            az = e0z + (e1z - e0z) * tm
        if near:
            sd, lx, ly, lz, ux, uy, uz = _box_closest(m, ws, j, ax, ay, az)
            # normal (from the box into the round body), closest point to world
            nx = ws.R[bb, 0, 0] * ux + ws.R[bb, 0, 1] * uy + ws.R[bb, 0, 2] * uz
            ny = ws.R[bb, 1, 0] * ux + ws.R[bb, 1, 1] * uy + ws.R[bb, 1, 2] * uz
            nz = ws.R[bb, 2, 0] * ux + ws.R[bb, 2, 1] * uy + ws.R[bb, 2, 2] * uz
            lx += m.col_pos[j, 0]
            ly += m.col_pos[j, 1]
            lz += m.col_pos[j, 2]
            wx = ws.p[bb, 0] + ws.R[bb, 0, 0] * lx + ws.R[bb, 0, 1] * ly + ws.R[bb, 0, 2] * lz
            wy = ws.p[bb, 1] + ws.R[bb, 1, 0] * lx + ws.R[bb, 1, 1] * ly + ws.R[bb, 1, 2] * lz
            wz = ws.p[bb, 2] + ws.R[bb, 2, 0] * lx + ws.R[bb, 2, 1] * ly + ws.R[bb, 2, 2] * lz
            gap = sd - ra
            px = wx + 0.5 * gap * nx
            py = wy + 0.5 * gap * ny
            pz = wz + 0.5 * gap * nz
            found = True
    else:
        # both round: closest points between the centers/axes, then a
        # sphere-sphere contact between those points
        rb = m.col_size[j, 0]
        if kb == COL_SPHERE:
            ax, ay, az = _center_xyz(m, ws, i)
            bx, by, bz = _center_xyz(m, ws, j)
        elif ka == COL_SPHERE:
            ax, ay, az = _center_xyz(m, ws, i)
            f0x, f0y, f0z, f1x, f1y, f1z = _segment_ends(m, ws, j)
            t = _segment_point_t(f0x, f0y, f0z, f1x, f1y, f1z, ax, ay, az)
            bx = f0x + (f1x - f0x) * t
            by = f0y + (f1y - f0y) * t
            bz = f0z + (f1z - f0z) * t
        else:
            e0x, e0y, e0z, e1x, e1y, e1z = _segment_ends(m, ws, i)
            f0x, f0y, f0z, f1x, f1y, f1z = _segment_ends(m, ws, j)
            s, t = _segment_segment_st(e0x, e0y, e0z, e1x, e1y, e1z,
                                       f0x, f0y, f0z, f1x, f1y, f1z)
            ax = e0x + (e1x - e0x) * s
            ay = e0y + (e1y - e0y) * s
            az = e0z + (e1z - e0z) * s
            bx = f0x + (f1x - f0x) * t
            by = f0y + (f1y - f0y) * t
            bz = f0z + (f1z - f0z) * t
        dx = ax - bx
        dy = ay - by
        dz = az - bz
        dist = np.sqrt(dx * dx + dy * dy + dz * dz)
        if dist >= 1e-9:
            inv = 1.0 / dist
            nx = dx * inv
            ny = dy * inv
            nz = dz * inv
            gap = dist - ra - rb
            px = 0.5 * (ax - nx * ra + bx + nx * rb)
            py = 0.5 * (ay - ny * ra + by + ny * rb)
            pz = 0.5 * (az - nz * ra + bz + nz * rb)
            found = True
    if found:
        _add_candidate(cw, k, px, py, pz, nx, ny, nz, gap, i, j, ba, bb)
        k += 1
    return k


@njit(**JIT)
def _center_xyz(m, ws, ci):
    """World center of collision body ci as scalars."""
    b = m.col_body[ci]
    x = ws.p[b, 0] + (ws.R[b, 0, 0] * m.col_pos[ci, 0]
                      + ws.R[b, 0, 1] * m.col_pos[ci, 1]
                      + ws.R[b, 0, 2] * m.col_pos[ci, 2])
    y = ws.p[b, 1] + (ws.R[b, 1, 0] * m.col_pos[ci, 0]
                      + ws.R[b, 1, 1] * m.col_pos[ci, 1]
                      + ws.R[b, 1, 2] * m.col_pos[ci, 2])
    z = ws.p[b, 2] + (ws.R[b, 2, 0] * m.col_pos[ci, 0]
                      + ws.R[b, 2, 1] * m.col_pos[ci, 1]
                      + ws.R[b, 2, 2] * m.col_pos[ci, 2])
    return x, y, z


@njit(**JIT)
def _segment_ends(m, ws, ci):
    """World endpoints of capsule ci's axis segment as scalars."""
    b = m.col_body[ci]
    half = m.col_size[ci, 1]
    cx, cy, cz = _center_xyz(m, ws, ci)
    axx = (ws.R[b, 0, 0] * m.col_axis[ci, 0] + ws.R[b, 0, 1] * m.col_axis[ci, 1]
           + ws.R[b, 0, 2] * m.col_axis[ci, 2])
    axy = (ws.R[b, 1, 0] * m.col_axis[ci, 0] + ws.R[b, 1, 1] * m.col_axis[ci, 1]
           + ws.R[b, 1, 2] * m.col_axis[ci, 2])
    axz = (ws.R[b, 2, 0] * m.col_axis[ci, 0] + ws.R[b, 2, 1] * m.col_axis[ci, 1]
           + ws.R[b, 2, 2] * m.col_axis[ci, 2])
    return (cx - axx * half, cy - axy * half, cz - axz * half,
            cx + axx * half, cy + axy * half, cz + axz * half)


@njit(**JIT)
def _box_point_dist(m, ws, ci, pwx, pwy, pwz):
    """Distance from a world point to box ci's surface (negative inside)."""
    b = m.col_body[ci]
    dx = pwx - ws.p[b, 0]
    dy = pwy - ws.p[b, 1]
    dz = pwz - ws.p[b, 2]
    lx = ws.R[b, 0, 0] * dx + ws.R[b, 1, 0] * dy + ws.R[b, 2, 0] * dz - m.col_pos[ci, 0]
    ly = ws.R[b, 0, 1] * dx + ws.R[b, 1, 1] * dy + ws.R[b, 2, 1] * dz - m.col_pos[ci, 1]
    lz = ws.R[b, 0, 2] * dx + ws.R[b, 1, 2] * dy + ws.R[b, 2, 2] * dz - m.col_pos[ci, 2]
    hx, hy, hz = m.col_size[ci, 0], m.col_size[ci, 1], m.col_size[ci, 2]
    cx = min(max(lx, -hx), hx)
    cy = min(max(ly, -hy), hy)
    cz = min(max(lz, -hz), hz)
    if cx != lx or cy != ly or cz != lz:
        ex, ey, ez = lx - cx, ly - cy, lz - cz
        return np.sqrt(ex * ex + ey * ey + ez * ez)
    return -min(hx - abs(lx), min(hy - abs(ly), hz - abs(lz)))


@njit(**JIT)
def _box_closest(m, ws, ci, pwx, pwy, pwz):
    """Closest surface point and outward normal of box ci for a world point.

    Returns (signed distance, point xyz, normal xyz); the point is relative
    to the box center and both are in the link frame.
    """
    b = m.col_body[ci]
    dx = pwx - ws.p[b, 0]
    dy = pwy - ws.p[b, 1]
    dz = pwz - ws.p[b, 2]
    lx = ws.R[b, 0, 0] * dx + ws.R[b, 1, 0] * dy + ws.R[b, 2, 0] * dz - m.col_pos[ci, 0]
    ly = ws.R[b, 0, 1] * dx + ws.R[b, 1, 1] * dy + ws.R[b, 2, 1] * dz - m.col_pos[ci, 1]
    lz = ws.R[b, 0, 2] * dx + ws.R[b, 1, 2] * dy + ws.R[b, 2, 2] * dz - m.col_pos[ci, 2]
    hx, hy, hz = m.col_size[ci, 0], m.col_size[ci, 1], m.col_size[ci, 2]
    cx = min(max(lx, -hx), hx)
    cy = min(max(ly, -hy), hy)
    cz = min(max(lz, -hz), hz)
    if cx != lx or cy != ly or cz != lz:
        ex, ey, ez = lx - cx, ly - cy, lz - cz
        dist = np.sqrt(ex * ex + ey * ey + ez * ez)
        inv = 1.0 / dist
        return dist, cx, cy, cz, ex * inv, ey * inv, ez * inv
    # inside: push out through the nearest face
    fx, fy, fz = hx - abs(lx), hy - abs(ly), hz - abs(lz)
    if fx <= fy and fx <= fz:
        if lx >= 0:
            return -fx, hx, ly, lz, 1.0, 0.0, 0.0
        return -fx, -hx, ly, lz, -1.0, 0.0, 0.0
    if fy <= fz:
        if ly >= 0:
            return -fy, lx, hy, lz, 0.0, 1.0, 0.0
        return -fy, lx, -hy, lz, 0.0, -1.0, 0.0
    if lz >= 0:
        return -fz, lx, ly, hz, 0.0, 0.0, 1.0
    return -fz, lx, ly, -hz, 0.0, 0.0, -1.0


@njit(**JIT)
def _segment_point_t(e0x, e0y, e0z, e1x, e1y, e1z, px, py, pz):
    dx, dy, dz = e1x - e0x, e1y - e0y, e1z - e0z
    denom = dx * dx + dy * dy + dz * dz
    if denom < 1e-14:
        return 0.0
    t = (dx * (px - e0x) + dy * (py - e0y) + dz * (pz - e0z)) / denom
    return min(max(t, 0.0), 1.0)


@njit(**JIT)
def _segment_segment_st(p1x, p1y, p1z, q1x, q1y, q1z,
                        p2x, p2y, p2z, q2x, q2y, q2z):
    """Closest-parameter pair (s, t) between segments p1-q1 and p2-q2."""
    d1x, d1y, d1z = q1x - p1x, q1y - p1y, q1z - p1z
    d2x, d2y, d2z = q2x - p2x, q2y - p2y, q2z - p2z
    rx, ry, rz = p1x - p2x, p1y - p2y, p1z - p2z
    a = d1x * d1x + d1y * d1y + d1z * d1z
    e = d2x * d2x + d2y * d2y + d2z * d2z
    f = d2x * rx + d2y * ry + d2z * rz
    c = d1x * rx + d1y * ry + d1z * rz
    # degenerate segments (can appear when world coordinates are so large
    # that the endpoints round to the same float): fall back to points
    if a < 1e-14 and e < 1e-14:
        return 0.0, 0.0
    if a < 1e-14:
        return 0.0, min(max(f / e, 0.0), 1.0)
    if e < 1e-14:
        return min(max(-c / a, 0.0), 1.0), 0.0
    b = d1x * d2x + d1y * d2y + d1z * d2z
    denom = a * e - b * b
    if denom > 1e-14:
        s = (b * f - c * e) / denom
        s = min(max(s, 0.0), 1.0)
    else:
        s = 0.0
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = min(max(-c / a, 0.0), 1.0)
    elif t > 1.0:
        t = 1.0
        s = min(max((b - c) / a, 0.0), 1.0)
    return s, t


@njit(**JIT)
def _solve_active_rows(m, ws, cw, nact):
    """cw.W[3a + r] = M^-1 cw.J[3 act[a] + r] for every active row, using the
    blocked profile factor.

    Same algorithm as cholesky_solve_profile_row, written out here so the
    whole batch is one call with no per-row call overhead."""
    L = ws.Lp
    perm = m.dof_perm
    first = m.dof_first
    bend = m.dof_bend
    tail = m.ntail
    y = ws.yp
    n = m.nu
    for a in range(nact):
        ca = cw.act[a]
        blo = cw.row_blo[ca]
        bhi = cw.row_bhi[ca]
        for r in range(3):
            br = 3 * ca + r
            xr = 3 * a + r
            for i in range(blo):
                y[i] = 0.0
            for i in range(bhi, tail):
                y[i] = 0.0
            for i in range(blo, bhi):
                s = cw.J[br, perm[i]]
                for t in range(first[i], i):
                    s -= L[i, t] * y[t]
                y[i] = s / L[i, i]
            for i in range(tail, n):
                s = cw.J[br, perm[i]]
                for t in range(blo, bhi):
                    s -= L[i, t] * y[t]
                for t in range(tail, i):
                    s -= L[i, t] * y[t]
                y[i] = s / L[i, i]
            for i in range(n - 1, -1, -1):
                s = y[i]
                be = bend[i]
                for t in range(i + 1, be):
                    s -= L[t, i] * y[t]
                if be < n:
                    for t in range(tail, n):
                        s -= L[t, i] * y[t]
                y[i] = s / L[i, i]
            for i in range(n):
                cw.W[xr, perm[i]] = y[i]


@njit(**JIT)
def _build_rows(m, ws, cw, ci):
    """Contact-frame Jacobian rows (t1, t2, n) for candidate ci.

    Also records the row's column support: the permuted subtree-block span
    (for the blocked inertia solve) and the matching original-order span
    beyond the base dofs (for sparse row dots)."""
    blo = bhi = 0
    for side in range(2):
        body = cw.cnd_ba[ci] if side == 0 else cw.cnd_bb[ci]
        if body >= 0 and m.body_span[body, 1] > m.body_span[body, 0]:
            if bhi == blo:
                blo, bhi = m.body_span[body, 0], m.body_span[body, 1]
            else:
                blo = min(blo, m.body_span[body, 0])
                bhi = max(bhi, m.body_span[body, 1])
    cw.row_blo[ci] = blo
    cw.row_bhi[ci] = bhi
    if m.ntail == 0:
        cw.row_clo[ci], cw.row_chi[ci] = 6, m.nu
    elif bhi > blo:
        cw.row_clo[ci] = m.dof_perm[blo]
        cw.row_chi[ci] = m.dof_perm[blo] + (bhi - blo)
    else:
        cw.row_clo[ci], cw.row_chi[ci] = 6, 6
    base = 3 * ci
    for r in range(3):
        for c in range(m.nu):
            cw.J[base + r, c] = 0.0
    for side in range(2):
        body = cw.cnd_ba[ci] if side == 0 else cw.cnd_bb[ci]
        if body < 0:
            continue
        sgn = 1.0 if side == 0 else -1.0
        nc = dk.body_point_columns(m, body, cw.cnd_pos[ci], ws)
        for col in range(nc):
            d = ws.dof[col]
            jx, jy, jz = ws.Jc[col, 0], ws.Jc[col, 1], ws.Jc[col, 2]
            cw.J[base + 0, d] += sgn * (cw.cnd_t1[ci, 0] * jx + cw.cnd_t1[ci, 1] * jy + cw.cnd_t1[ci, 2] * jz)
            cw.J[base + 1, d] += sgn * (cw.cnd_t2[ci, 0] * jx + cw.cnd_t2[ci, 1] * jy + cw.cnd_t2[ci, 2] * jz)
            cw.J[base + 2, d] += sgn * (cw.cnd_n[ci, 0] * jx + cw.cnd_n[ci, 1] * jy + cw.cnd_n[ci, 2] * jz)
    cw.cnd_hasj[ci] = 1


@njit(**JIT)
def _solve33(A, b, x):
    """Cramer solve for the (well-conditioned SPD) 3x3 per-contact block."""
    c00 = A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1]
    c01 = A[1, 2] * A[2, 0] - A[1, 0] * A[2, 2]
    c02 = A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]
    det = A[0, 0] * c00 + A[0, 1] * c01 + A[0, 2] * c02
    if abs(det) < 1e-300:
        x[0] = x[1] = x[2] = 0.0
        return False
    inv = 1.0 / det
    c10 = A[0, 2] * A[2, 1] - A[0, 1] * A[2, 2]
    c11 = A[0, 0] * A[2, 2] - A[0, 2] * A[2, 0]
    c12 = A[0, 1] * A[2, 0] - A[0, 0] * A[2, 1]
    c20 = A[0, 1] * A[1, 2] - A[0, 2] * A[1, 1]
    c21 = A[0, 2] * A[1, 0] - A[0, 0] * A[1, 2]
    c22 = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    x[0] = (c00 * b[0] + c10 * b[1] + c20 * b[2]) * inv
    x[1] = (c01 * b[0] + c11 * b[1] + c21 * b[2]) * inv
    x[2] = (c02 * b[0] + c12 * b[1] + c22 * b[2]) * inv
    return True


@njit(**JIT)
def _cone_solve(G, vmx, vmy, vmn, vdes, mu, out):
    """Exact single-contact solve given the velocity without own impulse.

    Returns 0 separated, 1 stick, 2 slide, 3 projected fallback.
    """
    if vmn >= vdes:
        out[0] = out[1] = out[2] = 0.0
        return 0
    # sticking: target velocity (0, 0, vdes)
    b0, b1, b2 = -vmx, -vmy, vdes - vmn
    c00 = G[1, 1] * G[2, 2] - G[1, 2] * G[2, 1]
    c01 = G[1, 2] * G[2, 0] - G[1, 0] * G[2, 2]
    c02 = G[1, 0] * G[2, 1] - G[1, 1] * G[2, 0]
    det = G[0, 0] * c00 + G[0, 1] * c01 + G[0, 2] * c02
    l0 = l1 = l2 = 0.0
    if abs(det) > 1e-300:
        inv = 1.0 / det
        c10 = G[0, 2] * G[2, 1] - G[0, 1] * G[2, 2]
        c11 = G[0, 0] * G[2, 2] - G[0, 2] * G[2, 0]
        c12 = G[0, 1] * G[2, 0] - G[0, 0] * G[2, 1]
        c20 = G[0, 1] * G[1, 2] - G[0, 2] * G[1, 1]
        c21 = G[0, 2] * G[1, 0] - G[0, 0] * G[1, 2]
        c22 = G[0, 0] * G[1, 1] - G[0, 1] * G[1, 0]
        l0 = (c00 * b0 + c10 * b1 + c20 * b2) * inv
        l1 = (c01 * b0 + c11 * b1 + c21 * b2) * inv
        l2 = (c02 * b0 + c12 * b1 + c22 * b2) * inv
        if l2 > 0.0 and l0 * l0 + l1 * l1 <= (mu * l2) * (mu * l2):
            out[0], out[1], out[2] = l0, l1, l2
            return 1
    # sliding: lambda = lam_n (-mu cos, -mu sin, 1); root of the alignment
    # cross(d, v_t+) over the cone direction angle
    push = vdes - vmn  # > 0 here
    best_theta = -1.0
    best_absc = 1e300
    prev_c = 0.0
    prev_ok = False
    prev_th = 0.0
    ngrid = 32
    for gi in range(ngrid + 1):
        th = 2.0 * np.pi * gi / ngrid
        ok, cval, dotv, ln = _slide_eval(G, vmx, vmy, push, mu, th)
        if ok and prev_ok and (cval == 0.0 or cval * prev_c < 0.0):
            lo, hi, clo = prev_th, th, prev_c
            for _ in range(64):
                mid = 0.5 * (lo + hi)
                okm, cm, dm, lm = _slide_eval(G, vmx, vmy, push, mu, mid)
                if not okm:
                    break
                if cm * clo <= 0.0:
                    hi = mid
                else:
                    lo = mid
                    clo = cm
            mid = 0.5 * (lo + hi)
            okm, cm, dm, lm = _slide_eval(G, vmx, vmy, push, mu, mid)
            if okm and dm >= -1e-12 and abs(cm) < best_absc:
                best_absc = abs(cm)
                best_theta = mid
        prev_c, prev_ok, prev_th = cval, ok, th
    if best_theta >= 0.0:
        ok, cval, dotv, ln = _slide_eval(G, vmx, vmy, push, mu, best_theta)
        out[0] = -mu * ln * np.cos(best_theta)
        out[1] = -mu * ln * np.sin(best_theta)
        out[2] = ln
        return 2
    # fallback: project the stick impulse onto the cone
    if l2 > 0.0:
        tn = np.sqrt(l0 * l0 + l1 * l1)
        s = mu * l2 / tn if tn > 0.0 else 0.0
        out[0], out[1], out[2] = l0 * s, l1 * s, l2
        return 3
    out[0] = out[1] = out[2] = 0.0
    return 3


@njit(**JIT)
def _slide_eval(G, vmx, vmy, push, mu, th):
    ct = np.cos(th)
    st = np.sin(th)
    denom = G[2, 2] - mu * (G[2, 0] * ct + G[2, 1] * st)
    if denom < 1e-12:
        return False, 0.0, 0.0, 0.0
    ln = push / denom
    if ln <= 0.0:
        return False, 0.0, 0.0, 0.0
    vtx = vmx + ln * (G[0, 2] - mu * (G[0, 0] * ct + G[0, 1] * st))
    vty = vmy + ln * (G[1, 2] - mu * (G[1, 0] * ct + G[1, 1] * st))
    cval = ct * vty - st * vtx
    dotv = ct * vtx + st * vty
    return True, cval, dotv, ln


@njit(**JIT)
def solve_contacts(m, cw, nact, mu, tol, max_sweeps):
    """Gauss-Seidel over active contacts with exact per-contact solves.

    cw.vcur must hold the free velocities of active rows on entry; cw.lam is
    zeroed here. Returns the sweep count used.
    """
    for k in range(3 * nact):
        cw.lam[k] = 0.0
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        max_dv = 0.0
        for a in range(nact):
            r = 3 * a
            # velocity without own impulse
            g = cw.G
            vmx = cw.vcur[r] - (g[r, r] * cw.lam[r] + g[r, r + 1] * cw.lam[r + 1] + g[r, r + 2] * cw.lam[r + 2])
            vmy = cw.vcur[r + 1] - (g[r + 1, r] * cw.lam[r] + g[r + 1, r + 1] * cw.lam[r + 1] + g[r + 1, r + 2] * cw.lam[r + 2])
            vmn = cw.vcur[r + 2] - (g[r + 2, r] * cw.lam[r] + g[r + 2, r + 1] * cw.lam[r + 1] + g[r + 2, r + 2] * cw.lam[r + 2])
            for i in range(3):
                for j in range(3):
                    cw.g3[i, j] = g[r + i, r + j]
            code = _cone_solve(cw.g3, vmx, vmy, vmn, cw.vdes[a], mu, cw.l3)
            if code == 3:
                cw.stats[1] += 1
            d0 = cw.l3[0] - cw.lam[r]
            d1 = cw.l3[1] - cw.lam[r + 1]
            d2 = cw.l3[2] - cw.lam[r + 2]
            if d0 != 0.0 or d1 != 0.0 or d2 != 0.0:
                for k in range(3 * nact):
                    dv = g[k, r] * d0 + g[k, r + 1] * d1 + g[k, r + 2] * d2
                    cw.vcur[k] += dv
                    if abs(dv) > max_dv:
                        max_dv = abs(dv)
                cw.lam[r] = cw.l3[0]
                cw.lam[r + 1] = cw.l3[1]
                cw.lam[r + 2] = cw.l3[2]
        if max_dv < tol:
            break
    return sweep


@njit(**JIT)
def kkt_residual(cw, nact, mu):
    """Worst per-contact optimality violation, velocity units."""
    worst = 0.0
    for a in range(nact):
        r = 3 * a
        ln = cw.lam[r + 2]
        lt = np.sqrt(cw.lam[r] ** 2 + cw.lam[r + 1] ** 2)
        vn = cw.vcur[r + 2]
        vt = np.sqrt(cw.vcur[r] ** 2 + cw.vcur[r + 1] ** 2)
        vdes = cw.vdes[a]
        # normal feasibility and complementarity
        if vn < vdes - 1e-15:
            worst = max(worst, vdes - vn)
        if ln > 1e-12:
            worst = max(worst, abs(vn - vdes))
            cone_slack = mu * ln - lt
            if cone_slack < -1e-12 * max(1.0, ln):
                worst = max(worst, -cone_slack)
            if cone_slack > 1e-10 * max(1.0, ln):
                # strictly inside the cone: must stick
                worst = max(worst, vt)
            elif vt > 1e-12 and lt > 0.0:
                # sliding: tangential velocity opposes the impulse
                crossv = (cw.lam[r] * cw.vcur[r + 1] - cw.lam[r + 1] * cw.vcur[r]) / lt
                dotv = (cw.lam[r] * cw.vcur[r] + cw.lam[r + 1] * cw.vcur[r + 1]) / lt
                worst = max(worst, abs(crossv))
                if dotv > 0.0:
                    worst = max(worst, dotv)
    return worst


@njit(**JIT)
def hybrid_step(m, q, u, tau, gravity, mu, dt, erp, margin, tol, max_sweeps,
                ws, cw, q_out, u_out):
    """One simulation step: free dynamics, detection, impulse solve, integrate.

    Returns the active contact count; per-contact results stay in cw (active
    candidate ids in cw.act, contact-frame impulses in cw.lam, post-impulse
    contact velocities in cw.vcur). cw.stats collects sweeps/fallbacks.
    """
    for i in range(4):
        cw.stats[i] = 0
    dk.fk(m, q, ws)
    dk.body_velocities(m, u, ws)
    dk.inertia_and_bias(m, u, ws.zero_u, gravity, ws, ws.h)
    for i in range(m.nu):
        ws.rhs[i] = tau[i] - ws.h[i]
    cholesky_factor_profile(ws.M, m.dof_perm, m.dof_first, ws.Lp, m.nu)
    cholesky_solve_profile(ws.Lp, m.dof_perm, m.dof_first, m.dof_bend, m.ntail,
                           ws.rhs, ws.yp, ws.acc, m.nu)
    for i in range(m.nu):
        cw.u_free[i] = u[i] + dt * ws.acc[i]

    ncand = _detect(m, ws, cw)
    cw.stats[3] = ncand
    for ci in range(ncand):
        cw.cnd_hasj[ci] = 0

    # activation: inside the margin now, or crossing it within one free step;
    # feet always get Jacobian rows (their velocities feed the cost terms)
    nact = 0
    for ci in range(ncand):
        gap = cw.cnd_gap[ci]
        is_foot = False
        for f in range(len(m.foot_cols)):
            if cw.cnd_cola[ci] == m.foot_cols[f] and cw.cnd_colb[ci] == -1:
                is_foot = True
        if gap > CONSIDER_BAND and not is_foot:
            continue
        _build_rows(m, ws, cw, ci)
        vn = 0.0
        for c in range(6):
            vn += cw.J[3 * ci + 2, c] * cw.u_free[c]
        for c in range(cw.row_clo[ci], cw.row_chi[ci]):
            vn += cw.J[3 * ci + 2, c] * cw.u_free[c]
        if gap <= margin or gap + min(vn, 0.0) * dt <= margin:
            cw.act[nact] = ci
            nact += 1
    cw.stats[2] = nact

    if nact > 0:
        # W rows and active Delassus blocks; row dots run over each row's
        # column support (base dofs plus its subtree span) only, and the
        # Delassus matrix is symmetric so only the upper blocks are formed
        _solve_active_rows(m, ws, cw, nact)
        for a in range(nact):
            ca = cw.act[a]
            clo = cw.row_clo[ca]
            chi = cw.row_chi[ca]
            for b in range(a, nact):
                for r in range(3):
                    s0 = r if b == a else 0
                    for s in range(s0, 3):
                        acc = 0.0
                        for c in range(6):
                            acc += cw.J[3 * ca + r, c] * cw.W[3 * b + s, c]
                        for c in range(clo, chi):
                            acc += cw.J[3 * ca + r, c] * cw.W[3 * b + s, c]
                        cw.G[3 * a + r, 3 * b + s] = acc
                        cw.G[3 * b + s, 3 * a + r] = acc
        for a in range(nact):
            ci = cw.act[a]
            for r in range(3):
                acc = 0.0
                for c in range(6):
                    acc += cw.J[3 * ci + r, c] * cw.u_free[c]
                for c in range(cw.row_clo[ci], cw.row_chi[ci]):
                    acc += cw.J[3 * ci + r, c] * cw.u_free[c]
                cw.vcur[3 * a + r] = acc
            gap = cw.cnd_gap[ci]
            if gap <= 0.0:
                cw.vdes[a] = -erp * gap / dt
            else:
                cw.vdes[a] = -gap / dt
        sweeps = solve_contacts(m, cw, nact, mu, tol, max_sweeps)
        cw.stats[0] = sweeps
        for i in range(m.nu):
            acc = 0.0
            for a in range(3 * nact):
                acc += cw.W[a, i] * cw.lam[a]
            cw.u_plus[i] = cw.u_free[i] + acc
    else:
        cw.stats[0] = 0
        for i in range(m.nu):
            cw.u_plus[i] = cw.u_free[i]

    for i in range(m.nu):
        u_out[i] = cw.u_plus[i]
    dk.integrate(q, u_out, dt, q_out, ws)
    return nact
