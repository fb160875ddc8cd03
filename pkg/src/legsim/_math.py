"""Small fixed-size math kernels shared by the compiled simulation code.

Everything here is numba-compiled scalar code over preallocated arrays; the
hot loops avoid temporaries so a full simulation step stays allocation-light.
Quaternions are unit, ordered (w, x, y, z), and rotate body frame -> world.
"""

import numpy as np
from numba import njit

JIT = dict(cache=True, fastmath=False)


@njit(**JIT)
def cross3(a, b, out):
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


@njit(**JIT)
def dot3(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(**JIT)
def mat3_vec(A, v, out):
    out[0] = A[0, 0] * v[0] + A[0, 1] * v[1] + A[0, 2] * v[2]
    out[1] = A[1, 0] * v[0] + A[1, 1] * v[1] + A[1, 2] * v[2]
    out[2] = A[2, 0] * v[0] + A[2, 1] * v[1] + A[2, 2] * v[2]


@njit(**JIT)
def mat3_tvec(A, v, out):
    """out = A^T v."""
    out[0] = A[0, 0] * v[0] + A[1, 0] * v[1] + A[2, 0] * v[2]
    out[1] = A[0, 1] * v[0] + A[1, 1] * v[1] + A[2, 1] * v[2]
    out[2] = A[0, 2] * v[0] + A[1, 2] * v[1] + A[2, 2] * v[2]


@njit(**JIT)
def mat3_mat3(A, B, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]


@njit(**JIT)
def rot_inertia(R, I, out, tmp):
    """out = R I R^T for a symmetric 3x3 inertia."""
    mat3_mat3(R, I, tmp)
    for i in range(3):
        for j in range(3):
            out[i, j] = tmp[i, 0] * R[j, 0] + tmp[i, 1] * R[j, 1] + tmp[i, 2] * R[j, 2]


@njit(**JIT)
def quat_to_rot(q, R):
    w, x, y, z = q[0], q[1], q[2], q[3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    R[0, 0] = 1.0 - 2.0 * (yy + zz)
    R[0, 1] = 2.0 * (xy - wz)
    R[0, 2] = 2.0 * (xz + wy)
    R[1, 0] = 2.0 * (xy + wz)
    R[1, 1] = 1.0 - 2.0 * (xx + zz)
    R[1, 2] = 2.0 * (yz - wx)
    R[2, 0] = 2.0 * (xz - wy)
    R[2, 1] = 2.0 * (yz + wx)
    R[2, 2] = 1.0 - 2.0 * (xx + yy)


@njit(**JIT)
def quat_mul(a, b, out):
    out[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
    out[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2]
    out[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1]
    out[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]


@njit(**JIT)
def quat_from_rotvec(v, out):
    """Exponential map: rotation vector -> unit quaternion."""
    angle = np.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    half = 0.5 * angle
    if angle < 1e-12:
        # second-order series keeps the map smooth through zero
        s = 0.5 - angle * angle / 48.0
        out[0] = 1.0 - half * half / 2.0
    else:
        s = np.sin(half) / angle
        out[0] = np.cos(half)
    out[1] = v[0] * s
    out[2] = v[1] * s
    out[3] = v[2] * s


@njit(**JIT)
def quat_normalize(q):
    n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    q[0] /= n
    q[1] /= n
    q[2] /= n
    q[3] /= n


@njit(**JIT)
def axis_angle_rot(axis, angle, R):
    """Rodrigues formula for a unit axis."""
    c = np.cos(angle)
    s = np.sin(angle)
    t = 1.0 - c
    x, y, z = axis[0], axis[1], axis[2]
    R[0, 0] = t * x * x + c
    R[0, 1] = t * x * y - s * z
    R[0, 2] = t * x * z + s * y
    R[1, 0] = t * x * y + s * z
    R[1, 1] = t * y * y + c
    R[1, 2] = t * y * z - s * x
    R[2, 0] = t * x * z - s * y
    R[2, 1] = t * y * z + s * x
    R[2, 2] = t * z * z + c


@njit(**JIT)
def cholesky_factor(A, L, n):
    """Lower-triangular factor of a symmetric positive definite A (in place ok)."""
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    for i in range(n):
        for j in range(i + 1, n):
            L[i, j] = 0.0


@njit(**JIT)
def cholesky_solve(L, b, x, n):
    """Solve L L^T x = b; b is untouched, x may not alias b."""
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * x[k]
        x[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]


@njit(**JIT)
def cholesky_factor_profile(A, perm, first, L, n):
    """Lower factor of the permuted matrix P A P^T, skipping columns left of
    first[row]: those are structurally zero, and the factor of a block-diagonal
    matrix with a dense border fills nothing between the diagonal blocks. L is
    written in permuted coordinates; entries outside the profile are never
    touched and must be zero from allocation."""
    for r in range(n):
        pr = perm[r]
        for c in range(first[r], r + 1):
            s = A[pr, perm[c]]
            for t in range(first[c], c):
                s -= L[r, t] * L[c, t]
            if c == r:
                L[r, r] = np.sqrt(s)
            else:
                L[r, c] = s / L[c, c]


@njit(**JIT)
def cholesky_solve_profile(L, perm, first, bend, tail, b, y, x, n):
    """Solve A x = b given the profile factor of P A P^T; y is scratch.

    bend[r] ends row r's diagonal block; rows at and past tail are the dense
    border, the only rows below a block that can couple back into it."""
    for r in range(n):
        s = b[perm[r]]
        for t in range(first[r], r):
            s -= L[r, t] * y[t]
        y[r] = s / L[r, r]
    for r in range(n - 1, -1, -1):
        s = y[r]
        be = bend[r]
        for t in range(r + 1, be):
            s -= L[t, r] * y[t]
        if be < n:
            for t in range(tail, n):
                s -= L[t, r] * y[t]
        y[r] = s / L[r, r]
    for r in range(n):
        x[perm[r]] = y[r]


@njit(**JIT)
def cholesky_solve_profile_row(L, perm, first, bend, tail, B, br, blo, bhi,
                               y, X, xr, n):
    """cholesky_solve_profile for B[br] -> X[xr] when the permuted right-hand
    side is zero outside [blo, bhi) and the dense border: forward substitution
    skips the untouched diagonal blocks (their intermediates stay zero)."""
    for r in range(blo):
        y[r] = 0.0
    for r in range(bhi, tail):
        y[r] = 0.0
    for r in range(blo, bhi):
        s = B[br, perm[r]]
        for t in range(first[r], r):
            s -= L[r, t] * y[t]
        y[r] = s / L[r, r]
    for r in range(tail, n):
        s = B[br, perm[r]]
        for t in range(blo, bhi):
            s -= L[r, t] * y[t]
        for t in range(tail, r):
            s -= L[r, t] * y[t]
        y[r] = s / L[r, r]
    for r in range(n - 1, -1, -1):
        s = y[r]
        be = bend[r]
        for t in range(r + 1, be):
            s -= L[t, r] * y[t]
        if be < n:
            for t in range(tail, n):
                s -= L[t, r] * y[t]
        y[r] = s / L[r, r]
    for r in range(n):
        X[xr, perm[r]] = y[r]
