"""Public dynamics operations on robot models.

These wrappers allocate a fresh workspace per call and return plain arrays;
the simulation engine reuses workspaces internally instead.
"""

from __future__ import annotations

from collections import namedtuple

import numpy as np

from . import _dynamics as dk
from .model import CompiledModel, RobotModel

GRAVITY = np.array([0.0, 0.0, -9.81])

FrameKinematics = namedtuple(
    "FrameKinematics",
    ["rot", "pos", "joint_axis", "com", "omega", "v_com", "v_origin"],
)


def _cm(model) -> CompiledModel:
    return model.compiled() if isinstance(model, RobotModel) else model


def mass_matrix(model, q: np.ndarray) -> np.ndarray:
    """Joint-space inertia matrix M(q), symmetric positive definite."""
    m = _cm(model)
    ws = dk.alloc_ws(m)
    dk.fk(m, np.asarray(q, dtype=np.float64), ws)
    dk.mass_matrix(m, ws)
    return ws.M.copy()


def nonlinear_effects(model, q: np.ndarray, u: np.ndarray,
                      gravity: np.ndarray = GRAVITY) -> np.ndarray:
    """Bias force h(q, u): Coriolis, centrifugal, and gravity terms."""
    return inverse_dynamics(model, q, u, np.zeros(_cm(model).nu), gravity)


def inverse_dynamics(model, q: np.ndarray, u: np.ndarray, udot: np.ndarray,
                     gravity: np.ndarray = GRAVITY) -> np.ndarray:
    """Generalized force tau satisfying M udot + h = tau."""
    m = _cm(model)
    ws = dk.alloc_ws(m)
    q = np.asarray(q, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    dk.fk(m, q, ws)
    dk.body_velocities(m, u, ws)
    out = np.zeros(m.nu)
    dk.newton_euler(m, u, np.asarray(udot, dtype=np.float64),
                    np.asarray(gravity, dtype=np.float64), ws, out)
    return out


def forward_dynamics(model, q: np.ndarray, u: np.ndarray, tau: np.ndarray,
                     gravity: np.ndarray = GRAVITY) -> np.ndarray:
    """Generalized acceleration udot = M^-1 (tau - h)."""
    m = _cm(model)
    ws = dk.alloc_ws(m)
    dk.forward_dynamics(m, np.asarray(q, dtype=np.float64),
                        np.asarray(u, dtype=np.float64),
                        np.asarray(tau, dtype=np.float64),
                        np.asarray(gravity, dtype=np.float64), ws)
    return ws.acc.copy()


def integrate(model, q: np.ndarray, u: np.ndarray, udot: np.ndarray,
              dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Semi-implicit Euler step: velocity first, then position with the new
    velocity; the base quaternion advances by the exponential map of the
    body-frame angular velocity."""
    m = _cm(model)
    ws = dk.alloc_ws(m)
    u_new = np.asarray(u, dtype=np.float64) + dt * np.asarray(udot, dtype=np.float64)
    q_new = np.empty(m.nq)
    dk.integrate(np.asarray(q, dtype=np.float64), u_new, dt, q_new, ws)
    return q_new, u_new


def frame_kinematics(model, q: np.ndarray, u: np.ndarray | None = None) -> FrameKinematics:
    """World-frame pose and velocity of every body (base is index 0)."""
    m = _cm(model)
    ws = dk.alloc_ws(m)
    dk.fk(m, np.asarray(q, dtype=np.float64), ws)
    if u is None:
        u = np.zeros(m.nu)
    dk.body_velocities(m, np.asarray(u, dtype=np.float64), ws)
    return FrameKinematics(rot=ws.R.copy(), pos=ws.p.copy(), joint_axis=ws.axw.copy(),
                           com=ws.comw.copy(), omega=ws.omg.copy(),
                           v_com=ws.vcom.copy(), v_origin=ws.vorg.copy())


def total_energy(model, q: np.ndarray, u: np.ndarray,
                 gravity: np.ndarray = GRAVITY) -> tuple[float, float, float]:
    """(total, kinetic, potential); potential is zero at the world origin."""
    m = _cm(model)
    ws = dk.alloc_ws(m)
    dk.fk(m, np.asarray(q, dtype=np.float64), ws)
    dk.body_velocities(m, np.asarray(u, dtype=np.float64), ws)
    ke = dk.kinetic_energy(m, ws)
    pe = dk.potential_energy(m, np.asarray(gravity, dtype=np.float64), ws)
    return ke + pe, ke, pe


def momentum(model, q: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Total linear momentum and angular momentum about the base origin, both
    world frame, summed from per-body rigid-body momenta."""
    m = _cm(model)
    kin = frame_kinematics(model, q, u)
    lin = np.zeros(3)
    ang = np.zeros(3)
    base = kin.pos[0]
    for b in range(m.nb):
        iw = kin.rot[b] @ m.inertia[b] @ kin.rot[b].T
        pb = m.mass[b] * kin.v_com[b]
        lin += pb
        ang += np.cross(kin.com[b] - base, pb) + iw @ kin.omega[b]
    return lin, ang


def joint_limit_violation(model, q: np.ndarray) -> bool:
    """True when any joint angle is outside its limit box."""
    return bool(dk.joint_limit_violation(_cm(model), np.asarray(q, dtype=np.float64)))
