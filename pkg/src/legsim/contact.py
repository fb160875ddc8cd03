"""Hard-contact simulation: detection types, impulse solve, hybrid stepping.

The solver enforces non-penetration by impulse: a contact's post-step normal
velocity may not fall below its target (0 for touching contacts, an
error-reduction pushout for penetrated ones, and -gap/dt for separated
activated ones, which permits approach up to exact touchdown). Friction uses
the exact Coulomb cone: a sticking solve first, then sliding impulses found by
bisection on the cone direction angle so the tangential velocity exactly
opposes the tangential impulse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _contact as ck
from . import _dynamics as dk
from .model import CompiledModel, RobotModel

FOOT = "foot"
INTERNAL = "internal"
OTHER = "other"


@dataclass
class SimConfig:
    dt: float = 0.0025
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    friction: float = 0.8
    erp: float = 0.2
    margin: float = 1e-3
    solver_tol: float = 1e-9
    max_sweeps: int = 50


@dataclass
class ContactPoint:
    pos: np.ndarray            # world
    normal: np.ndarray         # world, points from body b (or ground) into body a
    gap: float
    body_a: int
    body_b: int                # -1 for the ground
    collision_a: int
    collision_b: int
    kind: str                  # foot / internal / other
    foot_index: int            # 0..3 for foot contacts, else -1
    impulse_local: np.ndarray  # (t1, t2, n) components
    impulse: np.ndarray        # world
    v_post: np.ndarray         # post-impulse relative velocity, (t1, t2, n)


@dataclass
class ContactSet:
    points: list[ContactPoint] = field(default_factory=list)
    candidates: int = 0
    sweeps: int = 0
    residual: float = 0.0
    cone_fallbacks: int = 0

    def __iter__(self):
        return iter(self.points)

    def __len__(self):
        return len(self.points)


def _classify(cm: CompiledModel, cola: int, colb: int) -> tuple[str, int]:
    if colb >= 0:
        return INTERNAL, -1
    for fi in range(len(cm.foot_cols)):
        if cm.foot_cols[fi] == cola:
            return FOOT, fi
    return OTHER, -1


def detect_contacts(model, q: np.ndarray, margin: float | None = None) -> ContactSet:
    """Geometric candidate detection at a state (no dynamics); contacts whose
    gap exceeds the margin are dropped. Pass margin=None for every emitted
    candidate (detection itself only emits candidates within its consider
    band, except feet, which are always reported)."""
    cm = model.compiled() if isinstance(model, RobotModel) else model
    ws = dk.alloc_ws(cm)
    cw = ck.alloc_cws(cm)
    dk.fk(cm, np.asarray(q, dtype=np.float64), ws)
    ncand = ck._detect(cm, ws, cw)
    out = ContactSet(candidates=ncand)
    zero3 = np.zeros(3)
    for ci in range(ncand):
        gap = float(cw.cnd_gap[ci])
        if margin is not None and gap > margin:
            continue
        kind, fi = _classify(cm, int(cw.cnd_cola[ci]), int(cw.cnd_colb[ci]))
        out.points.append(ContactPoint(
            pos=cw.cnd_pos[ci].copy(), normal=cw.cnd_n[ci].copy(), gap=gap,
            body_a=int(cw.cnd_ba[ci]), body_b=int(cw.cnd_bb[ci]),
            collision_a=int(cw.cnd_cola[ci]), collision_b=int(cw.cnd_colb[ci]),
            kind=kind, foot_index=fi,
            impulse_local=zero3.copy(), impulse=zero3.copy(), v_post=zero3.copy()))
    return out


class Simulation:
    """Single-robot hybrid stepper owning its workspaces.

    Torques enter as generalized force (nu,), or per-joint via
    :meth:`step_joint_torque`, which also applies the model torque limit.
    """

    def __init__(self, model, config: SimConfig | None = None):
        self.model = model if isinstance(model, RobotModel) else None
        self.cm = model.compiled() if isinstance(model, RobotModel) else model
        self.config = config or SimConfig()
        self.ws = dk.alloc_ws(self.cm)
        self.cw = ck.alloc_cws(self.cm)
        self.q = self.cm.nominal_q.copy()
        self.u = np.zeros(self.cm.nu)
        self._q_next = np.empty(self.cm.nq)
        self._u_next = np.empty(self.cm.nu)
        self._gravity = np.asarray(self.config.gravity, dtype=np.float64)
        self._tau = np.zeros(self.cm.nu)
        self.friction = self.config.friction
        self.last_nact = 0
        self.time = 0.0

    def set_state(self, q: np.ndarray, u: np.ndarray) -> None:
        self.q[:] = q
        self.u[:] = u

    def step(self, tau: np.ndarray | None = None) -> int:
        """Advance one dt with generalized force tau; returns active contacts."""
        cfg = self.config
        if tau is None:
            self._tau[:] = 0.0
        else:
            self._tau[:] = tau
        nact = ck.hybrid_step(
            self.cm, self.q, self.u, self._tau, self._gravity, self.friction,
            cfg.dt, cfg.erp, cfg.margin, cfg.solver_tol, cfg.max_sweeps,
            self.ws, self.cw, self._q_next, self._u_next)
        self.q[:] = self._q_next
        self.u[:] = self._u_next
        self.last_nact = nact
        self.time += cfg.dt
        return nact

    def step_joint_torque(self, tau_j: np.ndarray,
                          base_wrench: np.ndarray | None = None) -> int:
        """Step with per-joint torques (clipped to the model limit) and an
        optional base wrench [force (world), moment (body)]."""
        self._tau[:6] = 0.0 if base_wrench is None else base_wrench
        np.clip(tau_j, -self.cm.tau_max, self.cm.tau_max, out=self._tau[6:])
        return self.step(self._tau.copy())

    def contacts(self) -> ContactSet:
        """Active contacts of the last step with solved impulses."""
        cm, cw = self.cm, self.cw
        out = ContactSet(candidates=int(cw.stats[3]), sweeps=int(cw.stats[0]),
                         cone_fallbacks=int(cw.stats[1]))
        nact = self.last_nact
        out.residual = float(ck.kkt_residual(cw, nact, self.friction)) if nact else 0.0
        for a in range(nact):
            ci = int(cw.act[a])
            lam = cw.lam[3 * a:3 * a + 3].copy()
            world = (lam[0] * cw.cnd_t1[ci] + lam[1] * cw.cnd_t2[ci]
                     + lam[2] * cw.cnd_n[ci])
            kind, fi = _classify(cm, int(cw.cnd_cola[ci]), int(cw.cnd_colb[ci]))
            out.points.append(ContactPoint(
                pos=cw.cnd_pos[ci].copy(), normal=cw.cnd_n[ci].copy(),
                gap=float(cw.cnd_gap[ci]),
                body_a=int(cw.cnd_ba[ci]), body_b=int(cw.cnd_bb[ci]),
                collision_a=int(cw.cnd_cola[ci]), collision_b=int(cw.cnd_colb[ci]),
                kind=kind, foot_index=fi,
                impulse_local=lam, impulse=world,
                v_post=cw.vcur[3 * a:3 * a + 3].copy()))
        return out

    def foot_states(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(contact flags, gaps, world velocities) of the feet at the end of
        the last step; velocities use the post-impulse generalized velocity."""
        cm, cw = self.cm, self.cw
        nf = len(cm.foot_cols)
        flags = np.zeros(nf, dtype=bool)
        gaps = np.zeros(nf)
        vels = np.zeros((nf, 3))
        active = {int(cw.act[a]): a for a in range(self.last_nact)}
        ncand = int(cw.stats[3])
        for ci in range(ncand):
            if cw.cnd_colb[ci] != -1:
                continue
            fi = -1
            for f in range(nf):
                if cm.foot_cols[f] == cw.cnd_cola[ci]:
                    fi = f
            if fi < 0:
                continue
            gaps[fi] = cw.cnd_gap[ci]
            if ci in active and cw.lam[3 * active[ci] + 2] > 0.0:
                flags[fi] = True
            if cw.cnd_hasj[ci]:
                loc = cw.J[3 * ci:3 * ci + 3] @ self.u
                vels[fi] = (loc[0] * cw.cnd_t1[ci] + loc[1] * cw.cnd_t2[ci]
                            + loc[2] * cw.cnd_n[ci])
        return flags, gaps, vels
