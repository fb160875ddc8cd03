"""Robot model description, validation, and compilation to flat arrays.

A model file is YAML with a version tag (``format: legsim/model-v1``). The
tree is a floating base plus a list of revolute joints, each carrying its
child link inline; parents must be declared before children. Collision
geometry is spheres, capsules, and boxes attached to links. The simulation
kernels consume a :class:`CompiledModel` of contiguous arrays.
"""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

FORMAT_TAG = "legsim/model-v1"

COL_SPHERE = 0
COL_CAPSULE = 1
COL_BOX = 2

_COL_TYPES = {"sphere": COL_SPHERE, "capsule": COL_CAPSULE, "box": COL_BOX}
_COL_NAMES = {v: k for k, v in _COL_TYPES.items()}


class ModelError(ValueError):
    """Raised when a model file fails validation."""


@dataclass
class Link:
    name: str
    mass: float
    com: np.ndarray
    inertia: np.ndarray  # 3x3 about the com, link frame


@dataclass
class Joint:
    name: str
    parent: str
    axis: np.ndarray
    origin: np.ndarray  # joint position in the parent link frame
    limits: tuple[float, float]
    link: Link


@dataclass
class CollisionBody:
    name: str
    link: str
    kind: int
    pos: np.ndarray
    axis: np.ndarray  # capsule direction, unit
    size: np.ndarray  # sphere: (r,-,-); capsule: (r, half_len,-); box: half extents


@dataclass
class RobotModel:
    name: str
    base: Link
    joints: list[Joint]
    collision: list[CollisionBody]
    feet: list[str]
    torque_limit: float
    velocity_limit: float
    nominal_joint_position: np.ndarray
    nominal_base_height: float
    kp: float
    kd: float
    _compiled: "CompiledModel | None" = field(default=None, repr=False, compare=False)

    @property
    def nj(self) -> int:
        return len(self.joints)

    @property
    def nq(self) -> int:
        return 7 + self.nj

    @property
    def nu(self) -> int:
        return 6 + self.nj

    def joint_limits(self) -> np.ndarray:
        return np.array([j.limits for j in self.joints], dtype=np.float64)

    def compiled(self) -> "CompiledModel":
        if self._compiled is None:
            self._compiled = compile_model(self)
        return self._compiled

    def nominal_state(self) -> tuple[np.ndarray, np.ndarray]:
        """State with the base at nominal height, identity orientation, at rest."""
        q = np.zeros(self.nq)
        q[2] = self.nominal_base_height
        q[3] = 1.0
        q[7:] = self.nominal_joint_position
        return q, np.zeros(self.nu)


CompiledModel = namedtuple(
    "CompiledModel",
    [
        "nb", "nj", "nq", "nu",
        "parent",       # (nb,) int32, -1 for the base
        "jaxis",        # (nb,3) joint axis in the child frame; row 0 unused
        "jorigin",      # (nb,3) joint position in the parent frame; row 0 unused
        "mass",         # (nb,)
        "com",          # (nb,3)
        "inertia",      # (nb,3,3)
        "chain",        # (nb,maxdepth) int32 joint-bearing ancestors, root first, -1 pad
        "depth",        # (nb,) int32
        "limit_lo", "limit_hi",      # (nj,)
        "tau_max", "vel_max",        # (nj,)
        "ncol",
        "col_body", "col_kind",      # (ncol,) int32
        "col_pos", "col_axis", "col_size",  # (ncol,3)
        "col_rbound",   # (ncol,) bounding-sphere radius for pair pruning
        "foot_cols",    # (nfeet,) int32 indices into collision arrays
        "pairs",        # (npair,2) int32 self-collision candidate pairs
        "max_contacts",
        "nominal_q",    # (nq,)
        "kp", "kd",
        # blocked-inertia factorization metadata: dofs of different base-rooted
        # subtrees never share a supported body, so a subtrees-first, base-last
        # ordering makes the joint-space inertia block-diagonal with a dense
        # base border and its Cholesky factor keeps the cross-subtree zeros
        "dof_perm",     # (nu,) int32 permuted -> original dof index
        "dof_first",    # (nu,) int32 first possibly-nonzero column per row
        "dof_bend",     # (nu,) int32 end of each row's diagonal block
        "ntail",        # first permuted index of the dense base border
        "body_span",    # (nb,2) int32 permuted dof range of each body's subtree
    ],
)


def _as_vec3(x, what: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise ModelError(f"{what} must be a 3-vector, got shape {v.shape}")
    return v


def _parse_inertia(d: dict, what: str) -> np.ndarray:
    if "inertia_diag" in d:
        diag = np.asarray(d["inertia_diag"], dtype=np.float64)
        if diag.shape != (3,):
            raise ModelError(f"{what}: inertia_diag must have 3 entries")
        inertia = np.diag(diag)
    elif "inertia" in d:
        inertia = np.asarray(d["inertia"], dtype=np.float64)
        if inertia.shape != (3, 3):
            raise ModelError(f"{what}: inertia must be 3x3")
    else:
        raise ModelError(f"{what}: missing inertia or inertia_diag")
    if not np.allclose(inertia, inertia.T, atol=1e-12):
        raise ModelError(f"{what}: inertia must be symmetric")
    if np.linalg.eigvalsh(inertia).min() <= 0.0:
        raise ModelError(f"{what}: inertia must be positive definite")
    return inertia


def _parse_link(d: dict) -> Link:
    name = d.get("name")
    if not name:
        raise ModelError("link missing name")
    mass = float(d.get("mass", 0.0))
    if mass <= 0.0:
        raise ModelError(f"link {name}: mass must be positive")
    return Link(name, mass, _as_vec3(d.get("com", [0, 0, 0]), f"link {name} com"),
                _parse_inertia(d, f"link {name}"))


def model_from_dict(data: dict) -> RobotModel:
    """Build and validate a RobotModel from a parsed YAML document."""
    if data.get("format") != FORMAT_TAG:
        raise ModelError(f"unsupported model format {data.get('format')!r}, "
                         f"expected {FORMAT_TAG!r}")
    base = _parse_link({"name": "base", **data["base"]})

    link_names = {base.name}
    joints: list[Joint] = []
    for jd in data.get("joints", []):
        jname = jd.get("name")
        if not jname:
            raise ModelError("joint missing name")
        parent = jd.get("parent")
        if parent not in link_names:
            raise ModelError(f"joint {jname}: parent {parent!r} not declared before use")
        axis = _as_vec3(jd["axis"], f"joint {jname} axis")
        norm = np.linalg.norm(axis)
        if norm < 1e-9:
            raise ModelError(f"joint {jname}: axis must be nonzero")
        axis = axis / norm
        lo, hi = (float(x) for x in jd.get("limits", (-math.pi, math.pi)))
        if not lo < hi:
            raise ModelError(f"joint {jname}: limits must satisfy lo < hi")
        link = _parse_link(jd["link"])
        if link.name in link_names:
            raise ModelError(f"duplicate link name {link.name!r}")
        link_names.add(link.name)
        joints.append(Joint(jname, parent, axis, _as_vec3(jd["origin"], f"joint {jname} origin"),
                            (lo, hi), link))

    if len({j.name for j in joints}) != len(joints):
        raise ModelError("duplicate joint names")

    collision: list[CollisionBody] = []
    for cd in data.get("collision", []):
        cname = cd.get("name")
        if not cname:
            raise ModelError("collision body missing name")
        clink = cd.get("link")
        if clink not in link_names:
            raise ModelError(f"collision body {cname}: unknown link {clink!r}")
        kind_name = cd.get("type")
        if kind_name not in _COL_TYPES:
            raise ModelError(f"collision body {cname}: unknown type {kind_name!r}")
        kind = _COL_TYPES[kind_name]
        pos = _as_vec3(cd.get("pos", [0, 0, 0]), f"collision {cname} pos")
        axis = np.array([0.0, 0.0, 1.0])
        size = np.zeros(3)
        if kind == COL_SPHERE:
            size[0] = float(cd["radius"])
        elif kind == COL_CAPSULE:
            p0 = _as_vec3(cd["p0"], f"collision {cname} p0")
            p1 = _as_vec3(cd["p1"], f"collision {cname} p1")
            seg = p1 - p0
            half = 0.5 * float(np.linalg.norm(seg))
            if half < 1e-9:
                raise ModelError(f"collision {cname}: capsule endpoints coincide")
            axis = seg / (2.0 * half)
            pos = 0.5 * (p0 + p1)
            size[0] = float(cd["radius"])
            size[1] = half
        else:
            size = _as_vec3(cd["half_extents"], f"collision {cname} half_extents")
            if np.any(size <= 0.0):
                raise ModelError(f"collision {cname}: half extents must be positive")
        if kind in (COL_SPHERE, COL_CAPSULE) and size[0] <= 0.0:
            raise ModelError(f"collision {cname}: radius must be positive")
        collision.append(CollisionBody(cname, clink, kind, pos, axis, size))

    if len({c.name for c in collision}) != len(collision):
        raise ModelError("duplicate collision body names")

    feet = list(data.get("feet", []))
    col_names = {c.name for c in collision}
    for f in feet:
        if f not in col_names:
            raise ModelError(f"foot {f!r} is not a collision body")
    if feet:
        if len(feet) != 4:
            raise ModelError("a legged model must declare exactly 4 feet")
        if len(joints) != 12:
            raise ModelError("a legged model must have exactly 12 revolute joints")

    nominal = np.asarray(data.get("nominal_joint_position", np.zeros(len(joints))),
                         dtype=np.float64)
    if nominal.shape != (len(joints),):
        raise ModelError("nominal_joint_position length must match joint count")
    limits = np.array([j.limits for j in joints]) if joints else np.zeros((0, 2))
    if joints and (np.any(nominal < limits[:, 0]) or np.any(nominal > limits[:, 1])):
        raise ModelError("nominal_joint_position violates joint limits")

    torque_limit = float(data.get("torque_limit", 40.0))
    velocity_limit = float(data.get("velocity_limit", 12.0))
    if torque_limit <= 0 or velocity_limit <= 0:
        raise ModelError("torque and velocity limits must be positive")

    gains = data.get("pd_gains", {})
    return RobotModel(
        name=str(data.get("name", "unnamed")),
        base=base,
        joints=joints,
        collision=collision,
        feet=feet,
        torque_limit=torque_limit,
        velocity_limit=velocity_limit,
        nominal_joint_position=nominal,
        nominal_base_height=float(data.get("nominal_base_height", 0.0)),
        kp=float(gains.get("kp", 50.0)),
        kd=float(gains.get("kd", 0.1)),
    )


def load_model(path: str | Path) -> RobotModel:
    """Load and validate a model YAML file."""
    with open(path) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ModelError(f"{path}: not a mapping")
    return model_from_dict(data)


def default_model() -> RobotModel:
    """The packaged 32 kg quadruped."""
    ref = resources.files("legsim").joinpath("models/quad32.yaml")
    with resources.as_file(ref) as p:
        return load_model(p)


def compile_model(model: RobotModel) -> CompiledModel:
    """Flatten a validated model into the array form used by the kernels."""
    nj = model.nj
    nb = 1 + nj
    links = [model.base] + [j.link for j in model.joints]
    body_index = {lk.name: i for i, lk in enumerate(links)}

    parent = np.full(nb, -1, dtype=np.int32)
    jaxis = np.zeros((nb, 3))
    jorigin = np.zeros((nb, 3))
    for b, j in enumerate(model.joints, start=1):
        parent[b] = body_index[j.parent]
        jaxis[b] = j.axis
        jorigin[b] = j.origin

    mass = np.array([lk.mass for lk in links])
    com = np.array([lk.com for lk in links])
    inertia = np.array([lk.inertia for lk in links])

    depth = np.zeros(nb, dtype=np.int32)
    for b in range(1, nb):
        depth[b] = depth[parent[b]] + 1
    maxdepth = int(depth.max()) if nb > 1 else 1
    chain = np.full((nb, max(maxdepth, 1)), -1, dtype=np.int32)
    for b in range(1, nb):
        row, a = [], b
        while a > 0:
            row.append(a)
            a = parent[a]
        for k, body in enumerate(reversed(row)):
            chain[b, k] = body

    limits = model.joint_limits() if nj else np.zeros((0, 2))
    limit_lo = np.ascontiguousarray(limits[:, 0]) if nj else np.zeros(0)
    limit_hi = np.ascontiguousarray(limits[:, 1]) if nj else np.zeros(0)
    tau_max = np.full(nj, model.torque_limit)
    vel_max = np.full(nj, model.velocity_limit)

    ncol = len(model.collision)
    col_body = np.zeros(ncol, dtype=np.int32)
    col_kind = np.zeros(ncol, dtype=np.int32)
    col_pos = np.zeros((ncol, 3))
    col_axis = np.zeros((ncol, 3))
    col_size = np.zeros((ncol, 3))
    col_rbound = np.zeros(ncol)
    for i, c in enumerate(model.collision):
        col_body[i] = body_index[c.link]
        col_kind[i] = c.kind
        col_pos[i] = c.pos
        col_axis[i] = c.axis
        col_size[i] = c.size
        if c.kind == COL_SPHERE:
            col_rbound[i] = c.size[0]
        elif c.kind == COL_CAPSULE:
            col_rbound[i] = c.size[0] + c.size[1]
        else:
            col_rbound[i] = float(np.linalg.norm(c.size))

    col_names = [c.name for c in model.collision]
    foot_cols = np.array([col_names.index(f) for f in model.feet], dtype=np.int32)

    pairs = _self_collision_pairs(model, parent, col_body, foot_cols)

    ground_candidates = {COL_SPHERE: 1, COL_CAPSULE: 2, COL_BOX: 8}
    max_contacts = int(sum(ground_candidates[int(k)] for k in col_kind) + len(pairs))

    q0 = np.zeros(7 + nj)
    q0[2] = model.nominal_base_height
    q0[3] = 1.0
    q0[7:] = model.nominal_joint_position

    nu = 6 + nj
    # body b's joint drives u[5 + b]; group those dofs by base-rooted subtree
    roots = [b for b in range(1, nb) if parent[b] == 0]
    groups = [[5 + b for b in range(1, nb) if chain[b, 0] == r] for r in roots]
    blocked = nj > 0 and all(
        g == list(range(g[0], g[0] + len(g))) for g in groups)
    dof_perm = np.arange(nu, dtype=np.int32)
    dof_first = np.zeros(nu, dtype=np.int32)
    dof_bend = np.full(nu, nu, dtype=np.int32)
    body_span = np.zeros((nb, 2), dtype=np.int32)
    ntail = 0
    if blocked:
        order: list[int] = []
        for r, g in zip(roots, groups):
            lo, hi = len(order), len(order) + len(g)
            order.extend(g)
            dof_first[lo:hi] = lo
            dof_bend[lo:hi] = hi
            for b in range(1, nb):
                if chain[b, 0] == r:
                    body_span[b, 0], body_span[b, 1] = lo, hi
        ntail = len(order)
        order.extend(range(6))
        dof_perm = np.array(order, dtype=np.int32)
        dof_first[ntail:] = 0
        dof_bend[ntail:] = nu

    return CompiledModel(
        nb=nb, nj=nj, nq=7 + nj, nu=6 + nj,
        parent=parent, jaxis=jaxis, jorigin=jorigin,
        mass=mass, com=com, inertia=inertia,
        chain=chain, depth=depth,
        limit_lo=limit_lo, limit_hi=limit_hi, tau_max=tau_max, vel_max=vel_max,
        ncol=ncol, col_body=col_body, col_kind=col_kind,
        col_pos=col_pos, col_axis=col_axis, col_size=col_size, col_rbound=col_rbound,
        foot_cols=foot_cols, pairs=pairs, max_contacts=max_contacts,
        nominal_q=q0, kp=model.kp, kd=model.kd,
        dof_perm=dof_perm, dof_first=dof_first, dof_bend=dof_bend,
        ntail=ntail, body_span=body_span,
    )


def _self_collision_pairs(model: RobotModel, parent, col_body, foot_cols) -> np.ndarray:
    """Candidate robot-robot pairs: all non-adjacent link pairs whose links are
    not on the same chain branch, skipping parent/child and grandparent pairs
    (those are permanently near-touching by construction)."""
    ncol = len(model.collision)
    out = []
    for i in range(ncol):
        for j in range(i + 1, ncol):
            a, b = int(col_body[i]), int(col_body[j])
            if a == b:
                continue
            # walk each body's ancestry; skip pairs within 2 tree hops
            if _tree_distance(parent, a, b) <= 2:
                continue
            out.append((i, j))
    return np.array(out, dtype=np.int32).reshape(-1, 2)


def _tree_distance(parent, a: int, b: int) -> int:
    anc_a = {}
    d, x = 0, a
    while x != -1:
        anc_a[x] = d
        x = parent[x]
        d += 1
    d, x = 0, b
    while x != -1:
        if x in anc_a:
            return d + anc_a[x]
        x = parent[x]
        d += 1
    return 10 ** 9


def randomize_model(model: RobotModel, rng: np.random.Generator) -> RobotModel:
    """Perturb inertial and kinematic parameters for model randomization.

    Link centers of mass move by U(-2, 2) cm per axis, link masses scale by
    U(-15, 15)% (inertia scales with mass), joint positions move by
    U(-2, 2) cm per axis. The input model is untouched.
    """
    def bump_link(lk: Link) -> Link:
        scale = 1.0 + rng.uniform(-0.15, 0.15)
        return Link(lk.name, lk.mass * scale, lk.com + rng.uniform(-0.02, 0.02, 3),
                    lk.inertia * scale)

    base = bump_link(model.base)
    joints = [
        replace(j, origin=j.origin + rng.uniform(-0.02, 0.02, 3), link=bump_link(j.link))
        for j in model.joints
    ]
    return replace(model, base=base, joints=joints, _compiled=None)


def randomize_collision(model: RobotModel, rng: np.random.Generator) -> RobotModel:
    """Perturb collision geometry (recovery training): positions by
    U(-1, 1) cm per axis, sizes by a U(0.9, 1.1) factor."""
    collision = [
        CollisionBody(c.name, c.link, c.kind, c.pos + rng.uniform(-0.01, 0.01, 3),
                      c.axis.copy(), c.size * rng.uniform(0.9, 1.1))
        for c in model.collision
    ]
    return replace(model, collision=collision, _compiled=None)


def save_model(model: RobotModel, path: str | Path) -> None:
    """Write a model back out as versioned YAML."""
    def link_dict(lk: Link) -> dict:
        return {"name": lk.name, "mass": float(lk.mass),
                "com": [float(x) for x in lk.com],
                "inertia": [[float(x) for x in row] for row in lk.inertia]}

    cols = []
    for c in model.collision:
        d: dict = {"name": c.name, "link": c.link, "type": _COL_NAMES[c.kind]}
        if c.kind == COL_SPHERE:
            d.update(pos=[float(x) for x in c.pos], radius=float(c.size[0]))
        elif c.kind == COL_CAPSULE:
            p0 = c.pos - c.axis * c.size[1]
            p1 = c.pos + c.axis * c.size[1]
            d.update(p0=[float(x) for x in p0], p1=[float(x) for x in p1],
                     radius=float(c.size[0]))
        else:
            d.update(pos=[float(x) for x in c.pos],
                     half_extents=[float(x) for x in c.size])
        cols.append(d)

    doc = {
        "format": FORMAT_TAG,
        "name": model.name,
        "base": {k: v for k, v in link_dict(model.base).items() if k != "name"},
        "joints": [
            {"name": j.name, "parent": j.parent, "axis": [float(x) for x in j.axis],
             "origin": [float(x) for x in j.origin],
             "limits": [float(j.limits[0]), float(j.limits[1])],
             "link": link_dict(j.link)}
            for j in model.joints
        ],
        "collision": cols,
        "feet": list(model.feet),
        "torque_limit": float(model.torque_limit),
        "velocity_limit": float(model.velocity_limit),
        "nominal_joint_position": [float(x) for x in model.nominal_joint_position],
        "nominal_base_height": float(model.nominal_base_height),
        "pd_gains": {"kp": float(model.kp), "kd": float(model.kd)},
    }
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)
