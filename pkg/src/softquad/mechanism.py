"""Compiled numeric form of a kinematic tree for the simulation kernel.

A `Mechanism` is the array-level mirror of a `MorphologySpec`: topology
integers plus per-body mass properties and contact sample geometry, in the
layout the stepping kernel consumes. Bodies are numbered base=0 then
limb-major segments; joint j drives body j+1.

Generic serial chains (1..3 links, fixed base) are constructible directly for
oracle tests; they carry no contact geometry.

State is packed per environment into a single float64 vector:
``[pos(3), quat(4, wxyz), linvel(3), angvel_world(3), q(nj), qd(nj), time]``.
Note the packed angular velocity is world-frame (what the integrator wants);
the public `SimState` exposes the body frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from softquad.morphology import MorphologySpec

# packed-state slice offsets
POS = 0
QUAT = 3
LINVEL = 7
ANGVEL = 10
QPOS = 13


def state_size(nj: int) -> int:
    return 14 + 2 * nj


@dataclass
class Mechanism:
    # topology
    nb: int
    nj: int
    base_fixed: bool
    parent: np.ndarray  # (nb,) int64
    axis: np.ndarray  # (nj, 3) in parent frame
    origin: np.ndarray  # (nj, 3) parent frame -> joint pivot
    anc_joints: np.ndarray  # (nb, depth) int64, -1 padded
    anc_count: np.ndarray  # (nb,) int64
    # joints
    locked: np.ndarray  # (nj,) uint8
    qlim: np.ndarray  # (nj, 2)
    taulim: np.ndarray  # (nj,)
    kp: np.ndarray  # (nj,)
    kd: np.ndarray  # (nj,)
    default_pose: np.ndarray  # (nj,)
    joint_names: tuple[str, ...]
    # mass properties (body frame, inertia about CoM)
    mass: np.ndarray  # (nb,)
    com: np.ndarray  # (nb, 3)
    inertia: np.ndarray  # (nb, 3, 3)
    # contact sample geometry
    tip_body: np.ndarray  # (nt,) int64
    tip_local: np.ndarray  # (nt, 3)
    tip_radius: np.ndarray  # (nt,)
    mid_body: np.ndarray  # (nm,) int64
    mid_local: np.ndarray  # (nm, 3)
    mid_radius: np.ndarray  # (nm,)
    corner_local: np.ndarray  # (nc, 3) on the base

    @property
    def ndof(self) -> int:
        return 6 + self.nj

    @property
    def nstate(self) -> int:
        return state_size(self.nj)

    def total_mass(self) -> float:
        return float(self.mass.sum())


def _ancestors(parent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nb = len(parent)
    chains = []
    for b in range(nb):
        chain = []
        node = b
        while parent[node] >= 0:
            chain.append(node - 1)  # joint index of this body
            node = parent[node]
        chains.append(list(reversed(chain)))
    depth = max((len(c) for c in chains), default=0)
    depth = max(depth, 1)
    anc = np.full((nb, depth), -1, dtype=np.int64)
    cnt = np.zeros(nb, dtype=np.int64)
    for b, chain in enumerate(chains):
        cnt[b] = len(chain)
        anc[b, : len(chain)] = chain
    return anc, cnt


def from_morphology(spec: MorphologySpec) -> Mechanism:
    """Flatten a quadruped spec into kernel arrays."""
    joints = spec.joints
    nj = len(joints)
    nb = nj + 1
    parent = np.empty(nb, dtype=np.int64)
    parent[0] = -1
    names = {spec.base.name: 0}
    links = [spec.base]
    for chain in spec.limbs:
        for joint, link in chain:
            names[link.name] = len(links)
            links.append(link)
    for j, joint in enumerate(joints):
        body = j + 1
        assert names[joint.child] == body, "joint order must be limb-major"
        parent[body] = names[joint.parent]

    anc, cnt = _ancestors(parent)
    axis = np.array([j.axis for j in joints], dtype=np.float64)
    origin = np.array([j.origin for j in joints], dtype=np.float64)
    locked = np.array([0 if j.actuated else 1 for j in joints], dtype=np.uint8)
    qlim = np.array([j.angle_limits for j in joints], dtype=np.float64)
    taulim = np.array([j.torque_limit for j in joints], dtype=np.float64)
    kp = np.array([j.nominal_kp for j in joints], dtype=np.float64)
    kd = np.array([j.nominal_kd for j in joints], dtype=np.float64)

    mass = np.array([l.mass for l in links], dtype=np.float64)
    com = np.array([l.com_offset for l in links], dtype=np.float64)
    inertia = np.array([l.inertia for l in links], dtype=np.float64)

    # tips: one per limb at the end of the distal segment
    tip_body = []
    tip_local = []
    for li, chain in enumerate(spec.limbs):
        distal = chain[2][1]
        tip_body.append(names[distal.name])
        tip_local.append((0.0, 0.0, -distal.length))
    # midpoint contact sample per non-distal segment
    mid_body = []
    mid_local = []
    mid_radius = []
    for chain in spec.limbs:
        for (joint, link), (next_joint, _) in zip(chain[:2], chain[1:]):
            mid_body.append(names[link.name])
            mid_local.append(tuple(o / 2.0 for o in next_joint.origin))
            mid_radius.append(float(link.radius_or_halfextents))

    hx, hy, hz = spec.base.radius_or_halfextents
    corners = np.array(
        [(sx * hx, sy * hy, sz * hz) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
        dtype=np.float64,
    )

    return Mechanism(
        nb=nb,
        nj=nj,
        base_fixed=False,
        parent=parent,
        axis=axis,
        origin=origin,
        anc_joints=anc,
        anc_count=cnt,
        locked=locked,
        qlim=qlim,
        taulim=taulim,
        kp=kp,
        kd=kd,
        default_pose=np.array(spec.default_pose, dtype=np.float64),
        joint_names=tuple(j.name for j in joints),
        mass=mass,
        com=com,
        inertia=inertia,
        tip_body=np.array(tip_body, dtype=np.int64),
        tip_local=np.array(tip_local, dtype=np.float64),
        tip_radius=np.full(len(tip_body), spec.tip_radius, dtype=np.float64),
        mid_body=np.array(mid_body, dtype=np.int64),
        mid_local=np.array(mid_local, dtype=np.float64),
        mid_radius=np.array(mid_radius, dtype=np.float64),
        corner_local=corners,
    )


def serial_chain(
    axes: np.ndarray,
    origins: np.ndarray,
    coms: np.ndarray,
    masses: np.ndarray,
    inertias: np.ndarray,
    base_fixed: bool = True,
    qlim: np.ndarray | None = None,
    taulim: float = 1e6,
    kp: float = 0.0,
    kd: float = 0.0,
) -> Mechanism:
    """Bare serial chain hanging from the base, no contact geometry.

    Used by the dynamics oracle tests; every joint is actuated.
    """
    nj = len(axes)
    nb = nj + 1
    parent = np.arange(-1, nj, dtype=np.int64)
    anc, cnt = _ancestors(parent)
    if qlim is None:
        qlim = np.tile(np.array([-1e9, 1e9]), (nj, 1))
    mass = np.concatenate([[1.0], np.asarray(masses, dtype=np.float64)])
    com = np.vstack([np.zeros(3), np.asarray(coms, dtype=np.float64)])
    inertia = np.vstack([np.eye(3)[None], np.asarray(inertias, dtype=np.float64)])
    empty_i = np.zeros(0, dtype=np.int64)
    empty_v = np.zeros((0, 3), dtype=np.float64)
    return Mechanism(
        nb=nb,
        nj=nj,
        base_fixed=base_fixed,
        parent=parent,
        axis=np.asarray(axes, dtype=np.float64),
        origin=np.asarray(origins, dtype=np.float64),
        anc_joints=anc,
        anc_count=cnt,
        locked=np.zeros(nj, dtype=np.uint8),
        qlim=np.asarray(qlim, dtype=np.float64),
        taulim=np.full(nj, taulim, dtype=np.float64),
        kp=np.full(nj, kp, dtype=np.float64),
        kd=np.full(nj, kd, dtype=np.float64),
        default_pose=np.zeros(nj),
        joint_names=tuple(f"j{i}" for i in range(nj)),
        mass=mass,
        com=com,
        inertia=inertia,
        tip_body=empty_i,
        tip_local=empty_v,
        tip_radius=np.zeros(0),
        mid_body=empty_i,
        mid_local=empty_v,
        mid_radius=np.zeros(0),
        corner_local=empty_v,
    )


def free_body(mass: float, inertia: np.ndarray, com: np.ndarray | None = None) -> Mechanism:
    """A single floating rigid body (no joints, no contacts)."""
    empty_i = np.zeros(0, dtype=np.int64)
    empty_v = np.zeros((0, 3), dtype=np.float64)
    anc, cnt = _ancestors(np.array([-1], dtype=np.int64))
    return Mechanism(
        nb=1,
        nj=0,
        base_fixed=False,
        parent=np.array([-1], dtype=np.int64),
        axis=empty_v,
        origin=empty_v,
        anc_joints=anc,
        anc_count=cnt,
        locked=np.zeros(0, dtype=np.uint8),
        qlim=np.zeros((0, 2)),
        taulim=np.zeros(0),
        kp=np.zeros(0),
        kd=np.zeros(0),
        default_pose=np.zeros(0),
        joint_names=(),
        mass=np.array([float(mass)]),
        com=np.array([np.zeros(3) if com is None else com], dtype=np.float64).reshape(1, 3),
        inertia=np.asarray(inertia, dtype=np.float64).reshape(1, 3, 3),
        tip_body=empty_i,
        tip_local=empty_v,
        tip_radius=np.zeros(0),
        mid_body=empty_i,
        mid_local=empty_v,
        mid_radius=np.zeros(0),
        corner_local=empty_v,
    )


def apply_base_mass_delta(mech: Mechanism, delta: float) -> None:
    """Add payload mass to the base in place, scaling its inertia with mass.

    The randomized payload is modeled as distributed like the base itself, so
    the inertia tensor scales by the mass ratio.
    """
    m0 = mech.mass[0]
    m1 = m0 + delta
    if m1 <= 0.0:
        raise ValueError(f"base mass would become {m1} kg")
    mech.mass[0] = m1
    mech.inertia[0] *= m1 / m0
