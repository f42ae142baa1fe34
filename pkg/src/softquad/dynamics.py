"""Single-robot dynamics API on top of the batched kernel.

Everything here routes through the same compiled kernel as the vectorized
environment (batch of one), so single-robot trajectories are bitwise equal
to the corresponding row of a batched rollout. Pure-python helpers
(contact detection, contact force law, mechanical energy) intentionally
re-derive their quantities with the rotation utilities instead of the
kernel, which gives the tests an in-package cross-check of the kernel's
kinematics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rotation as rot
from . import simkernel
from .config import PhysicsConfig
from .mechanism import ANGVEL, LINVEL, POS, QPOS, QUAT, Mechanism, state_size

_NO_EXT_BODY = np.empty(0, dtype=np.int64)
_NO_EXT_VEC = np.empty((0, 3), dtype=np.float64)


class SimFault(RuntimeError):
    """Raised when integration produced a non-finite state.

    Carries the last finite state so callers can inspect or reset from it.
    """

    def __init__(self, message: str, state: "SimState"):
        super().__init__(message)
        self.state = state


@dataclass
class SimState:
    """Snapshot of one robot. Angular velocity is in the base frame."""

    base_position: np.ndarray
    base_orientation: np.ndarray  # wxyz unit quaternion
    base_linvel: np.ndarray  # world frame
    base_angvel: np.ndarray  # base frame
    joint_pos: np.ndarray
    joint_vel: np.ndarray
    time: float = 0.0

    def copy(self) -> "SimState":
        return SimState(
            self.base_position.copy(),
            self.base_orientation.copy(),
            self.base_linvel.copy(),
            self.base_angvel.copy(),
            self.joint_pos.copy(),
            self.joint_vel.copy(),
            self.time,
        )

    def projected_gravity(self) -> np.ndarray:
        return rot.projected_gravity(self.base_orientation)


@dataclass(frozen=True)
class ContactPoint:
    body: int
    link: str
    point: np.ndarray  # world, deepest point of the collider
    penetration: float
    normal: np.ndarray  # always +z for the flat ground
    rel_velocity: np.ndarray  # world velocity of the contact point
    is_tip: bool


def pack_state(mech: Mechanism, state: SimState, out: np.ndarray | None = None) -> np.ndarray:
    """SimState -> packed kernel row (world-frame angular velocity)."""
    nj = mech.nj
    row = out if out is not None else np.zeros(state_size(nj))
    row[POS:POS + 3] = state.base_position
    row[QUAT:QUAT + 4] = state.base_orientation
    row[LINVEL:LINVEL + 3] = state.base_linvel
    row[ANGVEL:ANGVEL + 3] = rot.quat_rotate(state.base_orientation, state.base_angvel)
    row[QPOS:QPOS + nj] = state.joint_pos
    row[QPOS + nj:QPOS + 2 * nj] = state.joint_vel
    row[QPOS + 2 * nj] = state.time
    return row


def unpack_state(mech: Mechanism, row: np.ndarray) -> SimState:
    nj = mech.nj
    quat = row[QUAT:QUAT + 4].copy()
    return SimState(
        base_position=row[POS:POS + 3].copy(),
        base_orientation=quat,
        base_linvel=row[LINVEL:LINVEL + 3].copy(),
        base_angvel=rot.quat_rotate_inverse(quat, row[ANGVEL:ANGVEL + 3]),
        joint_pos=row[QPOS:QPOS + nj].copy(),
        joint_vel=row[QPOS + nj:QPOS + 2 * nj].copy(),
        time=float(row[QPOS + 2 * nj]),
    )


def init_state(
    mech: Mechanism,
    base_position: Sequence[float] = (0.0, 0.0, 0.0),
    base_orientation: Sequence[float] = (1.0, 0.0, 0.0, 0.0),
    joint_pos: Sequence[float] | None = None,
) -> SimState:
    """Build a zero-velocity state, validating limits and the quaternion."""
    pos = np.asarray(base_position, dtype=np.float64)
    quat = np.asarray(base_orientation, dtype=np.float64)
    if pos.shape != (3,):
        raise ValueError(f"base position must have 3 entries, got shape {pos.shape}")
    if quat.shape != (4,):
        raise ValueError(f"orientation must be a wxyz quaternion, got shape {quat.shape}")
    norm = float(np.linalg.norm(quat))
    if norm < 1e-8:
        raise ValueError("orientation quaternion has near-zero norm")
    quat = quat / norm
    q = (
        mech.default_pose.copy()
        if joint_pos is None
        else np.asarray(joint_pos, dtype=np.float64).copy()
    )
    if q.shape != (mech.nj,):
        raise ValueError(f"expected {mech.nj} joint angles, got shape {q.shape}")
    for j in range(mech.nj):
        lo, hi = mech.qlim[j]
        if not (lo - 1e-12 <= q[j] <= hi + 1e-12):
            raise ValueError(
                f"joint '{mech.joint_names[j]}' angle {q[j]:.6g} outside limits "
                f"[{lo:.6g}, {hi:.6g}]"
            )
    return SimState(
        base_position=pos.copy(),
        base_orientation=quat,
        base_linvel=np.zeros(3),
        base_angvel=np.zeros(3),
        joint_pos=q,
        joint_vel=np.zeros(mech.nj),
        time=0.0,
    )


# ----------------------------------------------------------- batched storage


@dataclass
class Batch:
    """Per-env model arrays plus packed states for N robots of one topology."""

    mech: Mechanism  # topology donor (first mechanism)
    n: int
    state: np.ndarray  # (N, ns)
    mass: np.ndarray  # (N, nb)
    com: np.ndarray  # (N, nb, 3)
    inertia: np.ndarray  # (N, nb, 3, 3)
    tip_local: np.ndarray  # (N, nt, 3)
    tip_radius: np.ndarray  # (N, nt)
    kp: np.ndarray  # (N, nj)
    kd: np.ndarray  # (N, nj)
    mu: np.ndarray  # (N,)
    kn: np.ndarray  # (N,)
    cn: np.ndarray  # (N,)
    eps: np.ndarray  # (N,)
    gravity: float
    dt: float
    # substep accumulators, rewritten by advance()
    tip_contact: np.ndarray = field(init=False)  # (N, nt) uint8
    touchdown_vz: np.ndarray = field(init=False)  # (N, nt)
    n_collision: np.ndarray = field(init=False)  # (N,) int64
    power: np.ndarray = field(init=False)  # (N,)
    torque_sq: np.ndarray = field(init=False)  # (N,)
    fault: np.ndarray = field(init=False)  # (N,) uint8
    tip_pos: np.ndarray = field(init=False)  # (N, nt, 3)
    tip_vel: np.ndarray = field(init=False)  # (N, nt, 3)

    def __post_init__(self):
        nt = self.mech.tip_body.shape[0]
        self.tip_contact = np.zeros((self.n, nt), dtype=np.uint8)
        self.touchdown_vz = np.zeros((self.n, nt))
        self.n_collision = np.zeros(self.n, dtype=np.int64)
        self.power = np.zeros(self.n)
        self.torque_sq = np.zeros(self.n)
        self.fault = np.zeros(self.n, dtype=np.uint8)
        self.tip_pos = np.zeros((self.n, nt, 3))
        self.tip_vel = np.zeros((self.n, nt, 3))

    def set_mechanism(self, i: int, mech: Mechanism) -> None:
        """Install per-env model parameters for row i (topology must match)."""
        m = self.mech
        if mech.nb != m.nb or mech.nj != m.nj or not np.array_equal(mech.parent, m.parent):
            raise ValueError("mechanism topology differs from the batch topology")
        self.mass[i] = mech.mass
        self.com[i] = mech.com
        self.inertia[i] = mech.inertia
        self.tip_local[i] = mech.tip_local
        self.tip_radius[i] = mech.tip_radius
        self.kp[i] = mech.kp
        self.kd[i] = mech.kd

    def advance(self, idx: np.ndarray, n_sub: int, targets: np.ndarray) -> None:
        """Run n_sub substeps for the envs in idx (int64 indices)."""
        m = self.mech
        simkernel.step_batch(
            idx, n_sub, self.state, targets,
            m.parent, m.axis, m.origin, m.anc_joints, m.anc_count, m.locked,
            m.qlim, m.taulim, m.tip_body, m.mid_body, m.mid_local, m.mid_radius,
            m.corner_local, m.base_fixed, self.gravity, self.dt,
            self.mass, self.com, self.inertia, self.tip_local, self.tip_radius,
            self.kp, self.kd, self.mu, self.kn, self.cn, self.eps,
            self.tip_contact, self.touchdown_vz, self.n_collision,
            self.power, self.torque_sq, self.fault,
        )
        simkernel.tip_states_batch(
            idx, self.state, m.parent, m.axis, m.origin, m.tip_body,
            self.tip_local, self.tip_pos, self.tip_vel,
        )

    def advance_with_energy(
        self, idx: np.ndarray, n_sub: int, targets: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Like advance() but also return per-substep (energies, contact counts).

        Energies include the contact spring potential, so a conservative
        passive trajectory shows them non-increasing up to integrator error.
        Both arrays are (len(idx), n_sub), sampled at pre-substep states.
        """
        m = self.mech
        energies = np.zeros((idx.shape[0], n_sub))
        contacts = np.zeros((idx.shape[0], n_sub), dtype=np.int64)
        simkernel.step_energy_batch(
            idx, n_sub, self.state, targets,
            m.parent, m.axis, m.origin, m.anc_joints, m.anc_count, m.locked,
            m.qlim, m.taulim, m.tip_body, m.mid_body, m.mid_local, m.mid_radius,
            m.corner_local, m.base_fixed, self.gravity, self.dt,
            self.mass, self.com, self.inertia, self.tip_local, self.tip_radius,
            self.kp, self.kd, self.mu, self.kn, self.cn, self.eps,
            self.tip_contact, self.touchdown_vz, self.n_collision,
            self.power, self.torque_sq, self.fault,
            energies, contacts,
        )
        simkernel.tip_states_batch(
            idx, self.state, m.parent, m.axis, m.origin, m.tip_body,
            self.tip_local, self.tip_pos, self.tip_vel,
        )
        return energies, contacts


def make_batch(
    mechs: Sequence[Mechanism],
    physics: PhysicsConfig | None = None,
) -> Batch:
    """Stack mechanisms sharing one topology into kernel-ready arrays."""
    if not mechs:
        raise ValueError("need at least one mechanism")
    physics = physics or PhysicsConfig()
    m0 = mechs[0]
    n = len(mechs)
    nb, nj = m0.nb, m0.nj
    nt = m0.tip_body.shape[0]
    batch = Batch(
        mech=m0,
        n=n,
        state=np.zeros((n, state_size(nj))),
        mass=np.zeros((n, nb)),
        com=np.zeros((n, nb, 3)),
        inertia=np.zeros((n, nb, 3, 3)),
        tip_local=np.zeros((n, nt, 3)),
        tip_radius=np.zeros((n, nt)),
        kp=np.zeros((n, nj)),
        kd=np.zeros((n, nj)),
        mu=np.full(n, physics.friction_mu),
        kn=np.full(n, physics.contact_kn),
        cn=np.full(n, physics.contact_cn),
        eps=np.full(n, physics.friction_vel_eps),
        gravity=physics.gravity,
        dt=physics.dt,
    )
    for i, m in enumerate(mechs):
        batch.set_mechanism(i, m)
    return batch


def _batch_of_one(mech: Mechanism, state: SimState, physics: PhysicsConfig) -> Batch:
    batch = make_batch([mech], physics)
    pack_state(mech, state, out=batch.state[0])
    return batch


# ------------------------------------------------------------- the operations


def pd_torque(
    targets: np.ndarray,
    state: SimState,
    kp,
    kd,
    limits,
    locked: np.ndarray | None = None,
) -> np.ndarray:
    """Clamped PD torques; locked joints get zero."""
    targets = np.asarray(targets, dtype=np.float64)
    tau = kp * (targets - state.joint_pos) - kd * state.joint_vel
    tau = np.clip(tau, -np.asarray(limits, dtype=np.float64), limits)
    if locked is not None:
        tau = np.where(locked.astype(bool), 0.0, tau)
    return tau


def forward_dynamics(
    mech: Mechanism,
    state: SimState,
    torques: np.ndarray | None = None,
    external: Sequence[tuple] = (),
    physics: PhysicsConfig | None = None,
) -> np.ndarray:
    """Accelerations [base linacc(3), base angacc(3) world, qdd(nj)].

    `external` is a sequence of (body_index, point_world, force_world)
    applied on top of gravity, contacts, and the given joint torques.
    Locked-joint and fixed-base accelerations come back as zero.
    """
    physics = physics or PhysicsConfig()
    batch = _batch_of_one(mech, state, physics)
    tau = (
        np.zeros(mech.nj)
        if torques is None
        else np.asarray(torques, dtype=np.float64)
    )
    if tau.shape != (mech.nj,):
        raise ValueError(f"expected {mech.nj} torques, got shape {tau.shape}")
    if external:
        ext_body = np.array([int(b) for b, _, _ in external], dtype=np.int64)
        ext_point = np.array([p for _, p, _ in external], dtype=np.float64).reshape(-1, 3)
        ext_force = np.array([f for _, _, f in external], dtype=np.float64).reshape(-1, 3)
    else:
        ext_body, ext_point, ext_force = _NO_EXT_BODY, _NO_EXT_VEC, _NO_EXT_VEC
    udot = np.zeros(6 + mech.nj)
    m = mech
    _, _, ok, _ = simkernel.eval_dynamics(
        0, batch.state, tau, ext_body, ext_point, ext_force,
        m.parent, m.axis, m.origin, m.anc_joints, m.anc_count, m.locked,
        m.tip_body, m.mid_body, m.mid_local, m.mid_radius, m.corner_local,
        m.base_fixed, physics.gravity, physics.dt,
        batch.mass, batch.com, batch.inertia, batch.tip_local, batch.tip_radius,
        batch.mu, batch.kn, batch.cn, batch.eps,
        udot, False,
    )
    if not ok:
        raise SimFault("mass matrix is not positive definite", state.copy())
    return udot


def step(
    mech: Mechanism,
    state: SimState,
    joint_targets: np.ndarray,
    gains: tuple | None = None,
    params: PhysicsConfig | None = None,
    n_substeps: int = 1,
) -> SimState:
    """Advance one robot by n_substeps physics steps under PD control."""
    params = params or PhysicsConfig()
    batch = _batch_of_one(mech, state, params)
    if gains is not None:
        batch.kp[0] = gains[0]
        batch.kd[0] = gains[1]
    targets = np.asarray(joint_targets, dtype=np.float64).reshape(1, mech.nj)
    idx = np.zeros(1, dtype=np.int64)
    batch.advance(idx, n_substeps, targets)
    if batch.fault[0]:
        raise SimFault(
            f"non-finite state during integration at t={state.time:.4f}s",
            state.copy(),
        )
    return unpack_state(mech, batch.state[0])


# ----------------------------------------------------- python-side kinematics


def _fk(mech: Mechanism, state: SimState):
    """World rotations, pivots, and velocities for every body (numpy)."""
    nb = mech.nb
    R = np.zeros((nb, 3, 3))
    x = np.zeros((nb, 3))
    w = np.zeros((nb, 3))
    v = np.zeros((nb, 3))
    R[0] = rot.quat_to_matrix(state.base_orientation)
    x[0] = state.base_position
    w[0] = rot.quat_rotate(state.base_orientation, state.base_angvel)
    v[0] = state.base_linvel
    for b in range(1, nb):
        j = b - 1
        p = mech.parent[b]
        axis_w = R[p] @ mech.axis[j]
        x[b] = x[p] + R[p] @ mech.origin[j]
        R[b] = R[p] @ rot.quat_to_matrix(
            rot.quat_from_axis_angle(mech.axis[j], state.joint_pos[j])
        )
        w[b] = w[p] + axis_w * state.joint_vel[j]
        v[b] = v[p] + np.cross(w[p], x[b] - x[p])
    return R, x, w, v


def _body_link_name(mech: Mechanism, body: int) -> str:
    if body == 0:
        return "base"
    return mech.joint_names[body - 1] + "_link"


def detect_contacts(mech: Mechanism, state: SimState) -> list[ContactPoint]:
    """Active ground contacts (penetration > 0) at the given state."""
    R, x, w, v = _fk(mech, state)
    normal = np.array([0.0, 0.0, 1.0])
    out: list[ContactPoint] = []

    def add(body, center, radius, is_tip):
        pen = radius - center[2]
        if pen <= 0.0:
            return
        deepest = center - np.array([0.0, 0.0, radius])
        vel = v[body] + np.cross(w[body], deepest - x[body])
        out.append(
            ContactPoint(
                body=int(body),
                link=_body_link_name(mech, body),
                point=deepest,
                penetration=float(pen),
                normal=normal.copy(),
                rel_velocity=vel,
                is_tip=is_tip,
            )
        )

    for t in range(mech.tip_body.shape[0]):
        b = mech.tip_body[t]
        add(b, x[b] + R[b] @ mech.tip_local[t], mech.tip_radius[t], True)
    for s in range(mech.mid_body.shape[0]):
        b = mech.mid_body[s]
        add(b, x[b] + R[b] @ mech.mid_local[s], mech.mid_radius[s], False)
    for c in range(mech.corner_local.shape[0]):
        add(0, x[0] + R[0] @ mech.corner_local[c], 0.0, False)
    return out


def contact_wrench(
    contact: ContactPoint,
    mu: float,
    kn: float,
    cn: float,
    eps: float = 1e-3,
) -> np.ndarray:
    """World-frame contact force for one point: spring-damper normal plus
    velocity-regularized Coulomb friction. The normal force is clamped to
    [0, 2*kn*pen]: never negative (the ground cannot pull) and the damper
    contribution never exceeds the spring force (impact stability)."""
    vz = contact.rel_velocity[2]
    fn = min(max(0.0, kn * contact.penetration - cn * vz), 2.0 * kn * contact.penetration)
    vt = contact.rel_velocity.copy()
    vt[2] = 0.0
    speed = float(np.linalg.norm(vt))
    ft = -mu * fn * vt / (speed + eps)
    return np.array([ft[0], ft[1], fn])


def mechanical_energy(mech: Mechanism, state: SimState, gravity: float = 9.81) -> float:
    """Kinetic plus gravitational potential energy (no contact spring)."""
    R, x, w, v = _fk(mech, state)
    total = 0.0
    for b in range(mech.nb):
        c = x[b] + R[b] @ mech.com[b]
        vc = v[b] + np.cross(w[b], c - x[b])
        Iw = R[b] @ mech.inertia[b] @ R[b].T
        total += 0.5 * mech.mass[b] * float(vc @ vc)
        total += 0.5 * float(w[b] @ (Iw @ w[b]))
        total += mech.mass[b] * gravity * c[2]
    return total
