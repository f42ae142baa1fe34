"""RL environment over the batched quadruped simulation.

Command sampling, observation assembly with sensor noise, the reward stack,
per-episode domain randomization, decimated PD control, termination, and a
deterministic vectorized batch. A scalar `Env` is a batch of one.

Batched and sequential execution are bitwise identical because every
environment row owns counter-based RNG streams keyed by
``(master_seed, stream << 32 | global_env_index)`` and both the physics
kernel and all per-step math are row-independent. The same environment
index therefore produces the same trajectory no matter which batch size
it is embedded in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rotation as rot
from . import simkernel
from .config import (
    REWARD_TERMS,
    CommandConfig,
    Config,
    NoiseConfig,
    RandomizationConfig,
    RewardConfig,
)
from .dynamics import Batch, SimFault, SimState, make_batch, pack_state, unpack_state
from .mechanism import from_morphology
from .morphology import N_JOINTS, ComplianceParams, nominal_spec

N_ACTIONS = 8
N_TIPS = 4

DONE_NONE = 0
DONE_TIMEOUT = 1
DONE_TIPPED = 2
DONE_FAULT = 3
DONE_REASONS = ("", "timeout", "tipped", "fault")

# per-env Philox streams; separate keys keep the draw sequences independent,
# so e.g. switching commands to external control cannot shift the noise draws
_STREAM_RESET = 0
_STREAM_COMMAND = 1
_STREAM_NOISE = 2

_PROPRIO_DIM = 3 + 3 + N_ACTIONS + N_ACTIONS + 1  # angvel, gravity, q, qd, height


def _env_rng(master_seed: int, stream: int, index: int) -> np.random.Generator:
    key = np.array(
        [master_seed & 0xFFFFFFFFFFFFFFFF, (stream << 32) | (index & 0xFFFFFFFF)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


# ------------------------------------------------------------------- commands


@dataclass(frozen=True)
class Command:
    """Tracking target held constant between resample boundaries."""

    vx: float  # m/s, base frame forward
    vy: float  # m/s, base frame lateral
    wz: float  # rad/s, yaw rate
    h_ref: float  # m, base underside height

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.wz, self.h_ref])

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Command":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def sample_command(rng: np.random.Generator, ranges: CommandConfig) -> Command:
    """Uniform draw per axis; a degenerate range pins that axis."""
    lo = np.array(
        [ranges.vx_range[0], ranges.vy_range[0], ranges.wz_range[0], ranges.h_range[0]]
    )
    hi = np.array(
        [ranges.vx_range[1], ranges.vy_range[1], ranges.wz_range[1], ranges.h_range[1]]
    )
    return Command.from_array(rng.uniform(lo, hi))


# -------------------------------------------------------------- randomization


@dataclass(frozen=True)
class Randomization:
    """Everything drawn once per episode for one environment."""

    compliance: ComplianceParams
    base_mass_delta: float  # kg, payload on the base
    friction: float
    kp_scale: float
    kd_scale: float
    motor_offset: np.ndarray  # (12,) rad, actuation zero error; locks the yaws
    joint_jitter: np.ndarray  # (12,) rad, initial pose perturbation

    @classmethod
    def nominal(cls) -> "Randomization":
        return cls(
            compliance=ComplianceParams(),
            base_mass_delta=0.0,
            friction=1.0,
            kp_scale=1.0,
            kd_scale=1.0,
            motor_offset=np.zeros(N_JOINTS),
            joint_jitter=np.zeros(N_JOINTS),
        )


def sample_randomization(
    rng: np.random.Generator, ranges: RandomizationConfig
) -> Randomization:
    """One episode's draws, in a frozen order the tests can replay."""
    ell = rng.uniform(*ranges.ell_scale_range, size=N_TIPS)
    shift = rng.uniform(*ranges.com_shift_range, size=N_TIPS)
    delta = rng.uniform(*ranges.base_mass_delta_range)
    mu = rng.uniform(*ranges.friction_range)
    kp_s = rng.uniform(*ranges.kp_scale_range)
    kd_s = rng.uniform(*ranges.kd_scale_range)
    offset = rng.uniform(*ranges.motor_offset_range, size=N_JOINTS)
    jitter = rng.uniform(-ranges.init_joint_jitter, ranges.init_joint_jitter, size=N_JOINTS)
    return Randomization(
        compliance=ComplianceParams(tuple(map(float, ell)), tuple(map(float, shift))),
        base_mass_delta=float(delta),
        friction=float(mu),
        kp_scale=float(kp_s),
        kd_scale=float(kd_s),
        motor_offset=offset,
        joint_jitter=jitter,
    )


# --------------------------------------------------------------- observations


@dataclass(frozen=True)
class PrivilegedContext:
    """Latent episode variables appended to the teacher observation."""

    friction: float
    ell_scale: np.ndarray  # (4,)
    com_shift: np.ndarray  # (4,)
    base_mass_delta: float
    tip_contact: np.ndarray  # (4,) 0/1
    kp_scale: float
    kd_scale: float


def obs_layout(history_len: int = 2) -> tuple[dict, dict]:
    """(student, teacher) maps of field name to index slice."""
    student: dict[str, slice] = {}
    i = 0

    def put(d, name, width):
        nonlocal i
        d[name] = slice(i, i + width)
        i += width

    put(student, "base_angvel", 3)
    put(student, "projected_gravity", 3)
    put(student, "joint_pos", N_ACTIONS)
    put(student, "joint_vel", N_ACTIONS)
    put(student, "height", 1)
    put(student, "command", 4)
    put(student, "action_history", N_ACTIONS * history_len)
    teacher = dict(student)
    put(teacher, "base_linvel", 3)
    put(teacher, "friction_mu", 1)
    put(teacher, "ell_scale", 4)
    put(teacher, "com_shift", 4)
    put(teacher, "base_mass_delta", 1)
    put(teacher, "tip_contact_flags", 4)
    put(teacher, "gain_scales", 2)
    return student, teacher


def noise_scales(noise: NoiseConfig) -> np.ndarray:
    """Per-channel uniform half-widths over the proprioceptive block."""
    return (
        np.concatenate(
            [
                np.full(3, noise.angvel),
                np.full(3, noise.gravity),
                np.full(N_ACTIONS, noise.joint_pos),
                np.full(N_ACTIONS, noise.joint_vel),
                [noise.height],
            ]
        )
        * noise.level
    )


def build_observations(
    state: SimState,
    command: Command | np.ndarray,
    action_history: np.ndarray,
    noise_rng: np.random.Generator | None,
    noise: NoiseConfig,
    privileged: PrivilegedContext,
    actuated: np.ndarray,
    height_offset: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Assemble (student, teacher) vectors for one robot.

    The student copy gets additive uniform noise on the proprioceptive
    block only (never on command or action history); the teacher copy is
    noise-free with the privileged fields appended. `height_offset` is the
    base-center-to-underside drop, so the height channel reads ground
    clearance. When a noise rng is given the 23 draws are consumed even at
    zero noise level, keeping the stream position independent of config.
    """
    cmd = command.as_array() if isinstance(command, Command) else np.asarray(command, dtype=np.float64)
    clean = np.concatenate(
        [
            state.base_angvel,
            state.projected_gravity(),
            state.joint_pos[actuated],
            state.joint_vel[actuated],
            [state.base_position[2] - height_offset],
            cmd,
            np.asarray(action_history, dtype=np.float64).reshape(-1),
        ]
    )
    student = clean.copy()
    if noise_rng is not None:
        draw = noise_rng.uniform(-1.0, 1.0, size=_PROPRIO_DIM)
        student[:_PROPRIO_DIM] += draw * noise_scales(noise)
    linvel_body = rot.quat_rotate_inverse(state.base_orientation, state.base_linvel)
    teacher = np.concatenate(
        [
            clean,
            linvel_body,
            [privileged.friction],
            privileged.ell_scale,
            privileged.com_shift,
            [privileged.base_mass_delta],
            np.asarray(privileged.tip_contact, dtype=np.float64),
            [privileged.kp_scale, privileged.kd_scale],
        ]
    )
    return student, teacher


# -------------------------------------------------------------------- rewards


@dataclass
class RewardInputs:
    """Per-control-step reward features, batched over environments.

    `air_time` holds each tip's accumulated flight time at the moment of
    scoring (before the touchdown bookkeeping zeroes it) and `touchdown_vz`
    is nonzero exactly for tips that newly touched down during the step.
    `foot_xy` and `foot_nominal` are base-frame tip positions relative to
    the shoulder pivots.
    """

    command: np.ndarray  # (N, 4)
    v_body: np.ndarray  # (N, 3)
    w_body: np.ndarray  # (N, 3)
    vz_world: np.ndarray  # (N,)
    height: np.ndarray  # (N,)
    roll: np.ndarray  # (N,)
    pitch: np.ndarray  # (N,)
    torque_sq: np.ndarray  # (N,) mean over substeps of sum tau^2
    action: np.ndarray  # (N, 8)
    prev_action: np.ndarray  # (N, 8)
    n_collision: np.ndarray  # (N,) non-tip contact points
    touchdown_vz: np.ndarray  # (N, 4)
    air_time: np.ndarray  # (N, 4) s
    tip_vz: np.ndarray  # (N, 4) m/s
    foot_xy: np.ndarray  # (N, 4, 2)
    foot_nominal: np.ndarray  # (N, 4, 2)
    q_act: np.ndarray  # (N, 8) actuated angles, (roll, pitch) per limb


def compute_reward(
    inp: RewardInputs, rw: RewardConfig
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Total reward and the named term map; total is the exact term sum."""
    terms: dict[str, np.ndarray] = {}
    lin_err = (inp.command[:, 0] - inp.v_body[:, 0]) ** 2 + (
        inp.command[:, 1] - inp.v_body[:, 1]
    ) ** 2
    terms["tracking_lin_vel"] = rw.w_tracking_lin_vel * np.exp(
        -lin_err / rw.sigma_lin_vel**2
    )
    ang_err = (inp.command[:, 2] - inp.w_body[:, 2]) ** 2
    terms["tracking_ang_vel"] = rw.w_tracking_ang_vel * np.exp(
        -ang_err / rw.sigma_ang_vel**2
    )
    terms["base_height"] = rw.w_base_height * (inp.height - inp.command[:, 3]) ** 2
    terms["orientation"] = rw.w_orientation * (inp.roll**2 + inp.pitch**2)
    terms["torques"] = rw.w_torques * inp.torque_sq
    terms["action_rate"] = rw.w_action_rate * ((inp.action - inp.prev_action) ** 2).sum(
        axis=1
    )
    terms["collision"] = rw.w_collision * inp.n_collision.astype(np.float64)
    terms["lin_vel_z"] = rw.w_lin_vel_z * inp.vz_world**2
    terms["ang_vel_xy"] = rw.w_ang_vel_xy * (
        inp.w_body[:, 0] ** 2 + inp.w_body[:, 1] ** 2
    )
    touched = inp.touchdown_vz != 0.0
    terms["feet_air_time"] = rw.w_feet_air_time * (
        touched * (inp.air_time - rw.air_time_min)
    ).sum(axis=1)
    terms["premature_contact"] = rw.w_premature_contact * (
        inp.touchdown_vz < -rw.premature_vz
    ).sum(axis=1)
    terms["base_pitch"] = rw.w_base_pitch * inp.pitch**2
    lift = np.maximum(0.0, inp.tip_vz - rw.liftoff_vz)
    terms["liftoff_vel"] = rw.w_liftoff_vel * (lift**2).sum(axis=1)
    q = inp.q_act
    # left/right mirror pairs (fl, fr) and (rl, rr): pitch matches, roll flips
    sym = (
        (q[:, 0] + q[:, 2]) ** 2
        + (q[:, 1] - q[:, 3]) ** 2
        + (q[:, 4] + q[:, 6]) ** 2
        + (q[:, 5] - q[:, 7]) ** 2
    )
    terms["joint_symmetry"] = rw.w_joint_symmetry * sym
    terms["foot_position"] = rw.w_foot_position * (
        (inp.foot_xy - inp.foot_nominal) ** 2
    ).sum(axis=(1, 2))
    total = np.zeros(inp.command.shape[0])
    for name in REWARD_TERMS:
        total += terms[name]
    return total, terms


# -------------------------------------------------------------- batched utils


def _rotate_inverse(quat: np.ndarray, v: np.ndarray) -> np.ndarray:
    """World vectors into body frames; broadcasts over leading axes."""
    w = quat[..., :1]
    u = -quat[..., 1:]
    return v + 2.0 * np.cross(u, np.cross(u, v) + w * v)


def _roll_pitch(quat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, x, y, z = quat[:, 0], quat[:, 1], quat[:, 2], quat[:, 3]
    sinp = np.clip(2.0 * (w * y - z * x), -1.0, 1.0)
    roll = np.arctan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    return roll, np.arcsin(sinp)


# -------------------------------------------------------------------- results


@dataclass
class BatchStepResult:
    """One synchronized control step for every environment row.

    For rows that finished this step, `obs_*` already hold the next
    episode's reset observations; the terminal ones are under
    ``info["final_obs_student"]`` / ``info["final_obs_teacher"]``.
    """

    obs_student: np.ndarray  # (N, ds)
    obs_teacher: np.ndarray  # (N, dt)
    reward: np.ndarray  # (N,)
    reward_terms: dict[str, np.ndarray]
    done: np.ndarray  # (N,) bool
    done_reason: np.ndarray  # (N,) uint8, DONE_* codes
    info: dict


@dataclass
class StepResult:
    """Scalar-environment step outcome."""

    obs_student: np.ndarray
    obs_teacher: np.ndarray
    reward: float
    reward_terms: dict[str, float]
    done: bool
    done_reason: str  # "", "timeout", "tipped", "fault"
    info: dict


# ------------------------------------------------------------------- vec env


class VecEnv:
    """N independent quadrupeds stepped as one synchronized batch.

    Each row draws its own randomization at reset, owns its own command
    schedule and noise stream, and auto-resets on termination (the reset
    settles the robot into a grounded stance before handing it back).
    `fixed_randomization` pins every reset to the given draw, for held-out
    morphology evaluation; `external_commands` disables command sampling
    entirely so a caller can script `set_commands` itself.
    """

    def __init__(
        self,
        config: Config | None = None,
        num_envs: int | None = None,
        seed: int | None = None,
        env_offset: int = 0,
        auto_reset: bool = True,
        fixed_randomization: Randomization | None = None,
        external_commands: bool = False,
    ):
        cfg = config if config is not None else Config()
        cfg.validate()
        self.cfg = cfg
        self.n = int(num_envs if num_envs is not None else cfg.train.num_envs)
        if self.n < 1:
            raise ValueError(f"need at least one env, got {self.n}")
        self.auto_reset = auto_reset
        self.fixed_randomization = fixed_randomization
        self.external_commands = external_commands
        self.env_offset = int(env_offset)

        self.spec = nominal_spec(cfg.model)
        self.mech = from_morphology(self.spec)
        self.batch: Batch = make_batch([self.mech] * self.n, cfg.physics)
        self.actuated = np.flatnonzero(self.mech.locked == 0)
        self._locked = np.flatnonzero(self.mech.locked == 1)
        if self.actuated.shape[0] != N_ACTIONS:
            raise ValueError(
                f"expected {N_ACTIONS} actuated joints, got {self.actuated.shape[0]}"
            )
        self._drop = self.spec.shoulder_drop
        # shoulder pivots in the base frame: the per-limb root joint origins
        self._shoulder_xy = self.mech.origin[[c * 3 for c in range(N_TIPS)], :2].copy()
        self._default_pose = self.mech.default_pose.copy()
        self._qlim = self.mech.qlim.copy()

        # nominal donor rows for the fast per-episode morphology install
        self._nominal_mass = self.mech.mass.copy()
        self._nominal_com = self.mech.com.copy()
        self._nominal_inertia = self.mech.inertia.copy()
        self._nominal_kp = self.mech.kp.copy()
        self._nominal_kd = self.mech.kd.copy()
        self._distal_bodies = np.array([3 * (t + 1) for t in range(N_TIPS)])
        self._distal_length = np.array(self.spec.distal_lengths)

        self.control_dt = cfg.physics.dt * cfg.env.decimation
        self.episode_steps = int(round(cfg.env.episode_length_s / self.control_dt))
        self.resample_steps = int(
            round(cfg.commands.resample_interval_s / self.control_dt)
        )
        self._tip_limit = math.radians(cfg.env.tip_angle_limit_deg)
        self._settle_sub = int(round(cfg.env.settle_time_s / cfg.physics.dt))
        self._settle_rounds = max(
            1, int(math.ceil(cfg.env.settle_budget_s / cfg.env.settle_time_s))
        )

        self.master_seed = int(seed if seed is not None else cfg.train.seed)
        self._make_rngs(self.master_seed)

        n = self.n
        self._all_idx = np.arange(n, dtype=np.int64)
        self._targets = np.zeros((n, N_JOINTS))
        self._commands = np.zeros((n, 4))
        self._step_count = np.zeros(n, dtype=np.int64)
        self._air_time = np.zeros((n, N_TIPS))
        self._prev_action = np.zeros((n, N_ACTIONS))
        self._history = np.zeros((n, cfg.env.history_len, N_ACTIONS))
        self._done = np.zeros(n, dtype=bool)
        self._foot_nominal = np.zeros((n, N_TIPS, 2))
        self._ell = np.ones((n, N_TIPS))
        self._com_shift = np.zeros((n, N_TIPS))
        self._mass_delta = np.zeros(n)
        self._kp_scale = np.ones(n)
        self._kd_scale = np.ones(n)
        self._motor_offset = np.zeros((n, N_JOINTS))
        self._rand: list[Randomization | None] = [None] * n
        self._last_obs_s = np.zeros((n, cfg.obs_dim_student))
        self._last_obs_t = np.zeros((n, cfg.obs_dim_teacher))
        self._ready = False

    # -- rng plumbing

    def _make_rngs(self, master_seed: int) -> None:
        gi = [self.env_offset + i for i in range(self.n)]
        self._rng_reset = [_env_rng(master_seed, _STREAM_RESET, g) for g in gi]
        self._rng_cmd = [_env_rng(master_seed, _STREAM_COMMAND, g) for g in gi]
        self._rng_noise = [_env_rng(master_seed, _STREAM_NOISE, g) for g in gi]

    # -- episode setup

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Re-randomize, settle, and observe every environment.

        Passing a seed rekeys all per-env streams first, so two resets with
        the same seed produce identical draws and observations.
        """
        if seed is not None:
            self.master_seed = int(seed)
            self._make_rngs(self.master_seed)
        self._reset_envs(self._all_idx)
        self._done[:] = False
        self._ready = True
        obs_s, obs_t = self._observe(self._all_idx)
        self._last_obs_s = obs_s.copy()
        self._last_obs_t = obs_t.copy()
        return obs_s, obs_t

    def _install(self, i: int, r: Randomization) -> None:
        """Write one episode's morphology and controller draws into row i.

        Equivalent to rebuilding the morphology spec through
        `apply_compliance` and flattening it, but touches only the rows
        compliance can change: distal CoM/inertia/tip offset, base payload,
        gains, friction (verified against the spec pipeline in the tests).
        """
        b = self.batch
        b.mass[i] = self._nominal_mass
        b.com[i] = self._nominal_com
        b.inertia[i] = self._nominal_inertia
        ell = np.asarray(r.compliance.ell_scale)
        shift = np.asarray(r.compliance.com_shift_frac)
        new_len = self._distal_length * ell
        for t, body in enumerate(self._distal_bodies):
            b.com[i, body] = (0.0, 0.0, -new_len[t] * (0.5 + shift[t]))
            b.inertia[i, body] = self._nominal_inertia[body] * (ell[t] * ell[t])
            b.tip_local[i, t] = (0.0, 0.0, -new_len[t])
        m0 = self._nominal_mass[0]
        if m0 + r.base_mass_delta <= 0.0:
            raise ValueError(f"base mass would become {m0 + r.base_mass_delta} kg")
        b.mass[i, 0] = m0 + r.base_mass_delta
        b.inertia[i, 0] = self._nominal_inertia[0] * ((m0 + r.base_mass_delta) / m0)
        b.kp[i] = self._nominal_kp * r.kp_scale
        b.kd[i] = self._nominal_kd * r.kd_scale
        b.mu[i] = r.friction

        self._ell[i] = ell
        self._com_shift[i] = shift
        self._mass_delta[i] = r.base_mass_delta
        self._kp_scale[i] = r.kp_scale
        self._kd_scale[i] = r.kd_scale
        self._motor_offset[i] = r.motor_offset
        self._rand[i] = r

        # offsets and jitter touch actuated joints only: the locked yaws have
        # no motor, and a yaw held off zero acts as permanent toe-in that
        # spins the grounded stance forever. Joints start jittered but settle
        # toward the stance the episode will start from.
        tq = self._default_pose.copy()
        tq[self.actuated] += r.motor_offset[self.actuated]
        np.clip(tq, self._qlim[:, 0], self._qlim[:, 1], out=tq)
        q = tq.copy()
        q[self.actuated] += r.joint_jitter[self.actuated]
        np.clip(q, self._qlim[:, 0], self._qlim[:, 1], out=q)
        row = b.state[i]
        row[:] = 0.0
        row[2] = 1.0
        row[3] = 1.0
        row[13:13 + N_JOINTS] = q
        self._targets[i] = tq

    def _settle(self, idx: np.ndarray) -> None:
        """Drop each robot from just above its stance and let PD ground it.

        Symmetric draws come to rest and exit at the quiet tolerances.
        Asymmetric morphologies can wobble or skate indefinitely: the held
        default pose preloads the tips tangentially, and when that demand
        leaves the friction cone the passive equilibrium is a slow steady
        creep, not rest. Those stances are handed to the episode as-is once
        the budget is spent, provided the residual motion is bounded;
        anything faster (bouncing, instability, fault) raises SimFault.
        """
        b = self.batch
        m = self.mech
        simkernel.tip_states_batch(
            idx, b.state, m.parent, m.axis, m.origin, m.tip_body,
            b.tip_local, b.tip_pos, b.tip_vel,
        )
        for i in idx:
            clearance = np.min(b.tip_pos[i, :, 2] - b.tip_radius[i])
            b.state[i, 2] += 0.002 - clearance
        active = np.asarray(idx, dtype=np.int64)
        for _ in range(self._settle_rounds):
            b.advance(active, self._settle_sub, self._targets)
            lin = np.linalg.norm(b.state[active, 7:10], axis=1)
            ang = np.linalg.norm(b.state[active, 10:13], axis=1)
            quiet = (
                (lin < self.cfg.env.settle_linvel_tol)
                & (ang < self.cfg.env.settle_angvel_tol)
                & (b.fault[active] == 0)
            )
            active = active[~quiet]
            if active.shape[0] == 0:
                return
        lin = np.linalg.norm(b.state[active, 7:10], axis=1)
        ang = np.linalg.norm(b.state[active, 10:13], axis=1)
        bounded = (
            (lin < self.cfg.env.settle_residual_linvel)
            & (ang < self.cfg.env.settle_residual_angvel)
            & (b.fault[active] == 0)
        )
        active = active[~bounded]
        if active.shape[0] == 0:
            return
        raise SimFault(
            f"reset settle failed for env(s) {active.tolist()}: residual "
            f"motion above bounds after {self.cfg.env.settle_budget_s}s",
            unpack_state(self.mech, self.batch.state[active[0]]),
        )

    def _reset_envs(self, idx: np.ndarray) -> None:
        for i in idx:
            self.batch.fault[i] = 0
            r = (
                self.fixed_randomization
                if self.fixed_randomization is not None
                else sample_randomization(self._rng_reset[i], self.cfg.randomization)
            )
            self._install(int(i), r)
        self._settle(idx)
        b = self.batch
        for i in idx:
            b.state[i, 13 + 2 * N_JOINTS] = 0.0  # episode clock restarts
            self._step_count[i] = 0
            self._air_time[i] = 0.0
            self._prev_action[i] = 0.0
            self._history[i] = 0.0
            if not self.external_commands:
                self._commands[i] = sample_command(
                    self._rng_cmd[i], self.cfg.commands
                ).as_array()
            else:
                self._commands[i] = 0.0
        # the settled stance defines each tip's nominal base-frame footprint
        quat = b.state[idx, 3:7]
        rel = b.tip_pos[idx] - b.state[idx, None, 0:3]
        rel_body = _rotate_inverse(quat[:, None, :], rel)
        self._foot_nominal[idx] = rel_body[:, :, :2] - self._shoulder_xy[None, :, :]

    # -- stepping

    def step(self, actions: np.ndarray) -> BatchStepResult:
        """Apply one action per row and advance `decimation` substeps."""
        if not self._ready:
            raise RuntimeError("reset() must be called before step()")
        a = np.asarray(actions, dtype=np.float64)
        if a.shape != (self.n, N_ACTIONS):
            raise ValueError(
                f"expected actions of shape {(self.n, N_ACTIONS)}, got {a.shape}"
            )
        if not np.all(np.isfinite(a)):
            bad = np.flatnonzero(~np.isfinite(a).all(axis=1))
            raise ValueError(f"non-finite action for env(s) {bad.tolist()}")
        if not self.auto_reset and self._done.any():
            bad = np.flatnonzero(self._done)
            raise RuntimeError(
                f"env(s) {bad.tolist()} are done; call reset() before stepping"
            )
        cfg = self.cfg
        b = self.batch

        tg = self._targets
        tg[:, self.actuated] = np.clip(
            self._default_pose[None, self.actuated]
            + self._motor_offset[:, self.actuated]
            + a * cfg.env.action_scale,
            self._qlim[None, self.actuated, 0],
            self._qlim[None, self.actuated, 1],
        )
        b.advance(self._all_idx, cfg.env.decimation, tg)
        self._step_count += 1

        quat = b.state[:, 3:7]
        roll, pitch = _roll_pitch(quat)
        fault = b.fault.astype(bool)
        tipped = (np.abs(roll) > self._tip_limit) | (np.abs(pitch) > self._tip_limit)
        timeout = self._step_count >= self.episode_steps
        reason = np.zeros(self.n, dtype=np.uint8)
        reason[timeout] = DONE_TIMEOUT
        reason[tipped] = DONE_TIPPED
        reason[fault] = DONE_FAULT
        done = reason != DONE_NONE

        v_world = b.state[:, 7:10]
        w_world = b.state[:, 10:13]
        rel = b.tip_pos - b.state[:, None, 0:3]
        rel_body = _rotate_inverse(quat[:, None, :], rel)
        inputs = RewardInputs(
            command=self._commands,
            v_body=_rotate_inverse(quat, v_world),
            w_body=_rotate_inverse(quat, w_world),
            vz_world=v_world[:, 2],
            height=b.state[:, 2] - self._drop,
            roll=roll,
            pitch=pitch,
            torque_sq=b.torque_sq,
            action=a,
            prev_action=self._prev_action,
            n_collision=b.n_collision,
            touchdown_vz=b.touchdown_vz,
            air_time=self._air_time,
            tip_vz=b.tip_vel[:, :, 2],
            foot_xy=rel_body[:, :, :2] - self._shoulder_xy[None, :, :],
            foot_nominal=self._foot_nominal,
            q_act=b.state[:, 13 + self.actuated],
        )
        reward, terms = compute_reward(inputs, cfg.reward)
        if fault.any():
            # a faulted row's state is non-finite; its step scores zero
            reward[fault] = 0.0
            for arr in terms.values():
                arr[fault] = 0.0

        grounded = b.tip_contact.astype(bool) | (b.touchdown_vz != 0.0)
        self._air_time[grounded] = 0.0
        self._air_time[~grounded] += self.control_dt

        self._history[:, 1:] = self._history[:, :-1]
        self._history[:, 0] = a
        self._prev_action = a.copy()

        if not self.external_commands:
            boundary = (self._step_count % self.resample_steps == 0) & ~done
            for i in np.flatnonzero(boundary):
                self._commands[i] = sample_command(
                    self._rng_cmd[i], self.cfg.commands
                ).as_array()

        info = {
            "power": b.power.copy(),
            "contacts": b.tip_contact.copy(),
            "time_outs": reason == DONE_TIMEOUT,
        }
        obs_s, obs_t = self._observe(self._all_idx)
        if done.any():
            didx = np.flatnonzero(done).astype(np.int64)
            info["final_obs_student"] = obs_s.copy()
            info["final_obs_teacher"] = obs_t.copy()
            if self.auto_reset:
                self._reset_envs(didx)
                rs, rt = self._observe(didx)
                obs_s[didx] = rs
                obs_t[didx] = rt
            else:
                self._done |= done
        self._last_obs_s = obs_s.copy()
        self._last_obs_t = obs_t.copy()
        return BatchStepResult(
            obs_student=obs_s,
            obs_teacher=obs_t,
            reward=reward,
            reward_terms=terms,
            done=done,
            done_reason=reason,
            info=info,
        )

    def _observe(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        k = len(idx)
        obs_s = np.zeros((k, cfg.obs_dim_student))
        obs_t = np.zeros((k, cfg.obs_dim_teacher))
        for row, i in enumerate(idx):
            state = unpack_state(self.mech, self.batch.state[i])
            ctx = PrivilegedContext(
                friction=float(self.batch.mu[i]),
                ell_scale=self._ell[i],
                com_shift=self._com_shift[i],
                base_mass_delta=float(self._mass_delta[i]),
                tip_contact=self.batch.tip_contact[i],
                kp_scale=float(self._kp_scale[i]),
                kd_scale=float(self._kd_scale[i]),
            )
            obs_s[row], obs_t[row] = build_observations(
                state,
                self._commands[i],
                self._history[i],
                self._rng_noise[i],
                cfg.noise,
                ctx,
                self.actuated,
                self._drop,
            )
        return obs_s, obs_t

    # -- inspection and scripting hooks

    @property
    def commands(self) -> np.ndarray:
        return self._commands.copy()

    def set_commands(self, commands: np.ndarray) -> None:
        """Script the tracking targets directly (see `external_commands`)."""
        c = np.asarray(commands, dtype=np.float64)
        if c.shape != (self.n, 4):
            raise ValueError(f"expected commands of shape {(self.n, 4)}, got {c.shape}")
        self._commands[:] = c

    @property
    def episode_step(self) -> np.ndarray:
        return self._step_count.copy()

    def get_state(self, i: int) -> SimState:
        return unpack_state(self.mech, self.batch.state[i])

    def set_state(self, i: int, state: SimState) -> None:
        """Raw state override for tests, evaluation replay, and teleop."""
        pack_state(self.mech, state, out=self.batch.state[i])

    def randomization_of(self, i: int) -> Randomization | None:
        return self._rand[i]

    def current_observations(self) -> tuple[np.ndarray, np.ndarray]:
        """The pair last handed out by reset/step, without consuming any
        fresh noise draws (re-observing would advance the noise streams)."""
        if not self._ready:
            raise RuntimeError("reset() must run before observations exist")
        return self._last_obs_s.copy(), self._last_obs_t.copy()

    # -- snapshot / restore (exact training resume)

    def state_dict(self) -> dict[str, np.ndarray]:
        """Every mutable array needed to continue bitwise identically."""
        n = self.n
        rand = np.full((n, 36), np.nan)
        has_rand = np.zeros(n, dtype=np.uint8)
        for i, r in enumerate(self._rand):
            if r is None:
                continue
            has_rand[i] = 1
            rand[i] = np.concatenate(
                [
                    np.asarray(r.compliance.ell_scale),
                    np.asarray(r.compliance.com_shift_frac),
                    [r.base_mass_delta, r.friction, r.kp_scale, r.kd_scale],
                    r.motor_offset,
                    r.joint_jitter,
                ]
            )
        rngs = np.empty((3, n, 13), dtype=np.uint64)
        for s, streams in enumerate((self._rng_reset, self._rng_cmd, self._rng_noise)):
            for i, g in enumerate(streams):
                rngs[s, i] = _pack_rng_state(g)
        b = self.batch
        return {
            "sim.state": b.state.copy(),
            "sim.mass": b.mass.copy(),
            "sim.com": b.com.copy(),
            "sim.inertia": b.inertia.copy(),
            "sim.tip_local": b.tip_local.copy(),
            "sim.kp": b.kp.copy(),
            "sim.kd": b.kd.copy(),
            "sim.mu": b.mu.copy(),
            "sim.fault": b.fault.copy(),
            # carried into the next advance() to seed touchdown edge detection
            "sim.tip_contact": b.tip_contact.copy(),
            "env.targets": self._targets.copy(),
            "env.commands": self._commands.copy(),
            "env.step_count": self._step_count.copy(),
            "env.air_time": self._air_time.copy(),
            "env.prev_action": self._prev_action.copy(),
            "env.history": self._history.copy(),
            "env.done": self._done.astype(np.uint8),
            "env.foot_nominal": self._foot_nominal.copy(),
            "env.ell": self._ell.copy(),
            "env.com_shift": self._com_shift.copy(),
            "env.mass_delta": self._mass_delta.copy(),
            "env.kp_scale": self._kp_scale.copy(),
            "env.kd_scale": self._kd_scale.copy(),
            "env.motor_offset": self._motor_offset.copy(),
            "env.last_obs_student": self._last_obs_s.copy(),
            "env.last_obs_teacher": self._last_obs_t.copy(),
            "env.rand": rand,
            "env.has_rand": has_rand,
            "env.rng": rngs,
            "env.ready": np.array([int(self._ready)], dtype=np.uint8),
            "env.master_seed": np.array([self.master_seed], dtype=np.int64),
        }

    def load_state_dict(self, d: dict[str, np.ndarray]) -> None:
        if d["sim.state"].shape[0] != self.n:
            raise ValueError(
                f"snapshot holds {d['sim.state'].shape[0]} envs, this batch has {self.n}"
            )
        b = self.batch
        for key, dst in (
            ("sim.state", b.state),
            ("sim.mass", b.mass),
            ("sim.com", b.com),
            ("sim.inertia", b.inertia),
            ("sim.tip_local", b.tip_local),
            ("sim.kp", b.kp),
            ("sim.kd", b.kd),
            ("sim.mu", b.mu),
            ("sim.fault", b.fault),
            ("sim.tip_contact", b.tip_contact),
            ("env.targets", self._targets),
            ("env.commands", self._commands),
            ("env.step_count", self._step_count),
            ("env.air_time", self._air_time),
            ("env.prev_action", self._prev_action),
            ("env.history", self._history),
            ("env.foot_nominal", self._foot_nominal),
            ("env.ell", self._ell),
            ("env.com_shift", self._com_shift),
            ("env.mass_delta", self._mass_delta),
            ("env.kp_scale", self._kp_scale),
            ("env.kd_scale", self._kd_scale),
            ("env.motor_offset", self._motor_offset),
            ("env.last_obs_student", self._last_obs_s),
            ("env.last_obs_teacher", self._last_obs_t),
        ):
            dst[:] = d[key]
        self._done[:] = d["env.done"].astype(bool)
        for i in range(self.n):
            if not d["env.has_rand"][i]:
                self._rand[i] = None
                continue
            row = d["env.rand"][i]
            self._rand[i] = Randomization(
                compliance=ComplianceParams(
                    ell_scale=tuple(row[0:4]), com_shift_frac=tuple(row[4:8])
                ),
                base_mass_delta=float(row[8]),
                friction=float(row[9]),
                kp_scale=float(row[10]),
                kd_scale=float(row[11]),
                motor_offset=row[12:24].copy(),
                joint_jitter=row[24:36].copy(),
            )
        rngs = d["env.rng"]
        for s, streams in enumerate((self._rng_reset, self._rng_cmd, self._rng_noise)):
            for i, g in enumerate(streams):
                _unpack_rng_state(g, rngs[s, i])
        self.master_seed = int(d["env.master_seed"][0])
        self._ready = bool(d["env.ready"][0])


def _pack_rng_state(rng: np.random.Generator) -> np.ndarray:
    """Philox generator state as 13 uint64 words (counter 4, key 2,
    buffer 4, buffer_pos, has_uint32, uinteger)."""
    s = rng.bit_generator.state
    return np.concatenate(
        [
            s["state"]["counter"],
            s["state"]["key"],
            s["buffer"],
            np.array(
                [s["buffer_pos"], s["has_uint32"], s["uinteger"]], dtype=np.uint64
            ),
        ]
    )


def _unpack_rng_state(rng: np.random.Generator, row: np.ndarray) -> None:
    row = np.asarray(row, dtype=np.uint64)
    rng.bit_generator.state = {
        "bit_generator": "Philox",
        "state": {"counter": row[0:4].copy(), "key": row[4:6].copy()},
        "buffer": row[6:10].copy(),
        "buffer_pos": int(row[10]),
        "has_uint32": int(row[11]),
        "uinteger": int(row[12]),
    }


# -------------------------------------------------------------------- scalar


class Env:
    """Single-robot environment: a batch of one without auto-reset.

    Stepping after termination is rejected until `reset` is called, and the
    trajectory is bitwise identical to row `index` of any `VecEnv` sharing
    the same master seed.
    """

    def __init__(
        self,
        config: Config | None = None,
        seed: int | None = None,
        index: int = 0,
        fixed_randomization: Randomization | None = None,
        external_commands: bool = False,
    ):
        self._vec = VecEnv(
            config,
            num_envs=1,
            seed=seed,
            env_offset=index,
            auto_reset=False,
            fixed_randomization=fixed_randomization,
            external_commands=external_commands,
        )

    @property
    def cfg(self) -> Config:
        return self._vec.cfg

    @property
    def vec(self) -> VecEnv:
        return self._vec

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        obs_s, obs_t = self._vec.reset(seed)
        return obs_s[0], obs_t[0]

    def step(self, action: np.ndarray) -> StepResult:
        a = np.asarray(action, dtype=np.float64).reshape(1, N_ACTIONS)
        r = self._vec.step(a)
        info = {
            "power": float(r.info["power"][0]),
            "contacts": r.info["contacts"][0],
        }
        return StepResult(
            obs_student=r.obs_student[0],
            obs_teacher=r.obs_teacher[0],
            reward=float(r.reward[0]),
            reward_terms={k: float(v[0]) for k, v in r.reward_terms.items()},
            done=bool(r.done[0]),
            done_reason=DONE_REASONS[int(r.done_reason[0])],
            info=info,
        )

    @property
    def state(self) -> SimState:
        return self._vec.get_state(0)

    def set_state(self, state: SimState) -> None:
        self._vec.set_state(0, state)

    @property
    def command(self) -> Command:
        return Command.from_array(self._vec.commands[0])

    def set_command(self, command: Command) -> None:
        self._vec.set_commands(command.as_array()[None, :])
