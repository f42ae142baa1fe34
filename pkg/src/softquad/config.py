"""Configuration tree for the whole pipeline.

Every tunable lives in a frozen dataclass with a default; the committed
``default.toml`` reproduces every default so a config file is only needed to
override. Loading is strict: unknown sections or keys are rejected so typos
cannot silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import importlib.resources
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover - py 3.10 path
    import tomli as tomllib


class ConfigError(ValueError):
    """Raised for malformed, out-of-range, or unknown config content."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config field '{key}': {message}")


def _pair(v: Any, key: str) -> tuple[float, float]:
    try:
        lo, hi = float(v[0]), float(v[1])
    except (TypeError, ValueError, IndexError) as e:
        raise ConfigError(key, f"expected a [min, max] pair, got {v!r}") from e
    if lo > hi:
        raise ConfigError(key, f"min {lo} > max {hi}")
    return lo, hi


@dataclass(frozen=True)
class ModelConfig:
    """Quadruped geometry and nominal actuation constants.

    The base is a box; each limb is two short lateral segments (yaw then roll
    joints) followed by a downward distal segment (pitch joint) whose collision
    shape is a cylinder capped with a hemispherical tip.
    """

    base_halfextents: tuple[float, float, float] = (0.20, 0.15, 0.06)  # m
    base_mass: float = 6.0  # kg
    limb_mass: float = 0.4  # kg, per limb, split over segments by length
    seg1_length: float = 0.06  # m, shoulder yaw->roll offset
    seg2_length: float = 0.06  # m, roll->pitch offset
    distal_length: float = 0.24  # m, pitch joint to tip center, nominal
    seg_radius: float = 0.02  # m, collision radius of proximal segments
    tip_radius: float = 0.02  # m, hemispherical tip
    yaw_limit: float = 0.5  # rad, symmetric
    roll_limit: float = 1.4  # rad, symmetric
    pitch_limit: float = 1.4  # rad, symmetric
    torque_limit: float = 8.0  # N*m per actuated joint
    kp: float = 30.0  # N*m/rad
    kd: float = 0.8  # N*m*s/rad
    lock_yaw: bool = True  # yaw joints held at their initial angle
    default_limb_angle: float = 0.6  # rad from vertical; front pitch -, rear +

    def validate(self) -> None:
        for k in (
            "base_mass",
            "limb_mass",
            "seg1_length",
            "seg2_length",
            "distal_length",
            "seg_radius",
            "tip_radius",
            "torque_limit",
        ):
            if getattr(self, k) <= 0.0:
                raise ConfigError(f"model.{k}", "must be > 0")
        if any(h <= 0.0 for h in self.base_halfextents):
            raise ConfigError("model.base_halfextents", "must be > 0")
        for k in ("yaw_limit", "roll_limit", "pitch_limit"):
            if getattr(self, k) <= 0.0:
                raise ConfigError(f"model.{k}", "must be > 0")
        if self.kp < 0.0 or self.kd < 0.0:
            raise ConfigError("model.kp", "gains must be >= 0")
        if not 0.0 <= self.default_limb_angle < self.pitch_limit:
            raise ConfigError(
                "model.default_limb_angle", "must be in [0, pitch_limit)"
            )


@dataclass(frozen=True)
class PhysicsConfig:
    dt: float = 0.001  # s
    gravity: float = 9.81  # m/s^2, acts along -z
    friction_mu: float = 1.0  # used when randomization is off
    contact_kn: float = 12000.0  # N/m
    contact_cn: float = 150.0  # N*s/m
    friction_vel_eps: float = 1e-3  # m/s, Coulomb regularization

    def validate(self) -> None:
        if self.dt <= 0.0:
            raise ConfigError("physics.dt", "must be > 0")
        if self.contact_kn <= 0.0:
            raise ConfigError("physics.contact_kn", "must be > 0")
        if self.friction_mu < 0.0:
            raise ConfigError("physics.friction_mu", "must be >= 0")
        if self.contact_cn < 0.0:
            raise ConfigError("physics.contact_cn", "must be >= 0")
        if self.friction_vel_eps <= 0.0:
            raise ConfigError("physics.friction_vel_eps", "must be > 0")


@dataclass(frozen=True)
class RandomizationConfig:
    """Per-episode domain randomization ranges."""

    ell_scale_range: tuple[float, float] = (0.5, 1.1)
    com_shift_range: tuple[float, float] = (-0.25, 0.25)  # fraction of length
    base_mass_delta_range: tuple[float, float] = (-1.0, 2.0)  # kg
    friction_range: tuple[float, float] = (0.2, 1.5)
    kp_scale_range: tuple[float, float] = (0.8, 1.2)
    kd_scale_range: tuple[float, float] = (0.8, 1.2)
    motor_offset_range: tuple[float, float] = (-0.05, 0.05)  # rad
    init_joint_jitter: float = 0.1  # rad, uniform half-width

    def validate(self) -> None:
        for k in (
            "ell_scale_range",
            "com_shift_range",
            "base_mass_delta_range",
            "friction_range",
            "kp_scale_range",
            "kd_scale_range",
            "motor_offset_range",
        ):
            lo, hi = getattr(self, k)
            if lo > hi:
                raise ConfigError(f"randomization.{k}", f"min {lo} > max {hi}")
        if self.friction_range[0] <= 0.0:
            raise ConfigError("randomization.friction_range", "must be > 0")
        if self.ell_scale_range[0] <= 0.0:
            raise ConfigError("randomization.ell_scale_range", "must be > 0")
        if self.init_joint_jitter < 0.0:
            raise ConfigError("randomization.init_joint_jitter", "must be >= 0")


@dataclass(frozen=True)
class CommandConfig:
    vx_range: tuple[float, float] = (-0.34, 0.34)  # m/s
    vy_range: tuple[float, float] = (-0.34, 0.34)  # m/s
    wz_range: tuple[float, float] = (-0.41, 0.41)  # rad/s
    h_range: tuple[float, float] = (0.08, 0.22)  # m, base underside height
    resample_interval_s: float = 4.0

    def validate(self) -> None:
        for k in ("vx_range", "vy_range", "wz_range", "h_range"):
            lo, hi = getattr(self, k)
            if lo > hi:
                raise ConfigError(f"commands.{k}", f"min {lo} > max {hi}")
        if self.resample_interval_s <= 0.0:
            raise ConfigError("commands.resample_interval_s", "must be > 0")

    @property
    def max_speed(self) -> float:
        """Physical speed of a normalized +-1.0 vx command."""
        return max(abs(self.vx_range[0]), abs(self.vx_range[1]))

    @property
    def max_yaw_rate(self) -> float:
        return max(abs(self.wz_range[0]), abs(self.wz_range[1]))


@dataclass(frozen=True)
class NoiseConfig:
    """Additive uniform observation noise half-widths (student copy only)."""

    angvel: float = 0.2  # rad/s
    gravity: float = 0.05
    joint_pos: float = 0.01  # rad
    joint_vel: float = 1.5  # rad/s
    height: float = 0.005  # m
    level: float = 1.0  # global multiplier, 0 disables

    def validate(self) -> None:
        for k in ("angvel", "gravity", "joint_pos", "joint_vel", "height", "level"):
            if getattr(self, k) < 0.0:
                raise ConfigError(f"noise.{k}", "must be >= 0")


# positive-coefficient terms; all others are penalties and must be <= 0
_TRACKING_TERMS = ("tracking_lin_vel", "tracking_ang_vel", "feet_air_time")

REWARD_TERMS = (
    "tracking_lin_vel",
    "tracking_ang_vel",
    "base_height",
    "orientation",
    "torques",
    "action_rate",
    "collision",
    "lin_vel_z",
    "ang_vel_xy",
    "feet_air_time",
    "premature_contact",
    "base_pitch",
    "liftoff_vel",
    "joint_symmetry",
    "foot_position",
)


@dataclass(frozen=True)
class RewardConfig:
    w_tracking_lin_vel: float = 1.0
    sigma_lin_vel: float = 0.15  # m/s, tracking kernel width
    w_tracking_ang_vel: float = 0.5
    sigma_ang_vel: float = 0.2  # rad/s
    w_base_height: float = -40.0
    w_orientation: float = -5.0
    w_torques: float = -1e-4
    w_action_rate: float = -0.01
    w_collision: float = -1.0
    w_lin_vel_z: float = -2.0
    w_ang_vel_xy: float = -0.05
    w_feet_air_time: float = 1.0
    air_time_min: float = 0.3  # s
    w_premature_contact: float = -0.5
    premature_vz: float = 0.3  # m/s, touchdown speed threshold
    w_liftoff_vel: float = -0.5
    liftoff_vz: float = 0.5  # m/s
    w_base_pitch: float = -2.0
    w_joint_symmetry: float = -0.2
    w_foot_position: float = -0.5

    def weight(self, term: str) -> float:
        return getattr(self, "w_" + term)

    def validate(self) -> None:
        for term in REWARD_TERMS:
            w = self.weight(term)
            if term in _TRACKING_TERMS:
                if w < 0.0:
                    raise ConfigError(f"reward.w_{term}", "tracking weight must be >= 0")
            elif w > 0.0:
                raise ConfigError(f"reward.w_{term}", "penalty weight must be <= 0")
        for k in ("sigma_lin_vel", "sigma_ang_vel"):
            if getattr(self, k) <= 0.0:
                raise ConfigError(f"reward.{k}", "must be > 0")
        for k in ("air_time_min", "premature_vz", "liftoff_vz"):
            if getattr(self, k) < 0.0:
                raise ConfigError(f"reward.{k}", "must be >= 0")


@dataclass(frozen=True)
class EnvConfig:
    action_scale: float = 0.5  # rad about the default pose
    history_len: int = 2  # past actions in the observation
    episode_length_s: float = 20.0
    decimation: int = 40  # physics substeps per control step
    tip_angle_limit_deg: float = 60.0  # |roll| or |pitch| beyond -> tipped
    settle_time_s: float = 0.5  # per settle round at reset
    settle_budget_s: float = 2.0
    settle_linvel_tol: float = 1e-3  # m/s, quiet stance: settle ends early
    settle_angvel_tol: float = 0.05  # rad/s
    # asymmetric morphologies can wobble or creep passively forever; accept
    # the stance at budget end while the residual motion stays below these
    settle_residual_linvel: float = 0.3  # m/s
    settle_residual_angvel: float = 0.75  # rad/s

    def validate(self) -> None:
        if self.history_len < 0:
            raise ConfigError("env.history_len", "must be >= 0")
        if self.decimation < 1:
            raise ConfigError("env.decimation", "must be >= 1")
        for k in ("action_scale", "episode_length_s", "tip_angle_limit_deg",
                  "settle_time_s", "settle_budget_s"):
            if getattr(self, k) <= 0.0:
                raise ConfigError(f"env.{k}", "must be > 0")
        if self.settle_residual_linvel < self.settle_linvel_tol:
            raise ConfigError("env.settle_residual_linvel",
                              "must be >= settle_linvel_tol")
        if self.settle_residual_angvel < self.settle_angvel_tol:
            raise ConfigError("env.settle_residual_angvel",
                              "must be >= settle_angvel_tol")


@dataclass(frozen=True)
class PolicyConfig:
    hidden_sizes: tuple[int, ...] = (512, 256, 128)
    log_std_init: float = 0.0  # std 1.0
    std_floor_init: float = 1.0
    std_floor_final: float = 0.1
    std_floor_iters: int = 300  # linear anneal horizon

    def validate(self) -> None:
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("policy.hidden_sizes", "need positive layer widths")
        if self.std_floor_final <= 0.0 or self.std_floor_init <= 0.0:
            raise ConfigError("policy.std_floor_final", "floors must be > 0")
        if self.std_floor_iters < 1:
            raise ConfigError("policy.std_floor_iters", "must be >= 1")


@dataclass(frozen=True)
class PpoConfig:
    clip_param: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 5
    minibatches: int = 4
    entropy_coef: float = 0.01
    value_coef: float = 1.0
    max_grad_norm: float = 1.0
    kl_target: float = 0.01
    lr_init: float = 1e-3
    lr_min: float = 1e-5
    lr_max: float = 1e-2
    horizon: int = 24
    kl_mode: str = "adaptive_lr"  # or "penalty" (additive KL loss term)
    kl_penalty_coef: float = 1.0  # only used in penalty mode

    def validate(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("ppo.gamma", "must be in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("ppo.lam", "must be in [0, 1]")
        if self.clip_param <= 0.0:
            raise ConfigError("ppo.clip_param", "must be > 0")
        if self.epochs < 1 or self.minibatches < 1 or self.horizon < 1:
            raise ConfigError("ppo.epochs", "epochs/minibatches/horizon must be >= 1")
        if not 0.0 < self.lr_min <= self.lr_init <= self.lr_max:
            raise ConfigError("ppo.lr_init", "need lr_min <= lr_init <= lr_max")
        if self.kl_mode not in ("adaptive_lr", "penalty"):
            raise ConfigError("ppo.kl_mode", "must be 'adaptive_lr' or 'penalty'")


@dataclass(frozen=True)
class TrainConfig:
    num_envs: int = 256
    iterations: int = 200
    seed: int = 0
    checkpoint_every: int = 100
    out_dir: str = "runs/default"
    student_lr: float = 1e-3
    distill: bool = True

    def validate(self) -> None:
        if self.num_envs < 1 or self.iterations < 1:
            raise ConfigError("train.num_envs", "num_envs/iterations must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("train.checkpoint_every", "must be >= 1")
        if self.student_lr <= 0.0:
            raise ConfigError("train.student_lr", "must be > 0")


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig)
    commands: CommandConfig = field(default_factory=CommandConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        for section in dataclasses.fields(self):
            getattr(self, section.name).validate()

    def to_dict(self) -> dict:
        return _as_plain(dataclasses.asdict(self))

    def hash(self) -> str:
        """Content hash, stable under key reordering in the source file."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def compat_hash(self) -> str:
        """Hash of everything a resumed run must share with the checkpoint.

        Output location and stop/cadence controls are excluded: extending a
        run or redirecting its artifacts does not change the trajectory.
        """
        d = self.to_dict()
        for key in ("out_dir", "iterations", "checkpoint_every"):
            d["train"].pop(key, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # observation layout, derived
    @property
    def obs_dim_student(self) -> int:
        # angvel 3 + gravity 3 + joint pos 8 + joint vel 8 + height 1
        # + command 4 + action history
        return 3 + 3 + 8 + 8 + 1 + 4 + 8 * self.env.history_len

    @property
    def obs_dim_teacher(self) -> int:
        # + linvel 3, friction 1, ell 4, com shift 4, mass delta 1,
        #   tip contacts 4, gain scales 2
        return self.obs_dim_student + 19


def _as_plain(x: Any) -> Any:
    if isinstance(x, dict):
        return {k: _as_plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_as_plain(v) for v in x]
    return x


_SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "physics": PhysicsConfig,
    "randomization": RandomizationConfig,
    "commands": CommandConfig,
    "noise": NoiseConfig,
    "reward": RewardConfig,
    "env": EnvConfig,
    "policy": PolicyConfig,
    "ppo": PpoConfig,
    "train": TrainConfig,
}


def _build_section(name: str, cls: type, table: dict) -> Any:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown key")
        if isinstance(fields[key].default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name}.{key}", f"expected an array, got {value!r}")
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(name, str(e)) from e


def config_from_dict(data: dict) -> Config:
    sections = {}
    for name, table in data.items():
        if name not in _SECTIONS:
            raise ConfigError(name, "unknown section")
        if not isinstance(table, dict):
            raise ConfigError(name, "expected a table")
        sections[name] = _build_section(name, _SECTIONS[name], table)
    cfg = Config(**sections)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None = None) -> Config:
    """Load a TOML (or JSON) config file; None loads the packaged defaults."""
    if path is None:
        ref = importlib.resources.files("softquad").joinpath("default.toml")
        data = tomllib.loads(ref.read_text())
        return config_from_dict(data)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(str(path), f"TOML parse error: {e}") from e
    return config_from_dict(data)
