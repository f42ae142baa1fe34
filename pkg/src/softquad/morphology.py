"""Quadruped model definition and surrogate compliance parameterization.

Soft-limb deformation is represented entirely by two indirect variables per
limb: an effective-limb-length scale applied to the distal segment and a
signed center-of-mass shift along the limb axis. `apply_compliance` rewrites a
nominal `MorphologySpec` accordingly; mass never changes (deformation, not
amputation).

All spec types use plain tuples so equality is exact and value-semantic; the
simulation layer compiles them to arrays separately.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from softquad.config import ConfigError, ModelConfig, RandomizationConfig

# the ranges container doubles as the sampling interface
RandomizationRanges = RandomizationConfig

LIMB_NAMES = ("fl", "fr", "rl", "rr")
JOINT_NAMES_PER_LIMB = ("yaw", "roll", "pitch")
N_LIMBS = 4
N_JOINTS = 12

Vec3 = tuple[float, float, float]
Mat3 = tuple[Vec3, Vec3, Vec3]


def _diag3(a: float, b: float, c: float) -> Mat3:
    return ((a, 0.0, 0.0), (0.0, b, 0.0), (0.0, 0.0, c))


def _scale_mat3(m: Mat3, s: float) -> Mat3:
    return tuple(tuple(x * s for x in row) for row in m)  # type: ignore[return-value]


@dataclass(frozen=True)
class LinkSpec:
    name: str
    length: float  # m, along the link's long axis
    radius_or_halfextents: float | Vec3  # cylinder radius or box half-extents
    mass: float  # kg
    com_offset: Vec3  # m, in the link frame (frame origin at the parent joint)
    inertia: Mat3  # kg*m^2 about the CoM, link frame

    def validate(self) -> None:
        if self.mass <= 0.0:
            raise ConfigError(f"link.{self.name}.mass", "must be > 0")
        if self.length <= 0.0:
            raise ConfigError(f"link.{self.name}.length", "must be > 0")
        ine = np.array(self.inertia)
        if not np.allclose(ine, ine.T):
            raise ConfigError(f"link.{self.name}.inertia", "must be symmetric")
        if np.any(np.linalg.eigvalsh(ine) <= 0.0):
            raise ConfigError(f"link.{self.name}.inertia", "must be positive definite")


@dataclass(frozen=True)
class JointSpec:
    name: str
    parent: str
    child: str
    axis: Vec3  # unit, in the parent frame
    origin: Vec3  # m, translation parent frame -> joint pivot
    actuated: bool
    angle_limits: tuple[float, float]  # rad
    torque_limit: float  # N*m
    nominal_kp: float  # N*m/rad
    nominal_kd: float  # N*m*s/rad

    def validate(self) -> None:
        if abs(float(np.linalg.norm(self.axis)) - 1.0) > 1e-9:
            raise ConfigError(f"joint.{self.name}.axis", "must be unit length")
        if self.angle_limits[0] >= self.angle_limits[1]:
            raise ConfigError(f"joint.{self.name}.angle_limits", "min must be < max")
        if self.torque_limit <= 0.0:
            raise ConfigError(f"joint.{self.name}.torque_limit", "must be > 0")


@dataclass(frozen=True)
class ComplianceParams:
    """The surrogate variables: per-limb length scale and CoM shift.

    `com_shift_frac` is a signed fraction of the (scaled) distal length about
    its midpoint; positive values move the CoM toward the tip.
    """

    ell_scale: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    com_shift_frac: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def validate(self, ranges: RandomizationRanges) -> None:
        lo, hi = ranges.ell_scale_range
        for i, e in enumerate(self.ell_scale):
            if not lo <= e <= hi:
                raise ConfigError(f"compliance.ell_scale[{i}]", f"{e} outside [{lo}, {hi}]")
        lo, hi = ranges.com_shift_range
        for i, s in enumerate(self.com_shift_frac):
            if not lo <= s <= hi:
                raise ConfigError(f"compliance.com_shift_frac[{i}]", f"{s} outside [{lo}, {hi}]")

    def to_json_dict(self) -> dict:
        return {"ell_scale": list(self.ell_scale), "com_shift_frac": list(self.com_shift_frac)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "ComplianceParams":
        return cls(tuple(d["ell_scale"]), tuple(d["com_shift_frac"]))


IDENTITY_COMPLIANCE = ComplianceParams()


@dataclass(frozen=True)
class MorphologySpec:
    """Floating box base plus 4 limbs of (yaw, roll, pitch) chains."""

    base: LinkSpec
    limbs: tuple[tuple[tuple[JointSpec, LinkSpec], ...], ...]  # 4 x 3
    tip_radius: float
    default_pose: tuple[float, ...]  # rad, all 12 joints, kernel order
    actuated_count: int

    def validate(self) -> None:
        if len(self.limbs) != N_LIMBS or any(len(c) != 3 for c in self.limbs):
            raise ConfigError("morphology.limbs", "need 4 limbs x 3 joints")
        self.base.validate()
        n_act = 0
        for chain in self.limbs:
            parent = self.base.name
            for joint, link in chain:
                joint.validate()
                link.validate()
                if joint.parent != parent or joint.child != link.name:
                    raise ConfigError(f"joint.{joint.name}", "broken kinematic chain")
                parent = link.name
                n_act += int(joint.actuated)
        if n_act != self.actuated_count:
            raise ConfigError("morphology.actuated_count", f"{self.actuated_count} != {n_act} actuated joints")
        if self.tip_radius <= 0.0:
            raise ConfigError("morphology.tip_radius", "must be > 0")
        if len(self.default_pose) != N_JOINTS:
            raise ConfigError("morphology.default_pose", "needs 12 entries")

    @property
    def joints(self) -> tuple[JointSpec, ...]:
        """All 12 joints, limb-major (fl yaw, fl roll, fl pitch, fr yaw, ...)."""
        return tuple(j for chain in self.limbs for j, _ in chain)

    @property
    def actuated_indices(self) -> tuple[int, ...]:
        return tuple(i for i, j in enumerate(self.joints) if j.actuated)

    @property
    def total_mass(self) -> float:
        return self.base.mass + sum(l.mass for chain in self.limbs for _, l in chain)

    @property
    def shoulder_drop(self) -> float:
        """Vertical offset from shoulder pivot height down to the base underside."""
        return float(self.base.radius_or_halfextents[2])

    @property
    def nominal_distal_length(self) -> float:
        # identical across limbs in a nominal spec; after compliance this is
        # per-limb, use distal_lengths instead
        return self.limbs[0][2][1].length

    @property
    def distal_lengths(self) -> tuple[float, float, float, float]:
        return tuple(chain[2][1].length for chain in self.limbs)


def _box_inertia(mass: float, half: Vec3) -> Mat3:
    hx, hy, hz = half
    return _diag3(
        mass / 3.0 * (hy * hy + hz * hz),
        mass / 3.0 * (hx * hx + hz * hz),
        mass / 3.0 * (hx * hx + hy * hy),
    )


def _cylinder_inertia_z(mass: float, radius: float, length: float) -> Mat3:
    ixx = mass * (3.0 * radius * radius + length * length) / 12.0
    return _diag3(ixx, ixx, 0.5 * mass * radius * radius)


# limb corner sign pattern (x, y): fl, fr, rl, rr
_CORNER_SIGNS = ((1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0))


def nominal_spec(config: ModelConfig | None = None) -> MorphologySpec:
    """Build the canonical un-deformed quadruped model.

    Shoulder chains sit at the 4 base corners at mid-height: a locked yaw
    joint, a lateral segment to the roll joint, a second lateral segment to
    the pitch joint, then the distal segment pointing straight down with a
    hemispherical tip. Limb mass splits over the segments by nominal length.
    """
    cfg = config or ModelConfig()
    cfg.validate()
    hx, hy, hz = cfg.base_halfextents
    base = LinkSpec(
        name="base",
        length=2.0 * hx,
        radius_or_halfextents=(hx, hy, hz),
        mass=cfg.base_mass,
        com_offset=(0.0, 0.0, 0.0),
        inertia=_box_inertia(cfg.base_mass, (hx, hy, hz)),
    )
    l1, l2, ld = cfg.seg1_length, cfg.seg2_length, cfg.distal_length
    total_len = l1 + l2 + ld
    m1 = cfg.limb_mass * l1 / total_len
    m2 = cfg.limb_mass * l2 / total_len
    m3 = cfg.limb_mass * ld / total_len
    r = cfg.seg_radius

    limbs = []
    for limb, (sx, sy) in zip(LIMB_NAMES, _CORNER_SIGNS):
        seg1 = LinkSpec(
            name=f"{limb}_seg1",
            length=l1,
            radius_or_halfextents=r,
            mass=m1,
            com_offset=(0.0, sy * l1 / 2.0, 0.0),
            inertia=_box_inertia(m1, (r, l1 / 2.0, r)),
        )
        seg2 = LinkSpec(
            name=f"{limb}_seg2",
            length=l2,
            radius_or_halfextents=r,
            mass=m2,
            com_offset=(0.0, sy * l2 / 2.0, 0.0),
            inertia=_box_inertia(m2, (r, l2 / 2.0, r)),
        )
        distal = LinkSpec(
            name=f"{limb}_distal",
            length=ld,
            radius_or_halfextents=cfg.seg_radius,
            mass=m3,
            com_offset=(0.0, 0.0, -ld / 2.0),
            inertia=_cylinder_inertia_z(m3, cfg.seg_radius, ld),
        )
        yaw = JointSpec(
            name=f"{limb}_yaw",
            parent="base",
            child=seg1.name,
            axis=(0.0, 0.0, 1.0),
            origin=(sx * hx, sy * hy, 0.0),
            actuated=not cfg.lock_yaw,
            angle_limits=(-cfg.yaw_limit, cfg.yaw_limit),
            torque_limit=cfg.torque_limit,
            nominal_kp=cfg.kp,
            nominal_kd=cfg.kd,
        )
        roll = JointSpec(
            name=f"{limb}_roll",
            parent=seg1.name,
            child=seg2.name,
            axis=(1.0, 0.0, 0.0),
            origin=(0.0, sy * l1, 0.0),
            actuated=True,
            angle_limits=(-cfg.roll_limit, cfg.roll_limit),
            torque_limit=cfg.torque_limit,
            nominal_kp=cfg.kp,
            nominal_kd=cfg.kd,
        )
        pitch = JointSpec(
            name=f"{limb}_pitch",
            parent=seg2.name,
            child=distal.name,
            axis=(0.0, 1.0, 0.0),
            origin=(0.0, sy * l2, 0.0),
            actuated=True,
            angle_limits=(-cfg.pitch_limit, cfg.pitch_limit),
            torque_limit=cfg.torque_limit,
            nominal_kp=cfg.kp,
            nominal_kd=cfg.kd,
        )
        limbs.append(((yaw, seg1), (roll, seg2), (pitch, distal)))

    spec = MorphologySpec(
        base=base,
        limbs=tuple(limbs),
        tip_radius=cfg.tip_radius,
        # front limbs splay forward, rear backward; |pitch| is the limb
        # angle from vertical that standing_height expects
        default_pose=tuple(
            (-cfg.default_limb_angle if sx > 0 else cfg.default_limb_angle)
            if k == 2
            else 0.0
            for (sx, _sy) in _CORNER_SIGNS
            for k in range(3)
        ),
        actuated_count=sum(1 for chain in limbs for j, _ in chain if j.actuated),
    )
    spec.validate()
    return spec


def apply_compliance(
    spec: MorphologySpec,
    p: ComplianceParams,
    ranges: RandomizationRanges | None = None,
) -> MorphologySpec:
    """Rewrite the distal segments for the given surrogate parameters.

    Per limb: distal length scales by ell, the CoM moves to the shifted
    midpoint of the scaled segment, inertia scales by ell^2 (declared about
    the new CoM), mass stays. Proximal segments and the base are untouched.
    """
    p.validate(ranges or RandomizationRanges())
    limbs = []
    for chain, ell, shift in zip(spec.limbs, p.ell_scale, p.com_shift_frac):
        (yaw, seg1), (roll, seg2), (pitch, distal) = chain
        new_len = distal.length * ell
        new_distal = replace(
            distal,
            length=new_len,
            com_offset=(0.0, 0.0, -new_len * (0.5 + shift)),
            inertia=_scale_mat3(distal.inertia, ell * ell),
        )
        limbs.append(((yaw, seg1), (roll, seg2), (pitch, new_distal)))
    return replace(spec, limbs=tuple(limbs))


def sample_morphologies(
    ranges: RandomizationRanges, count: int, seed: int
) -> list[ComplianceParams]:
    """Uniform iid compliance draws, deterministic in seed."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    ranges.validate()
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    ell = rng.uniform(*ranges.ell_scale_range, size=(count, N_LIMBS))
    shift = rng.uniform(*ranges.com_shift_range, size=(count, N_LIMBS))
    return [
        ComplianceParams(tuple(map(float, ell[i])), tuple(map(float, shift[i])))
        for i in range(count)
    ]


def standing_height(
    spec: MorphologySpec, limb_angle: float, p: ComplianceParams
) -> float:
    """Base-underside height with all tips grounded and a level base.

    Pure forward kinematics: h = mean(ell)*L*cos(angle) + tip_radius - drop,
    where drop is the shoulder-to-underside offset. The limb angle is
    measured from vertical. With per-limb ell the mean is used (a level base
    cannot ground four unequal limbs exactly).
    """
    if not 0.0 <= limb_angle < np.pi / 2.0:
        raise ValueError(f"limb_angle must be in [0, pi/2), got {limb_angle}")
    nominal_l = spec.nominal_distal_length
    limb = float(np.mean(p.ell_scale)) * nominal_l * np.cos(limb_angle)
    return limb + spec.tip_radius - spec.shoulder_drop


def save_morphology_dataset(
    path: str | Path,
    params: Sequence[ComplianceParams],
    ranges: RandomizationRanges,
    seed: int,
) -> None:
    """Write the dataset JSON: header fields plus the parameter records."""
    doc = {
        "schema_version": 1,
        "seed": seed,
        "ranges": {
            "ell_scale_range": list(ranges.ell_scale_range),
            "com_shift_range": list(ranges.com_shift_range),
        },
        "params": [q.to_json_dict() for q in params],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_morphology_dataset(path: str | Path) -> tuple[list[ComplianceParams], dict]:
    doc = json.loads(Path(path).read_text())
    version = doc.get("schema_version")
    if version != 1:
        raise ConfigError("dataset.schema_version", f"unsupported version {version!r}")
    params = [ComplianceParams.from_json_dict(d) for d in doc["params"]]
    header = {k: doc[k] for k in ("schema_version", "seed", "ranges")}
    return params, header
