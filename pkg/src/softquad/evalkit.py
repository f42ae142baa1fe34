"""Scripted evaluation rollouts and trajectory analysis.

Achieved speeds come from ordinary least squares on displacement-time
curves (the first two seconds of each segment are discarded as transient),
and cost of transport is mean power / (m g v) with mean speed taken as
path length over duration. For pivot segments the angular speed stands in
for v.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rotation as rot
from .config import Config
from .env import Command, Env, Randomization
from .morphology import ComplianceParams
from .policy import GaussianPolicy

COLUMNS = (
    "t", "x", "y", "z", "roll", "pitch", "yaw", "vx", "vy", "wz",
    "cmd_vx", "cmd_vy", "cmd_wz", "cmd_h", "power", "c1", "c2", "c3", "c4",
)

CSV_HEADER = ",".join(COLUMNS)

REPORT_HEADER = "script,segment,axis,cmd_vx,cmd_vy,cmd_wz,commanded,achieved,r2,rel_err,cot"


@dataclass
class TrajectoryLog:
    """Control-rate (25 Hz) trajectory rows plus per-trial metadata."""

    data: np.ndarray  # (rows, len(COLUMNS))
    metadata: dict

    def column(self, name: str) -> np.ndarray:
        return self.data[:, COLUMNS.index(name)]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    def validate(self) -> None:
        if self.data.ndim != 2 or self.data.shape[1] != len(COLUMNS):
            raise ValueError(f"log needs {len(COLUMNS)} columns, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("log contains non-finite values")
        t = self.column("t")
        if t.shape[0] >= 2:
            dt = np.diff(t)
            if np.any(dt <= 0):
                raise ValueError("log time must be strictly increasing")
            if np.max(np.abs(dt - dt[0])) > 1e-9:
                raise ValueError("log rows must be uniformly spaced")


@dataclass(frozen=True)
class CommandScript:
    """Ordered piecewise-constant command schedule."""

    name: str
    schedule: tuple[tuple[float, Command], ...]  # (start_s, command)
    duration_s: float

    def validate(self) -> None:
        starts = [s for s, _ in self.schedule]
        if starts != sorted(starts) or len(set(starts)) != len(starts):
            raise ValueError(f"script {self.name}: segment starts must be ordered")
        if starts and starts[-1] >= self.duration_s:
            raise ValueError(f"script {self.name}: last segment starts past the end")

    def command_at(self, t: float) -> Command:
        active = Command(0.0, 0.0, 0.0, self.schedule[0][1].h_ref)
        for start, cmd in self.schedule:
            if t >= start:
                active = cmd
            else:
                break
        return active

    @property
    def segments(self) -> int:
        return len(self.schedule)


def command_scripts(cfg: Config | None = None) -> dict[str, CommandScript]:
    """The named test protocols, scaled to the command envelope.

    Fractions are of the maximum commanded speed per axis, so the ladder's
    0.5/0.75/1.0 levels mean 50/75/100% of the fastest commanded gait.
    """
    cfg = cfg or Config()
    vxm = cfg.commands.vx_range[1]
    vym = cfg.commands.vy_range[1]
    wzm = cfg.commands.wz_range[1]
    h0 = 0.5 * (cfg.commands.h_range[0] + cfg.commands.h_range[1])

    def seg_script(name, triples, seg_s):
        sched = tuple(
            (i * seg_s, Command(vx, vy, wz, h0))
            for i, (vx, vy, wz) in enumerate(triples)
        )
        return CommandScript(name, sched, seg_s * len(triples))

    ladder = [(f * vxm, 0.0, 0.0) for f in (0.5, 0.75, 1.0, -0.5, -0.75, -1.0)]
    lateral = [(0.0, 0.75 * vym, 0.0), (0.0, -0.75 * vym, 0.0)]
    pivot = [(0.0, 0.0, wzm), (0.0, 0.0, -wzm)]
    grid = [
        (fx * vxm, fy * vym, 0.0)
        for fx in (-1.0, -0.5, 0.0, 0.5, 1.0)
        for fy in (-1.0, -0.5, 0.0, 0.5, 1.0)
    ]
    lobe_s = 12.0
    eight = [(0.5 * vxm, 0.0, wzm if i % 2 == 0 else -wzm) for i in range(8)]

    scripts = {
        "forward_ladder": seg_script("forward_ladder", ladder, 20.0),
        "lateral": seg_script("lateral", lateral, 20.0),
        "pivot": seg_script("pivot", pivot, 20.0),
        "omni_grid": seg_script("omni_grid", grid, 8.0),
        "figure_eight": seg_script("figure_eight", eight, lobe_s),
    }
    for s in scripts.values():
        s.validate()
    return scripts


def make_scripted_env(
    cfg: Config | None,
    seed: int,
    noise_level: float,
    horizon_s: float,
    compliance: ComplianceParams | None = None,
) -> Env:
    """Single environment pinned for externally scripted commands.

    Offline rollouts and the live serving loop both build their environment
    here, so a command sequence replayed over either transport drives the
    exact same compute path.
    """
    cfg = cfg or Config()
    cfg = dataclasses.replace(
        cfg,
        noise=dataclasses.replace(cfg.noise, level=noise_level),
        env=dataclasses.replace(cfg.env, episode_length_s=horizon_s),
    )
    rand = Randomization.nominal()
    if compliance is not None:
        rand = dataclasses.replace(rand, compliance=compliance)
    return Env(cfg, seed=seed, fixed_randomization=rand, external_commands=True)


def rollout_scripted(
    policy: GaussianPolicy,
    script: CommandScript,
    cfg: Config | None = None,
    compliance: ComplianceParams | None = None,
    seed: int = 0,
    duration_s: float | None = None,
    noise_level: float = 0.0,
) -> TrajectoryLog:
    """Deterministic rollout of the student policy under a command script.

    The robot runs one episode on a pinned morphology (nominal unless
    `compliance` is given) with scripted commands; rows are logged every
    control step. Early termination truncates the log and is recorded in
    the metadata instead of raising.
    """
    duration = float(duration_s if duration_s is not None else script.duration_s)
    env = make_scripted_env(cfg, seed, noise_level, duration + 10.0, compliance)
    rand = Randomization.nominal()
    if compliance is not None:
        rand = dataclasses.replace(rand, compliance=compliance)
    obs_s, _ = env.reset()

    dt = env.vec.control_dt
    steps = int(round(duration / dt))
    data = np.empty((steps, len(COLUMNS)))
    done_reason = ""
    filled = 0
    for i in range(steps):
        cmd = script.command_at(i * dt)
        env.set_command(cmd)
        action = policy.mean(obs_s[None].astype(policy.net.dtype))[0]
        res = env.step(action)
        st = env.state
        rpy = rot.euler_from_quat(st.base_orientation)
        v_body = rot.quat_rotate_inverse(st.base_orientation, st.base_linvel)
        data[i] = (
            st.time,
            *st.base_position,
            *rpy,
            v_body[0],
            v_body[1],
            st.base_angvel[2],
            cmd.vx,
            cmd.vy,
            cmd.wz,
            cmd.h_ref,
            res.info["power"],
            *res.info["contacts"].astype(np.float64),
        )
        filled = i + 1
        obs_s = res.obs_student
        if res.done:
            done_reason = res.done_reason
            break

    log = TrajectoryLog(
        data=data[:filled],
        metadata={
            "script": script.name,
            "seed": seed,
            "noise_level": noise_level,
            "ell_scale": list(rand.compliance.ell_scale),
            "com_shift_frac": list(rand.compliance.com_shift_frac),
            "total_mass": float(env.vec.batch.mass[0].sum()),
            "done_reason": done_reason,
        },
    )
    log.validate()
    return log


# ------------------------------------------------------------------ analysis


def velocity_regression(
    log: TrajectoryLog, axis: str, window: tuple[float, float]
) -> tuple[float, float, float]:
    """OLS of displacement (or unwrapped yaw) against time in the window.

    Returns (slope, intercept, r_squared).
    """
    if axis == "x":
        y = log.column("x")
    elif axis == "y":
        y = log.column("y")
    elif axis == "yaw":
        y = np.unwrap(log.column("yaw"))
    else:
        raise ValueError(f"axis must be x, y, or yaw, got {axis!r}")
    t = log.column("t")
    lo, hi = window
    mask = (t >= lo) & (t <= hi)
    t = t[mask]
    y = y[mask]
    if t.shape[0] < 2:
        raise ValueError(f"window {window} holds {t.shape[0]} rows, need >= 2")
    tc = t - t.mean()
    stt = float(tc @ tc)
    if stt == 0.0:
        raise ValueError("window has no time spread")
    slope = float(tc @ (y - y.mean())) / stt
    intercept = float(y.mean() - slope * t.mean())
    resid = y - (slope * t + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float((y - y.mean()) @ (y - y.mean()))
    r2 = 1.0 if ss_tot == 0.0 and ss_res < 1e-24 else 1.0 - ss_res / max(ss_tot, 1e-300)
    return slope, intercept, r2


def relative_error(achieved_slope: float, reference_slope: float) -> float:
    if reference_slope == 0.0:
        raise ValueError("relative error undefined for zero reference")
    return abs(achieved_slope - reference_slope) / abs(reference_slope)


def cost_of_transport(
    log: TrajectoryLog, total_mass: float, g: float = 9.81, angular: bool = False
) -> float:
    """Dimensionless COT = mean power / (mass * g * mean speed).

    Mean speed is planar path length over duration; with `angular` the
    accumulated yaw angle replaces path length (pivot trials).
    """
    if total_mass <= 0.0:
        raise ValueError("total_mass must be > 0")
    t = log.column("t")
    if t.shape[0] < 2:
        raise ValueError("log too short for COT")
    duration = float(t[-1] - t[0])
    if angular:
        path = float(np.abs(np.diff(np.unwrap(log.column("yaw")))).sum())
    else:
        path = float(
            np.hypot(np.diff(log.column("x")), np.diff(log.column("y"))).sum()
        )
    if path == 0.0:
        raise ValueError(
            "zero displacement over the log; COT needs nonzero mean speed"
        )
    mean_speed = path / duration
    mean_power = float(log.column("power").mean())
    return mean_power / (total_mass * g * mean_speed)


def analyze_log(
    log: TrajectoryLog, cfg: Config | None = None, settle_s: float = 2.0
) -> list[dict]:
    """Per-segment tracking report from a scripted-rollout log.

    Segments are recovered from command changes. For each: the dominant
    commanded axis, the OLS slope after the transient window, the relative
    error against the command, and the segment's COT (angular for pivots).
    """
    cfg = cfg or Config()
    cmd_cols = log.data[:, [COLUMNS.index(c) for c in ("cmd_vx", "cmd_vy", "cmd_wz", "cmd_h")]]
    if log.rows == 0:
        return []
    changes = np.any(np.diff(cmd_cols, axis=0) != 0.0, axis=1)
    bounds = [0] + (np.flatnonzero(changes) + 1).tolist() + [log.rows]
    envelope = {
        "x": max(abs(cfg.commands.vx_range[0]), cfg.commands.vx_range[1]),
        "y": max(abs(cfg.commands.vy_range[0]), cfg.commands.vy_range[1]),
        "yaw": max(abs(cfg.commands.wz_range[0]), cfg.commands.wz_range[1]),
    }
    mass = float(log.metadata.get("total_mass", 0.0))
    t = log.column("t")
    rows = []
    for k in range(len(bounds) - 1):
        a, b = bounds[k], bounds[k + 1]
        seg = TrajectoryLog(log.data[a:b], log.metadata)
        cvx, cvy, cwz = cmd_cols[a, 0], cmd_cols[a, 1], cmd_cols[a, 2]
        fractions = {
            "x": abs(cvx) / envelope["x"],
            "y": abs(cvy) / envelope["y"],
            "yaw": abs(cwz) / envelope["yaw"],
        }
        axis = max(fractions, key=fractions.get)
        commanded = {"x": cvx, "y": cvy, "yaw": cwz}[axis]
        window = (t[a] + settle_s, t[b - 1])
        try:
            slope, _, r2 = velocity_regression(seg, axis, window)
        except ValueError:
            slope, r2 = float("nan"), float("nan")
        try:
            rel = relative_error(slope, commanded) if np.isfinite(slope) else float("nan")
        except ValueError:
            rel = float("nan")
        try:
            cot = cost_of_transport(seg, mass, angular=axis == "yaw") if mass > 0 else float("nan")
        except ValueError:
            cot = float("nan")
        rows.append(
            {
                "script": log.metadata.get("script", ""),
                "segment": k,
                "axis": axis,
                "cmd_vx": float(cvx),
                "cmd_vy": float(cvy),
                "cmd_wz": float(cwz),
                "commanded": float(commanded),
                "achieved": slope,
                "r2": r2,
                "rel_err": rel,
                "cot": cot,
            }
        )
    return rows


def write_report(rows: list[dict], path: Path | str) -> None:
    names = REPORT_HEADER.split(",")
    with open(path, "w") as f:
        f.write(REPORT_HEADER + "\n")
        for row in rows:
            f.write(",".join(_num(row[n]) if n not in ("script", "axis") else str(row[n]) for n in names) + "\n")


# --------------------------------------------------------------------- files


def _num(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


def export_log(log: TrajectoryLog, path: Path | str, format: str = "csv") -> None:
    """Write the log losslessly enough to round-trip byte-identically.

    CSV: '# key=<json>' metadata comments (sorted), the fixed header, then
    rows at 9 significant digits with '\\n' endings. JSON: one object
    matching the shipped schema.
    """
    path = Path(path)
    if format == "csv":
        lines = [f"# {k}={json.dumps(log.metadata[k], sort_keys=True)}" for k in sorted(log.metadata)]
        lines.append(CSV_HEADER)
        for row in log.data:
            lines.append(",".join(_num(v) for v in row))
        path.write_text("\n".join(lines) + "\n")
    elif format == "json":
        obj = {
            "metadata": log.metadata,
            "columns": list(COLUMNS),
            "rows": [[float(v) for v in row] for row in log.data],
        }
        path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    else:
        raise ValueError(f"format must be csv or json, got {format!r}")


def load_log(path: Path | str, format: str | None = None) -> TrajectoryLog:
    path = Path(path)
    fmt = format or ("json" if path.suffix == ".json" else "csv")
    text = path.read_text()
    if fmt == "json":
        obj = json.loads(text)
        if obj.get("columns") != list(COLUMNS):
            raise ValueError(f"{path}: unexpected columns {obj.get('columns')}")
        data = np.array(obj["rows"], dtype=np.float64).reshape(-1, len(COLUMNS))
        return TrajectoryLog(data=data, metadata=obj["metadata"])
    metadata = {}
    rows = []
    header_seen = False
    for line in text.splitlines():
        if line.startswith("# "):
            key, _, raw = line[2:].partition("=")
            metadata[key] = json.loads(raw)
        elif not header_seen:
            if line != CSV_HEADER:
                raise ValueError(f"{path}: bad header {line!r}")
            header_seen = True
        elif line:
            rows.append([float(v) for v in line.split(",")])
    data = np.array(rows, dtype=np.float64).reshape(-1, len(COLUMNS))
    return TrajectoryLog(data=data, metadata=metadata)
