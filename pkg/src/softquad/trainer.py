"""Training loop: rollouts, advantage estimation, policy optimization,
student distillation, annealing, checkpoints, and a metrics log.

Everything mutable lives in the checkpoint (network parameters, optimizer
moments, the trainer's RNG, and the full vectorized-environment snapshot),
so a resumed run continues the exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointCorruptError, CheckpointVersionError
from .checkpoint import load as checkpoint_load
from .checkpoint import save as checkpoint_save
from .config import REWARD_TERMS, Config, config_from_dict
from .dynamics import SimFault
from .env import N_ACTIONS, VecEnv, _env_rng, _pack_rng_state, _unpack_rng_state
from .policy import Adam, Critic, GaussianPolicy, std_floor_at
from .ppo import TrainingError, adapt_lr, compute_gae, distill_student, ppo_update
from .rollout import collect_rollout

# trainer-owned Philox streams; env rows use streams 0..2
_STREAM_PARAMS = 16
_STREAM_LOOP = 17

METRICS_HEADER = (
    ["iteration", "reward_total"]
    + [f"reward_{t}" for t in REWARD_TERMS]
    + ["policy_loss", "value_loss", "entropy", "approx_kl", "lr", "std_mean",
       "env_steps_per_s"]
)


def _merged_params(teacher: GaussianPolicy, critic: Critic) -> dict[str, np.ndarray]:
    out = {f"actor.{k}": v for k, v in teacher.params().items()}
    out.update({f"critic.{k}": v for k, v in critic.params().items()})
    return out


class Trainer:
    def __init__(self, cfg: Config):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(cfg.train.out_dir)
        seed = cfg.train.seed
        self.env = VecEnv(cfg, num_envs=cfg.train.num_envs, seed=seed)

        ds = cfg.obs_dim_student
        dt = cfg.obs_dim_teacher
        init_rng = _env_rng(seed, _STREAM_PARAMS, 0)
        self.teacher = GaussianPolicy.create(init_rng, dt, N_ACTIONS, cfg.policy)
        self.student = GaussianPolicy.create(init_rng, ds, N_ACTIONS, cfg.policy)
        self.critic = Critic.create(init_rng, dt, cfg.policy)
        self.opt = Adam(_merged_params(self.teacher, self.critic), lr=cfg.ppo.lr_init)
        self.student_opt = Adam(self.student.params(), lr=cfg.train.student_lr)
        self.rng = _env_rng(seed, _STREAM_LOOP, 0)
        self.lr = cfg.ppo.lr_init
        self.iteration = 0

    # -- persistence

    def save_checkpoint(self, path: Path | str) -> None:
        arrays: dict[str, np.ndarray] = {}
        for prefix, obj in (
            ("teacher", self.teacher),
            ("student", self.student),
            ("critic", self.critic),
        ):
            for k, v in obj.params().items():
                arrays[f"{prefix}.{k}"] = v
        for prefix, opt in (("opt", self.opt), ("sopt", self.student_opt)):
            for k, v in opt.state().items():
                arrays[f"{prefix}.{k}"] = v
            arrays[f"{prefix}.t"] = np.array([opt.t], dtype=np.int64)
        arrays["trainer.rng"] = _pack_rng_state(self.rng)
        arrays["trainer.lr"] = np.array([self.lr])
        arrays["trainer.iteration"] = np.array([self.iteration], dtype=np.int64)
        arrays.update(self.env.state_dict())
        meta = {
            "config_hash": self.cfg.compat_hash(),
            "config": self.cfg.to_dict(),
            "iteration": self.iteration,
            "arch": {
                "hidden": list(self.cfg.policy.hidden_sizes),
                "obs_student": self.cfg.obs_dim_student,
                "obs_teacher": self.cfg.obs_dim_teacher,
                "actions": N_ACTIONS,
            },
        }
        checkpoint_save(path, arrays, meta)

    def load_checkpoint(self, path: Path | str) -> None:
        arrays, meta = checkpoint_load(path, expect_config_hash=self.cfg.compat_hash())
        for prefix, obj in (
            ("teacher", self.teacher),
            ("student", self.student),
            ("critic", self.critic),
        ):
            for k, v in obj.params().items():
                stored = arrays[f"{prefix}.{k}"]
                if stored.shape != v.shape:
                    raise CheckpointVersionError(
                        f"architecture mismatch for {prefix}.{k}: "
                        f"checkpoint {stored.shape}, model {v.shape}"
                    )
                v[:] = stored
        for prefix, opt in (("opt", self.opt), ("sopt", self.student_opt)):
            for k in opt.params:
                opt.m[k][:] = arrays[f"{prefix}.m.{k}"]
                opt.v[k][:] = arrays[f"{prefix}.v.{k}"]
            opt.t = int(arrays[f"{prefix}.t"][0])
        _unpack_rng_state(self.rng, arrays["trainer.rng"])
        self.lr = float(arrays["trainer.lr"][0])
        self.iteration = int(arrays["trainer.iteration"][0])
        self.env.load_state_dict(arrays)
        floor = std_floor_at(self.cfg.policy, self.iteration)
        self.teacher.std_floor = floor
        self.student.std_floor = floor

    # -- the loop

    def run(self, resume_from: Path | str | None = None) -> list[dict]:
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        if resume_from is not None:
            self.load_checkpoint(resume_from)
        else:
            self.env.reset()

        metrics_path = self.out / "metrics.csv"
        append = resume_from is not None and metrics_path.exists()
        metrics = metrics_path.open("a" if append else "w")
        if not append:
            metrics.write(",".join(METRICS_HEADER) + "\n")

        history: list[dict] = []
        try:
            for it in range(self.iteration + 1, cfg.train.iterations + 1):
                t0 = time.perf_counter()
                buf = collect_rollout(
                    self.env, self.teacher, self.critic, self.rng,
                    horizon=cfg.ppo.horizon, iteration=it,
                )
                adv, ret = compute_gae(buf, cfg.ppo.gamma, cfg.ppo.lam)
                self.opt.lr = self.lr
                stats = ppo_update(
                    self.teacher, self.critic, self.opt, buf, adv, ret,
                    cfg.ppo, self.rng,
                )
                if cfg.train.distill:
                    flat_s = buf.obs_student.reshape(buf.num_transitions, -1)
                    flat_t = buf.obs_teacher.reshape(buf.num_transitions, -1)
                    stats["distill_loss"] = distill_student(
                        self.student, self.student_opt, flat_s, flat_t, self.teacher
                    )
                self.lr = adapt_lr(
                    self.lr, stats["approx_kl"], cfg.ppo.kl_target,
                    cfg.ppo.lr_min, cfg.ppo.lr_max,
                )
                floor = std_floor_at(cfg.policy, it)
                self.teacher.std_floor = floor
                self.student.std_floor = floor
                self.iteration = it
                elapsed = time.perf_counter() - t0

                row = {
                    "iteration": it,
                    "reward_total": float(buf.rewards.mean()),
                    **{f"reward_{k}": v for k, v in buf.reward_term_means.items()},
                    "policy_loss": stats["policy_loss"],
                    "value_loss": stats["value_loss"],
                    "entropy": stats["entropy"],
                    "approx_kl": stats["approx_kl"],
                    "lr": self.lr,
                    "std_mean": float(self.teacher.std().mean()),
                    "env_steps_per_s": self.env.n * cfg.ppo.horizon / elapsed,
                }
                metrics.write(",".join(_fmt(row[k]) for k in METRICS_HEADER) + "\n")
                metrics.flush()
                history.append(row)
                if it % cfg.train.checkpoint_every == 0:
                    self.save_checkpoint(self.out / f"checkpoint_{it:06d}.ckpt")
        except (TrainingError, SimFault):
            self.save_checkpoint(self.out / "checkpoint_final.ckpt")
            raise
        finally:
            metrics.close()
        self.save_checkpoint(self.out / "checkpoint_final.ckpt")
        return history


def _fmt(v) -> str:
    if isinstance(v, int):
        return str(v)
    return f"{float(v):.10g}"


def train(cfg: Config, resume_from: Path | str | None = None) -> list[dict]:
    """Train per the config; returns the per-iteration metrics history."""
    return Trainer(cfg).run(resume_from=resume_from)


def load_checkpoint(path: Path | str, cfg: Config | None = None) -> dict:
    """Read a checkpoint for inspection (arrays + metadata)."""
    expect = cfg.compat_hash() if cfg is not None else None
    arrays, meta = checkpoint_load(path, expect_config_hash=expect)
    return {"arrays": arrays, "meta": meta, "iteration": meta["iteration"]}


def load_student_policy(
    path: Path | str, cfg: Config | None = None
) -> tuple[GaussianPolicy, Config, dict]:
    """Deployable student policy plus its config, for evaluation and serving.

    With `cfg` given the checkpoint must match its compatibility hash;
    otherwise the config embedded in the checkpoint is used.
    """
    bundle = load_checkpoint(path, cfg)
    meta = bundle["meta"]
    if cfg is None:
        if "config" not in meta:
            raise CheckpointVersionError(
                f"checkpoint {path} lacks an embedded config; pass one explicitly"
            )
        cfg = config_from_dict(meta["config"])
    student = GaussianPolicy.create(
        _env_rng(0, _STREAM_PARAMS, 0), cfg.obs_dim_student, N_ACTIONS, cfg.policy
    )
    arrays = bundle["arrays"]
    for k, v in student.params().items():
        key = f"student.{k}"
        if key not in arrays:
            raise CheckpointCorruptError(f"checkpoint {path} is missing {key}")
        stored = arrays[key]
        if stored.shape != v.shape:
            raise CheckpointVersionError(
                f"architecture mismatch for {key}: "
                f"checkpoint {stored.shape}, model {v.shape}"
            )
        v[:] = stored
    student.std_floor = std_floor_at(cfg.policy, bundle["iteration"])
    return student, cfg, meta
