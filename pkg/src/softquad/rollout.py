"""On-policy experience collection.

The teacher acts on privileged observations while both observation streams
are recorded, so the student can later be distilled from the same batch
without touching the environment again.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import REWARD_TERMS
from .dynamics import SimFault
from .env import VecEnv
from .policy import Critic, GaussianPolicy


@dataclass
class RolloutBuffer:
    """Fixed-horizon transition storage, laid out (env, step, feature)."""

    obs_student: np.ndarray  # (N, T, ds)
    obs_teacher: np.ndarray  # (N, T, dt)
    actions: np.ndarray  # (N, T, na)
    log_probs: np.ndarray  # (N, T)
    rewards: np.ndarray  # (N, T) float64
    values: np.ndarray  # (N, T) float64
    dones: np.ndarray  # (N, T) bool
    done_reasons: np.ndarray  # (N, T) uint8
    bootstrap_values: np.ndarray  # (N,) critic value of the post-rollout obs
    reward_term_means: dict[str, float]

    @property
    def num_envs(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    @property
    def num_transitions(self) -> int:
        return self.rewards.shape[0] * self.rewards.shape[1]


def collect_rollout(
    env: VecEnv,
    teacher: GaussianPolicy,
    critic: Critic,
    rng: np.random.Generator,
    horizon: int = 24,
    iteration: int = 0,
) -> RolloutBuffer:
    """Run every environment `horizon` control steps under the teacher.

    Episode boundaries are handled by the environment's auto-reset; rows
    that finish mid-rollout contribute their reset observations to the next
    step, keeping the buffer fully populated.
    """
    n = env.n
    dtype = teacher.net.dtype
    obs_s, obs_t = env.current_observations()

    ds = obs_s.shape[1]
    dt_dim = obs_t.shape[1]
    na = teacher.action_dim
    buf = RolloutBuffer(
        obs_student=np.empty((n, horizon, ds), dtype=dtype),
        obs_teacher=np.empty((n, horizon, dt_dim), dtype=dtype),
        actions=np.empty((n, horizon, na), dtype=dtype),
        log_probs=np.empty((n, horizon), dtype=dtype),
        rewards=np.empty((n, horizon)),
        values=np.empty((n, horizon)),
        dones=np.empty((n, horizon), dtype=bool),
        done_reasons=np.empty((n, horizon), dtype=np.uint8),
        bootstrap_values=np.empty(n),
        reward_term_means={},
    )
    term_sums = {name: 0.0 for name in REWARD_TERMS}

    for t in range(horizon):
        ot = obs_t.astype(dtype)
        buf.obs_student[:, t] = obs_s
        buf.obs_teacher[:, t] = ot
        action, log_prob = teacher.sample(ot, rng)
        buf.actions[:, t] = action
        buf.log_probs[:, t] = log_prob
        buf.values[:, t] = critic.value(ot)
        try:
            res = env.step(action)
        except SimFault as exc:
            raise SimFault(
                f"iteration {iteration}, rollout step {t}: {exc}"
            ) from exc
        buf.rewards[:, t] = res.reward
        buf.dones[:, t] = res.done
        buf.done_reasons[:, t] = res.done_reason
        for name in REWARD_TERMS:
            term_sums[name] += float(res.reward_terms[name].mean())
        obs_s, obs_t = res.obs_student, res.obs_teacher

    buf.bootstrap_values[:] = critic.value(obs_t.astype(dtype))
    buf.reward_term_means = {k: v / horizon for k, v in term_sums.items()}
    return buf
