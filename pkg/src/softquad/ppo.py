"""Clipped-surrogate policy optimization on hand-rolled networks.

All gradients are assembled explicitly from the chain rule through the
Gaussian log-density; there is no autodiff anywhere in the pipeline, which
keeps the update bitwise reproducible across runs and platforms.
"""

from __future__ import annotations

import numpy as np

from .config import PpoConfig
from .policy import Adam, Critic, GaussianPolicy, clip_grad_norm
from .rollout import RolloutBuffer


class TrainingError(RuntimeError):
    """An update produced unusable numbers; the iteration must abort."""


def compute_gae(
    buffer: RolloutBuffer, gamma: float, lam: float, normalize: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over the rollout, in float64.

        delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
        A_t     = delta_t + gamma * lam * (1 - done_t) * A_{t+1}

    Returns (advantages, returns) shaped like rewards; returns are computed
    from the raw advantages before any normalization.
    """
    rewards = np.asarray(buffer.rewards, dtype=np.float64)
    values = np.asarray(buffer.values, dtype=np.float64)
    not_done = 1.0 - buffer.dones.astype(np.float64)
    horizon = buffer.horizon

    adv = np.zeros_like(rewards)
    next_value = np.asarray(buffer.bootstrap_values, dtype=np.float64)
    carry = np.zeros(buffer.num_envs)
    for t in range(horizon - 1, -1, -1):
        delta = rewards[:, t] + gamma * next_value * not_done[:, t] - values[:, t]
        carry = delta + gamma * lam * not_done[:, t] * carry
        adv[:, t] = carry
        next_value = values[:, t]
    returns = adv + values
    if normalize:
        adv = normalize_advantages(adv)
    return adv, returns


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance across the whole batch (all envs, all steps)."""
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def clipped_surrogate(
    ratio: np.ndarray, adv: np.ndarray, clip: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample pessimistic surrogate and its gradient w.r.t. log pi_new.

    loss_i = -min(rho_i * A_i, clip(rho_i, 1 - c, 1 + c) * A_i). Where the
    clipped branch is strictly smaller the sample is saturated and carries
    no policy gradient; otherwise d loss / d log pi = -rho * A (since
    d rho / d log pi = rho).
    """
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    raw = ratio * adv
    loss = -np.minimum(raw, clipped)
    active = raw <= clipped
    grad_logp = -(ratio * adv) * active
    return loss, grad_logp


def adapt_lr(
    lr: float,
    approx_kl: float,
    kl_target: float,
    lr_min: float = 1e-5,
    lr_max: float = 1e-2,
) -> float:
    """KL-driven stepsize control: shrink when the update overshoots the
    trust region, grow when it barely moves."""
    if approx_kl > 2.0 * kl_target:
        lr = lr / 1.5
    elif approx_kl < 0.5 * kl_target:
        lr = lr * 1.5
    return float(min(max(lr, lr_min), lr_max))


def ppo_update(
    teacher: GaussianPolicy,
    critic: Critic,
    optimizer: Adam,
    buffer: RolloutBuffer,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: PpoConfig,
    rng: np.random.Generator,
) -> dict:
    """Epochs of shuffled minibatch updates on actor and critic jointly.

    The optimizer owns the merged parameter dict {actor.*, critic.*}; one
    global gradient-norm clip covers both networks since they share a loss.
    """
    dtype = teacher.net.dtype
    obs = buffer.obs_teacher.reshape(buffer.num_transitions, -1)
    actions = buffer.actions.reshape(buffer.num_transitions, -1)
    logp_old = buffer.log_probs.reshape(-1).astype(dtype)
    adv = np.asarray(advantages, dtype=dtype).reshape(-1)
    ret = np.asarray(returns, dtype=dtype).reshape(-1)
    if not (np.all(np.isfinite(adv)) and np.all(np.isfinite(ret))):
        raise TrainingError("non-finite advantages or returns entering update")

    n_actions = teacher.action_dim
    policy_losses: list[float] = []
    value_losses: list[float] = []
    kl_epochs: list[float] = []

    for _epoch in range(cfg.epochs):
        perm = rng.permutation(buffer.num_transitions)
        kl_batches: list[float] = []
        for mb in np.array_split(perm, cfg.minibatches):
            b = mb.shape[0]
            mu, cache = teacher.net.forward(obs[mb])
            sd = teacher.std()
            u = (actions[mb] - mu) / sd
            logp_new = (-0.5 * u * u - np.log(sd) - 0.5 * np.log(2.0 * np.pi)).sum(
                axis=-1
            )
            ratio = np.exp(logp_new - logp_old[mb])
            loss_vec, grad_logp = clipped_surrogate(ratio, adv[mb], cfg.clip_param)
            policy_loss = float(loss_vec.mean())

            v, vcache = critic.net.forward(obs[mb])
            v = v[:, 0]
            verr = v - ret[mb]
            value_loss = float((verr * verr).mean())
            entropy = teacher.entropy()
            kl = float(np.mean(logp_old[mb] - logp_new))
            kl_batches.append(kl)

            total = (
                policy_loss
                + cfg.value_coef * value_loss
                - cfg.entropy_coef * entropy
            )
            if cfg.kl_mode == "penalty":
                total += cfg.kl_penalty_coef * kl
            if not np.isfinite(total):
                raise TrainingError(
                    "non-finite loss: "
                    f"policy={policy_loss}, value={value_loss}, "
                    f"entropy={entropy}, kl={kl}, ratio range "
                    f"[{np.min(ratio)}, {np.max(ratio)}]"
                )
            policy_losses.append(policy_loss)
            value_losses.append(value_loss)

            # chain rule: d loss / d logp flows into mean and log_std
            g_logp = grad_logp / b
            if cfg.kl_mode == "penalty":
                g_logp = g_logp - cfg.kl_penalty_coef / b
            g_mu = (g_logp[:, None] * (u / sd)).astype(dtype)
            std_mask = teacher._std_grad_mask()
            g_log_std = (g_logp[:, None] * (u * u - 1.0)).sum(axis=0)
            g_log_std = (g_log_std - cfg.entropy_coef) * std_mask
            actor_grads, _ = teacher.net.backward(cache, g_mu)
            g_v = (2.0 * cfg.value_coef / b) * verr
            critic_grads, _ = critic.net.backward(vcache, g_v[:, None].astype(dtype))

            grads = {f"actor.{k}": v for k, v in actor_grads.items()}
            grads["actor.log_std"] = g_log_std.astype(dtype)
            grads.update({f"critic.{k}": v for k, v in critic_grads.items()})
            clip_grad_norm(grads, cfg.max_grad_norm)
            optimizer.update(grads)
        kl_epochs.append(float(np.mean(kl_batches)))

    return {
        "policy_loss": float(np.mean(policy_losses)),
        "value_loss": float(np.mean(value_losses)),
        "entropy": teacher.entropy(),
        "approx_kl": kl_epochs[-1],
        "approx_kl_per_epoch": kl_epochs,
    }


def distill_student(
    student: GaussianPolicy,
    optimizer: Adam,
    obs_student: np.ndarray,
    obs_teacher: np.ndarray,
    teacher: GaussianPolicy,
) -> float:
    """One supervised step matching the student's action distribution to the
    teacher's on paired observations; the teacher is a frozen target.

    Returns the pre-update loss
        mean_b ||mu_s(o_s) - mu_t(o_t)||^2 + ||log_std_s - log_std_t||^2.
    """
    dtype = student.net.dtype
    obs_s = np.asarray(obs_student, dtype=dtype)
    target = teacher.mean(np.asarray(obs_teacher, dtype=teacher.net.dtype))
    target = target.astype(dtype)
    b = obs_s.shape[0]

    mu, cache = student.net.forward(obs_s)
    err = mu - target
    std_err = student.log_std - teacher.log_std.astype(dtype)
    loss = float((err * err).sum(axis=-1).mean() + (std_err * std_err).sum())

    grads, _ = student.net.backward(cache, (2.0 / b) * err)
    grads["log_std"] = 2.0 * std_err
    optimizer.update(grads)
    return loss
