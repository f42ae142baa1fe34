"""Actor/critic networks and their training math, all in plain numpy.

Three-layer ELU MLPs with hand-written reverse-mode gradients, a diagonal
Gaussian action head with a scheduled standard-deviation floor, Adam, and
global gradient-norm clipping. Parameters live in float32 by default;
every routine also runs in float64 so gradients can be checked against
finite differences at tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import PolicyConfig

LOG_2PI = float(np.log(2.0 * np.pi))


def elu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0.0, z, np.expm1(z))


def elu_grad(z: np.ndarray) -> np.ndarray:
    # d/dz expm1(z) = exp(z) = elu(z) + 1 on the negative branch
    return np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))


def orthogonal(rng: np.random.Generator, rows: int, cols: int, dtype) -> np.ndarray:
    """Semi-orthogonal matrix from the QR of a Gaussian draw."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix the sign ambiguity, keeps det spread
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q, dtype=dtype)


@dataclass
class Mlp:
    """Affine stack with ELU between layers and a linear output."""

    weights: list  # [(out_l, in_l)]
    biases: list  # [(out_l,)]

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        sizes: tuple[int, ...],
        final_gain: float = 0.01,
        dtype=np.float32,
    ) -> "Mlp":
        """sizes = (input, hidden..., output); hidden layers get gain sqrt(2)
        for ELU, the output layer starts near zero so early policies stay
        close to the default pose."""
        ws, bs = [], []
        for layer in range(len(sizes) - 1):
            gain = final_gain if layer == len(sizes) - 2 else np.sqrt(2.0)
            ws.append(gain * orthogonal(rng, sizes[layer + 1], sizes[layer], dtype))
            bs.append(np.zeros(sizes[layer + 1], dtype=dtype))
        return cls(ws, bs)

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple([self.weights[0].shape[1]] + [w.shape[0] for w in self.weights])

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Batched forward pass; the cache holds every layer input and
        pre-activation for the backward sweep."""
        h = np.asarray(x, dtype=self.dtype)
        if h.shape[-1] != self.weights[0].shape[1]:
            raise ValueError(
                f"input dim {h.shape[-1]} != expected {self.weights[0].shape[1]}"
            )
        cache = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            cache.append((h, z))
            h = z if i == last else elu(z)
        return h, cache

    def backward(
        self, cache: list, grad_out: np.ndarray
    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Exact reverse-mode gradients for a matching forward cache.

        Returns ({w0, b0, ...}: gradients, gradient w.r.t. the input).
        """
        if len(cache) != len(self.weights):
            raise ValueError("cache does not match network depth")
        g = np.asarray(grad_out, dtype=self.dtype)
        grads: dict[str, np.ndarray] = {}
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            h, z = cache[i]
            if h.shape[-1] != self.weights[i].shape[1]:
                raise ValueError("stale cache: layer input shape mismatch")
            if i != last:
                g = g * elu_grad(z)
            grads[f"w{i}"] = g.reshape(-1, g.shape[-1]).T @ h.reshape(-1, h.shape[-1])
            grads[f"b{i}"] = g.reshape(-1, g.shape[-1]).sum(axis=0)
            g = g @ self.weights[i]
        return grads, g


@dataclass
class GaussianPolicy:
    """Diagonal Gaussian actor: learned state-independent log-std with a
    scheduled floor, so exploration cannot collapse early in training."""

    net: Mlp
    log_std: np.ndarray
    std_floor: float

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        obs_dim: int,
        action_dim: int,
        cfg: PolicyConfig | None = None,
        dtype=np.float32,
    ) -> "GaussianPolicy":
        cfg = cfg or PolicyConfig()
        net = Mlp.create(rng, (obs_dim,) + tuple(cfg.hidden_sizes) + (action_dim,), dtype=dtype)
        return cls(
            net=net,
            log_std=np.full(action_dim, cfg.log_std_init, dtype=dtype),
            std_floor=cfg.std_floor_init,
        )

    @property
    def action_dim(self) -> int:
        return self.log_std.shape[0]

    def std(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_std), self.std_floor)

    def _std_grad_mask(self) -> np.ndarray:
        # the floor branch of max() carries no log_std gradient
        return (np.exp(self.log_std) > self.std_floor).astype(self.net.dtype)

    def mean(self, obs: np.ndarray) -> np.ndarray:
        mu, _ = self.net.forward(obs)
        return mu

    def sample(
        self, obs: np.ndarray, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """action = mean + std * z with z ~ N(0, I); returns (action, log_prob)."""
        mu, _ = self.net.forward(obs)
        z = rng.standard_normal(mu.shape).astype(self.net.dtype)
        action = mu + self.std() * z
        return action, self.log_prob(obs, action)

    def log_prob(self, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
        mu, _ = self.net.forward(obs)
        return self._log_prob_given_mean(mu, action)

    def _log_prob_given_mean(self, mu: np.ndarray, action: np.ndarray) -> np.ndarray:
        sd = self.std()
        u = (np.asarray(action, dtype=self.net.dtype) - mu) / sd
        return (-0.5 * u * u - np.log(sd) - 0.5 * LOG_2PI).sum(axis=-1)

    def entropy(self) -> float:
        return float((0.5 + 0.5 * LOG_2PI + np.log(self.std())).sum())

    def params(self) -> dict[str, np.ndarray]:
        out = self.net.params()
        out["log_std"] = self.log_std
        return out


@dataclass
class Critic:
    net: Mlp

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        obs_dim: int,
        cfg: PolicyConfig | None = None,
        dtype=np.float32,
    ) -> "Critic":
        cfg = cfg or PolicyConfig()
        # value head keeps unit gain: a near-zero critic slows early GAE
        net = Mlp.create(
            rng, (obs_dim,) + tuple(cfg.hidden_sizes) + (1,), final_gain=1.0, dtype=dtype
        )
        return cls(net)

    def value(self, obs: np.ndarray) -> np.ndarray:
        v, _ = self.net.forward(obs)
        return v[..., 0]

    def params(self) -> dict[str, np.ndarray]:
        return self.net.params()


def std_floor_at(cfg: PolicyConfig, iteration: int) -> float:
    """Linear anneal init -> final over the first std_floor_iters, then hold."""
    frac = min(max(iteration, 0), cfg.std_floor_iters) / cfg.std_floor_iters
    return cfg.std_floor_init + frac * (cfg.std_floor_final - cfg.std_floor_init)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale the whole gradient set so its global L2 norm is <= max_norm.

    Returns the pre-clip norm. In-place, like the framework convention.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.vdot(g, g))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class Adam:
    """Bias-corrected Adam over a named parameter dict (updates in place)."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, grads: dict[str, np.ndarray]) -> None:
        if set(grads) != set(self.params):
            missing = set(self.params) ^ set(grads)
            raise ValueError(f"gradient keys do not match parameters: {missing}")
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for parameter {k!r}")
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            self.params[k] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out
