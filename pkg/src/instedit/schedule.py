"""Variance-preserving cosine noise schedule and the deterministic DDIM step."""

from __future__ import annotations

import numpy as np
import torch


class CosineSchedule:
    """Cosine schedule over t in {0..T} with alpha(t)^2 + sigma(t)^2 = 1.

    Built from squared-cosine signal decay with the usual small offset and
    a per-step decay floor so alpha stays strictly positive at t = T.
    alpha(0) = 1 and sigma(0) = 0 exactly.
    """

    def __init__(self, total_steps: int = 1000, offset: float = 0.008, max_beta: float = 0.999):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.total_steps = total_steps
        self.offset = offset
        self.max_beta = max_beta

        t = np.arange(total_steps + 1, dtype=np.float64)
        f = np.cos((t / total_steps + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
        raw = f / f[0]
        betas = np.minimum(1.0 - raw[1:] / raw[:-1], max_beta)
        signal = np.empty(total_steps + 1, dtype=np.float64)
        signal[0] = 1.0
        signal[1:] = np.cumprod(1.0 - betas)
        self._alpha_sq = signal
        self._alpha = np.sqrt(signal)
        self._sigma = np.sqrt(1.0 - signal)

    def _check(self, t):
        t = np.asarray(t)
        if ((t < 0) | (t > self.total_steps)).any():
            raise ValueError(f"step out of range [0, {self.total_steps}]: {t}")

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self._alpha[t])

    def sigma(self, t: int) -> float:
        self._check(t)
        return float(self._sigma[t])

    def alpha_for(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """Per-item alpha broadcastable against a batch of images."""
        self._check(t.cpu().numpy())
        a = torch.as_tensor(self._alpha, dtype=like.dtype, device=like.device)[t]
        return a.view(-1, *([1] * (like.ndim - 1)))

    def sigma_for(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        self._check(t.cpu().numpy())
        s = torch.as_tensor(self._sigma, dtype=like.dtype, device=like.device)[t]
        return s.view(-1, *([1] * (like.ndim - 1)))

    def to_dict(self) -> dict:
        return {
            "kind": "cosine",
            "total_steps": self.total_steps,
            "offset": self.offset,
            "max_beta": self.max_beta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CosineSchedule":
        if d.get("kind") != "cosine":
            raise ValueError(f"unknown schedule kind: {d.get('kind')}")
        return cls(
            total_steps=int(d["total_steps"]),
            offset=float(d["offset"]),
            max_beta=float(d["max_beta"]),
        )


def add_noise(
    schedule: CosineSchedule, x: torch.Tensor, t, eps: torch.Tensor
) -> torch.Tensor:
    """Noisy image alpha(t) * x + sigma(t) * eps.

    t may be an int (whole batch) or a per-item LongTensor.
    """
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(eps.shape)}")
    if isinstance(t, torch.Tensor):
        return schedule.alpha_for(t, x) * x + schedule.sigma_for(t, x) * eps
    return schedule.alpha(t) * x + schedule.sigma(t) * eps


def ddim_update(
    schedule: CosineSchedule,
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM step from t down to t_prev.

    Recovers x_hat = (z_t - sigma(t) * eps_hat) / alpha(t) and re-noises it
    at t_prev. t_prev == t is a permitted no-op and returns z_t unchanged.
    """
    if t_prev > t:
        raise ValueError(f"t_prev must be <= t, got {t_prev} > {t}")
    if t_prev == t:
        return z_t.clone()
    x_hat = (z_t - schedule.sigma(t) * eps_hat) / schedule.alpha(t)
    return schedule.alpha(t_prev) * x_hat + schedule.sigma(t_prev) * eps_hat


def sampling_ladder(total_steps: int, steps: int) -> list[int]:
    """Uniformly spaced descending step ladder from T to 0, inclusive."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > total_steps:
        raise ValueError("cannot take more sampling steps than schedule steps")
    ts = np.round(np.linspace(total_steps, 0, steps + 1)).astype(int)
    return [int(t) for t in ts]
