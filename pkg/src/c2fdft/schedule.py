"""Linear variance schedule and the forward (noising) process."""

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed beta/alpha/alpha_bar for timesteps 1..T.

    Arrays are 0-based in storage (``beta[t - 1]`` is beta_t) and kept in
    float64. ``alpha_bar_at(0)`` is 1 by convention.
    """

    T: int
    beta_1: float
    beta_T: float
    beta: torch.Tensor = field(repr=False)
    alpha: torch.Tensor = field(repr=False)
    alpha_bar: torch.Tensor = field(repr=False)
    alpha_bar_0: float = 1.0

    def check_t(self, t, low=1):
        tt = torch.as_tensor(t)
        if tt.numel() and (int(tt.min()) < low or int(tt.max()) > self.T):
            raise ValueError(f"timestep out of range [{low}, {self.T}]: {t}")

    def alpha_bar_at(self, t):
        """alpha_bar_t for int or integer tensor t in [0, T], float64."""
        self.check_t(t, low=0)
        padded = torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bar])
        return padded[torch.as_tensor(t, dtype=torch.long)]

    def beta_at(self, t):
        self.check_t(t)
        return self.beta[torch.as_tensor(t, dtype=torch.long) - 1]

    def alpha_at(self, t):
        self.check_t(t)
        return self.alpha[torch.as_tensor(t, dtype=torch.long) - 1]

    def to_dict(self):
        return {"T": self.T, "beta_1": self.beta_1, "beta_T": self.beta_T}


@dataclass
class NoisySample:
    x_t: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor


def make_schedule(T=1000, beta_1=1e-4, beta_T=2e-2):
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    T = int(T)
    beta = np.linspace(beta_1, beta_T, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.empty_like(alpha)
    running = 1.0
    for i, a in enumerate(alpha):
        running = running * a
        alpha_bar[i] = running
    return DiffusionSchedule(
        T=T,
        beta_1=float(beta_1),
        beta_T=float(beta_T),
        beta=torch.from_numpy(beta),
        alpha=torch.from_numpy(alpha),
        alpha_bar=torch.from_numpy(alpha_bar),
    )


def _coef(values, like):
    """Broadcast per-sample coefficients against a (B, ...) tensor."""
    values = values.to(device=like.device, dtype=like.dtype)
    if values.ndim == 0:
        return values
    return values.view(-1, *([1] * (like.ndim - 1)))


def q_step(x_prev, t, eps, sched):
    """One forward transition: sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * eps."""
    if x_prev.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(x_prev.shape)} vs {tuple(eps.shape)}")
    beta_t = sched.beta_at(t)
    return _coef(torch.sqrt(1.0 - beta_t), x_prev) * x_prev + _coef(torch.sqrt(beta_t), eps) * eps


def q_sample(x0, t, eps, sched):
    """Closed-form x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(eps.shape)}")
    sched.check_t(t)
    ab = sched.alpha_bar_at(t)
    if ab.ndim == 1 and ab.shape[0] != x0.shape[0]:
        raise ValueError("one timestep per batch element required")
    x_t = _coef(torch.sqrt(ab), x0) * x0 + _coef(torch.sqrt(1.0 - ab), eps) * eps
    t_arr = torch.as_tensor(t, dtype=torch.long)
    if t_arr.ndim == 0:
        t_arr = t_arr.expand(x0.shape[0]) if x0.ndim == 4 else t_arr
    return NoisySample(x_t=x_t, t=t_arr, eps=eps)
