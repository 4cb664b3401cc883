"""Deterministic implicit sampling on a sparse timestep grid, plus the ancestral step."""

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class SamplerPlan:
    S: int
    T: int
    grid: tuple  # t_S, ..., t_1 (strictly decreasing, ends at 1)

    @property
    def pairs(self):
        """(t_j, t_{j-1}) for j = S..1, with t_0 = 0."""
        nxt = self.grid[1:] + (0,)
        return list(zip(self.grid, nxt))


def timestep_grid(S, T):
    """t_j = floor((j - 1) * T / (S - 1)) + 1 for j = S..1, clamped to T."""
    if S < 2:
        raise ValueError(f"need at least 2 sampling steps, got S={S}")
    if S > T:
        raise ValueError(f"S={S} exceeds T={T}")
    grid = tuple(min((j - 1) * T // (S - 1) + 1, T) for j in range(S, 0, -1))
    return SamplerPlan(S=S, T=T, grid=grid)


def _ab(sched, t, like):
    return sched.alpha_bar_at(t).to(device=like.device, dtype=like.dtype)


def predict_x0(x, eps_hat, t, sched):
    ab = _ab(sched, t, x)
    return (x - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)


def implicit_step(x, eps_hat, t_j, t_jm1, sched):
    """Move from t_j to t_{j-1} keeping the implied clean estimate fixed."""
    if not (t_j > t_jm1 >= 0):
        raise ValueError(f"need t_j > t_jm1 >= 0, got {t_j}, {t_jm1}")
    x0_hat = predict_x0(x, eps_hat, t_j, sched)
    ab_prev = _ab(sched, t_jm1, x)
    return torch.sqrt(ab_prev) * x0_hat + torch.sqrt(1.0 - ab_prev) * eps_hat


def initial_noise(shape, seed, device="cpu", dtype=torch.float32):
    gen = torch.Generator(device="cpu").manual_seed(int(seed))
    return torch.randn(shape, generator=gen, dtype=dtype).to(device)


def sample_restore(model, y, plan, sched, seed=0, track_gradients=False, x_init=None, callback=None):
    """Restore ``y`` by S implicit steps starting from seeded Gaussian noise.

    ``model`` is any callable ``(x_t, y, t) -> eps_hat``; ``t`` is passed as a
    (B,) long tensor. ``callback(j, t_jm1, x)`` sees every intermediate.
    """
    if plan.T != sched.T:
        raise ValueError(f"plan built for T={plan.T}, schedule has T={sched.T}")
    if y.ndim != 4:
        raise ValueError(f"expected (B, 3, H, W), got {tuple(y.shape)}")
    if x_init is None:
        x = initial_noise(y.shape, seed, device=y.device, dtype=y.dtype)
    else:
        if x_init.shape != y.shape:
            raise ValueError("x_init shape must match y")
        x = x_init
    B = y.shape[0]
    with torch.set_grad_enabled(track_gradients and torch.is_grad_enabled()):
        for j, (t_j, t_jm1) in zip(range(plan.S, 0, -1), plan.pairs):
            t = torch.full((B,), t_j, dtype=torch.long, device=y.device)
            eps_hat = model(x, y, t)
            x = implicit_step(x, eps_hat, t_j, t_jm1, sched)
            if callback is not None:
                callback(j, t_jm1, x)
    return x


def ancestral_step(x, eps_hat, t, z, sched):
    """One reverse DDPM step: mean from the noise estimate plus sqrt(beta_t) * z."""
    sched.check_t(t)
    if t == 1:
        z = torch.zeros_like(x)
    alpha_t = sched.alpha_at(t).to(x)
    ab_t = sched.alpha_bar_at(t).to(x)
    mean = (x - ((1.0 - alpha_t) / torch.sqrt(1.0 - ab_t)) * eps_hat) / torch.sqrt(alpha_t)
    return mean + torch.sqrt(sched.beta_at(t).to(x)) * z
