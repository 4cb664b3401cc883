"""Coarse (noise-constrained) and fine (sample-constrained) training."""

import logging
import math
from dataclasses import dataclass, field, fields

import torch

from .data import make_batch
from .metrics import SSIM_WINDOW, ssim
from .sampler import sample_restore, timestep_grid
from .schedule import q_sample

log = logging.getLogger(__name__)


@dataclass
class PatchCycleSchedule:
    entries: list = field(default_factory=lambda: [(32, 360), (64, 96), (128, 24)])
    period: int = 10_000

    def __post_init__(self):
        self.entries = [(int(p), int(b)) for p, b in self.entries]
        if not self.entries:
            raise ValueError("patch cycle needs at least one entry")
        for p, b in self.entries:
            if p <= 0 or p % 8:
                raise ValueError(f"patch size {p} must be a positive multiple of 8")
            if b <= 0:
                raise ValueError(f"batch size {b} must be positive")
        if self.period <= 0:
            raise ValueError("period must be positive")


def patch_cycle_at(iteration, cycle):
    return cycle.entries[(iteration // cycle.period) % len(cycle.entries)]


@dataclass
class TrainPlan:
    stage: str = "coarse"
    total_iters: int = 270_000
    lr_start: float = 3e-4
    lr_end: float = 1e-5
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    patch_cycle: PatchCycleSchedule = field(default_factory=PatchCycleSchedule)
    lambda_ssim: float = 0.84
    sample_steps: int = 4
    grad_clip: float = 1.0  # fine stage only
    seed: int = 0
    log_every: int = 100
    ckpt_every: int = 10_000
    augment: bool = True

    def __post_init__(self):
        errors = []
        if self.stage not in ("coarse", "fine"):
            errors.append(f"stage must be coarse or fine, got {self.stage!r}")
        if self.total_iters <= 0:
            errors.append("total_iters must be positive")
        if not (self.lr_start >= self.lr_end > 0):
            errors.append(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if not 0 <= self.lambda_ssim <= 1:
            errors.append(f"lambda_ssim must be in [0, 1], got {self.lambda_ssim}")
        if self.stage == "fine" and self.sample_steps < 2:
            errors.append("fine training needs sample_steps >= 2")
        if errors:
            raise ValueError("; ".join(errors))

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "patch_cycle"}
        d["patch_cycle.entries"] = list(self.patch_cycle.entries)
        d["patch_cycle.period"] = self.patch_cycle.period
        return d


# Full-scale schedules, by (task, stage). Deblur/denoise reuse the deraining
# coarse period.
PRESETS = {
    ("derain", "coarse"): dict(
        total_iters=270_000, lr_start=3e-4, lr_end=1e-5,
        patch_cycle=PatchCycleSchedule([(32, 360), (64, 96), (128, 24)], 10_000),
    ),
    ("derain", "fine"): dict(
        total_iters=90_000, lr_start=1e-5, lr_end=1e-7,
        patch_cycle=PatchCycleSchedule([(32, 96), (64, 24), (128, 6)], 5_000),
    ),
    ("deblur", "coarse"): dict(
        total_iters=270_000, lr_start=3e-4, lr_end=1e-5,
        patch_cycle=PatchCycleSchedule([(64, 96), (128, 24), (256, 6)], 10_000),
    ),
    ("deblur", "fine"): dict(
        total_iters=90_000, lr_start=1e-5, lr_end=1e-7,
        patch_cycle=PatchCycleSchedule([(32, 24), (64, 6), (128, 1)], 5_000),
    ),
}
PRESETS[("denoise", "coarse")] = PRESETS[("deblur", "coarse")]
PRESETS[("denoise", "fine")] = PRESETS[("deblur", "fine")]


def preset_plan(task="derain", stage="coarse", **overrides):
    kw = dict(PRESETS[(task, stage)])
    kw.update(overrides)
    return TrainPlan(stage=stage, **kw)


def lr_at(iteration, plan):
    """Cosine annealing from lr_start (iteration 0) to lr_end (total_iters)."""
    if not 0 <= iteration <= plan.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {plan.total_iters}]")
    cos = math.cos(math.pi * iteration / plan.total_iters)
    return plan.lr_end + 0.5 * (plan.lr_start - plan.lr_end) * (1.0 + cos)


def coarse_loss(eps, eps_hat):
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return (eps - eps_hat).abs().mean()


def fine_loss(x_t0, x, lam=0.84, win_size=SSIM_WINDOW):
    """lam * (1 - SSIM) + (1 - lam) * L1."""
    if x_t0.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(x_t0.shape)} vs {tuple(x.shape)}")
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    l1 = (x_t0 - x).abs().mean()
    if lam == 0:
        return l1
    return lam * (1.0 - ssim(x_t0, x, win_size=win_size)) + (1.0 - lam) * l1


def make_optimizer(model, plan):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=plan.lr_start, betas=tuple(plan.betas), weight_decay=plan.weight_decay)


def step_generator(seed, iteration, stream=0):
    # disjoint integer streams per (seed, iteration); keeps resume exact
    return torch.Generator().manual_seed((int(seed) * 1_000_003 + int(iteration)) * 4 + stream)


def _check_finite(loss, iteration, stage):
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite {stage} loss {loss.item()} at iteration {iteration}")


def _set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def coarse_train_step(model, batch, sched, optimizer, lr, gen):
    """One noise-constrained update; returns the loss as a float."""
    model.train()
    B = batch.x.shape[0]
    device = batch.x.device
    t = torch.randint(1, sched.T + 1, (B,), generator=gen).to(device)
    eps = torch.randn(batch.x.shape, generator=gen).to(device=device, dtype=batch.x.dtype)
    noisy = q_sample(batch.x, t, eps, sched)
    eps_hat = model(noisy.x_t, batch.y, t)
    loss = coarse_loss(eps, eps_hat)
    _check_finite(loss, -1, "coarse")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    _set_lr(optimizer, lr)
    optimizer.step()
    return loss.item()


def fine_train_step(model, batch, sched, optimizer, lr, seed, steps=4, lam=0.84, grad_clip=1.0):
    """One sample-constrained update through the unrolled implicit sampler."""
    model.train()
    plan = timestep_grid(steps, sched.T)
    x_t0 = sample_restore(model, batch.y, plan, sched, seed=seed, track_gradients=True)
    loss = fine_loss(x_t0, batch.x, lam)
    _check_finite(loss, -1, "fine")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.requires_grad], grad_clip)
    _set_lr(optimizer, lr)
    optimizer.step()
    return loss.item()


class Trainer:
    """Owns the model, optimizer and iteration counter for one stage.

    Batches and per-step noise are derived from (seed, iteration), so a run
    resumed from a checkpoint replays exactly what an uninterrupted run does.
    """

    def __init__(self, model, sched, plan, pairs, device="cpu", init_from=None, log_file=None):
        if plan.stage == "fine" and init_from is None:
            raise ValueError("fine training must be initialized from a coarse checkpoint")
        self.model = model.to(device)
        self.sched = sched
        self.plan = plan
        self.pairs = pairs
        self.device = device
        self.init_from = init_from
        self.optimizer = make_optimizer(model, plan)
        self.iteration = 0
        self.losses = []
        self.log_file = log_file

    def batch_at(self, iteration):
        p, bs = patch_cycle_at(iteration, self.plan.patch_cycle)
        batch = make_batch(self.pairs, p, bs, self.plan.seed, iteration, augment=self.plan.augment)
        return batch.to(self.device)

    def step(self):
        it = self.iteration
        batch = self.batch_at(it)
        lr = lr_at(it, self.plan)
        if self.plan.stage == "coarse":
            gen = step_generator(self.plan.seed, it)
            loss = coarse_train_step(self.model, batch, self.sched, self.optimizer, lr, gen)
        else:
            loss = fine_train_step(
                self.model, batch, self.sched, self.optimizer, lr,
                seed=(self.plan.seed * 1_000_003 + it) * 4 + 1,
                steps=self.plan.sample_steps, lam=self.plan.lambda_ssim,
                grad_clip=self.plan.grad_clip,
            )
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        self.losses.append(loss)
        self.iteration += 1
        if self.plan.log_every and (it % self.plan.log_every == 0 or self.iteration == self.plan.total_iters):
            self.log_line(it, loss, lr, batch)
        return loss

    def log_line(self, it, loss, lr, batch):
        line = (f"iter={it} stage={self.plan.stage} loss={loss:.6f} lr={lr:.6e} "
                f"patch={batch.p} batch={batch.x.shape[0]}")
        log.info(line)
        if self.log_file is not None:
            with open(self.log_file, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def run(self, until=None, on_checkpoint=None):
        until = self.plan.total_iters if until is None else min(until, self.plan.total_iters)
        while self.iteration < until:
            self.step()
            if on_checkpoint and self.plan.ckpt_every and self.iteration % self.plan.ckpt_every == 0:
                on_checkpoint(self)
        return self.losses
