import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from c2fdft.sampler import (
    ancestral_step,
    implicit_step,
    initial_noise,
    predict_x0,
    sample_restore,
    timestep_grid,
)
from c2fdft.schedule import make_schedule


@pytest.fixture(scope="module")
def sched():
    return make_schedule(1000, 1e-4, 2e-2)


class TestTimestepGrid:
    @pytest.mark.parametrize(
        "S, T, grid",
        [(4, 1000, (1000, 667, 334, 1)), (2, 1000, (1000, 1)), (2, 2, (2, 1)), (5, 1000, (1000, 751, 501, 251, 1))],
    )
    def test_hand_computed(self, S, T, grid):
        plan = timestep_grid(S, T)
        assert plan.grid == grid
        assert plan.pairs[-1] == (1, 0)

    @pytest.mark.parametrize("S, T", [(1, 1000), (0, 10), (11, 10)])
    def test_invalid(self, S, T):
        with pytest.raises(ValueError):
            timestep_grid(S, T)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 10).flatmap(lambda S: st.tuples(st.just(S), st.integers(S, 1000))))
    def test_grid_properties(self, st_):
        S, T = st_
        g = timestep_grid(S, T).grid
        assert len(g) == S
        assert all(a > b for a, b in zip(g, g[1:]))
        assert g[-1] == 1 and g[0] <= T and min(g) >= 1


class TestImplicitStep:
    def test_terminal_step_returns_x0_hat(self, sched):
        x = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        e = torch.randn_like(x)
        torch.testing.assert_close(implicit_step(x, e, 334, 0, sched), predict_x0(x, e, 334, sched))
        ab = sched.alpha_bar[333].item()
        torch.testing.assert_close(implicit_step(x, e, 334, 0, sched), (x - math.sqrt(1 - ab) * e) / math.sqrt(ab))

    def test_zero_predictor_rescales(self, sched):
        x = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        out = implicit_step(x, torch.zeros_like(x), 667, 334, sched)
        ratio = math.sqrt(sched.alpha_bar[333].item() / sched.alpha_bar[666].item())
        torch.testing.assert_close(out, ratio * x)

    def test_constant_predictor_keeps_x0_hat(self, sched):
        x = torch.randn(2, 3, 8, 8)
        e = torch.full_like(x, 0.3)
        before = predict_x0(x, e, 1000, sched)
        after = predict_x0(implicit_step(x, e, 1000, 667, sched), e, 667, sched)
        # |x0_hat| ~ 1/sqrt(ab_1000) ~ 160x the noise; float32 ulp there exceeds 1e-5
        torch.testing.assert_close(after, before, atol=1e-5 * before.abs().max().item(), rtol=0)
        x64, e64 = x.double(), e.double()
        before = predict_x0(x64, e64, 1000, sched)
        after = predict_x0(implicit_step(x64, e64, 1000, 667, sched), e64, 667, sched)
        torch.testing.assert_close(after, before, atol=1e-5, rtol=0)

    def test_order_violation(self, sched):
        x = torch.zeros(1, 3, 4, 4)
        with pytest.raises(ValueError):
            implicit_step(x, x, 5, 5, sched)
        with pytest.raises(ValueError):
            implicit_step(x, x, 5, 7, sched)

    def test_differentiable(self, sched):
        x = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
        e = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
        implicit_step(x, e, 500, 100, sched).sum().backward()
        assert x.grad is not None and e.grad is not None


def constant_predictor(value):
    return lambda x, y, t: torch.full_like(x, value)


def target_predictor(x_star, sched):
    def f(x, y, t):
        ab = sched.alpha_bar_at(t).to(x)[:, None, None, None]
        return (x - torch.sqrt(ab) * x_star) / torch.sqrt(1 - ab)

    return f


class TestSampleRestore:
    @pytest.mark.parametrize("S", [2, 3, 4, 5, 10])
    def test_constant_predictor_closed_form(self, sched, S):
        y = torch.rand(2, 3, 16, 16)
        out = sample_restore(constant_predictor(0.25), y, timestep_grid(S, 1000), sched, seed=3)
        x_S = initial_noise(y.shape, 3)
        ab = sched.alpha_bar[999].item()
        expect = (x_S - math.sqrt(1 - ab) * 0.25) / math.sqrt(ab)
        torch.testing.assert_close(out, expect, atol=1e-5 * expect.abs().max().item(), rtol=0)

    @pytest.mark.parametrize("S", [2, 3, 4, 5, 10])
    def test_target_predictor_recovers_target(self, sched, S):
        x_star = torch.rand(2, 3, 16, 16)
        out = sample_restore(target_predictor(x_star, sched), torch.zeros_like(x_star), timestep_grid(S, 1000), sched, seed=7)
        assert (out - x_star).abs().max().item() <= 1e-4

    def test_seed_determinism(self, sched):
        torch.manual_seed(0)
        w = torch.randn(3)
        f = lambda x, y, t: torch.tanh(x * w[None, :, None, None] + y)
        plan = timestep_grid(4, 1000)
        y = torch.rand(1, 3, 8, 8)
        a = sample_restore(f, y, plan, sched, seed=42)
        b = sample_restore(f, y, plan, sched, seed=42)
        c = sample_restore(f, y, plan, sched, seed=43)
        assert torch.equal(a, b) and not torch.equal(a, c)

    def test_intermediate_x0_hat_constant_for_constant_predictor(self, sched):
        plan = timestep_grid(5, 1000)
        seen = []

        def cb(j, t_prev, x):
            if t_prev > 0:
                seen.append(predict_x0(x, torch.full_like(x, -0.4), t_prev, sched))
            else:
                seen.append(x)

        sample_restore(constant_predictor(-0.4), torch.zeros(1, 3, 8, 8), plan, sched, seed=1, callback=cb)
        for a in seen[1:]:
            torch.testing.assert_close(a, seen[0], atol=1e-5 * seen[0].abs().max().item(), rtol=0)

    def test_gradients_only_when_tracked(self, sched):
        theta = torch.tensor(0.3, requires_grad=True)
        f = lambda x, y, t: theta * x
        plan = timestep_grid(4, 1000)
        y = torch.zeros(1, 3, 8, 8)
        assert not sample_restore(f, y, plan, sched, seed=0).requires_grad
        assert sample_restore(f, y, plan, sched, seed=0, track_gradients=True).requires_grad

    def test_chain_gradient_matches_finite_differences(self, sched):
        y = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        plan = timestep_grid(4, 1000)

        def run(theta):
            f = lambda x, yy, t: torch.tanh(theta) * x + theta * yy
            out = sample_restore(f, y, plan, sched, seed=5, track_gradients=True)
            return (out**2).sum()

        theta = torch.tensor(0.7, dtype=torch.float64, requires_grad=True)
        run(theta).backward()
        h = 1e-6
        with torch.no_grad():
            fd = (run(torch.tensor(0.7 + h, dtype=torch.float64)) - run(torch.tensor(0.7 - h, dtype=torch.float64))) / (2 * h)
        assert abs(theta.grad.item() - fd.item()) <= 1e-4 * abs(fd.item())

    def test_plan_schedule_mismatch(self, sched):
        with pytest.raises(ValueError):
            sample_restore(constant_predictor(0.0), torch.zeros(1, 3, 8, 8), timestep_grid(4, 500), sched)


class TestAncestralStep:
    def test_zero_terms(self, sched):
        x = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        z = torch.zeros_like(x)
        out = ancestral_step(x, z, 200, z, sched)
        torch.testing.assert_close(out, x / math.sqrt(sched.alpha[199].item()))

    def test_t1_ignores_noise(self, sched):
        x = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        e = torch.randn_like(x)
        a = ancestral_step(x, e, 1, torch.randn_like(x), sched)
        b = ancestral_step(x, e, 1, torch.zeros_like(x), sched)
        torch.testing.assert_close(a, b)

    def test_matches_independent_transcription(self, sched):
        rng = np.random.default_rng(0)
        x, e, z = (rng.standard_normal((1, 3, 4, 4)) for _ in range(3))
        t = 500
        betas = np.linspace(1e-4, 2e-2, 1000)
        a_t = 1 - betas[t - 1]
        ab_t = np.prod(1 - betas[:t])
        expect = (x - (1 - a_t) / np.sqrt(1 - ab_t) * e) / np.sqrt(a_t) + np.sqrt(betas[t - 1]) * z
        out = ancestral_step(*(torch.from_numpy(v) for v in (x, e)), t, torch.from_numpy(z), sched).numpy()
        np.testing.assert_allclose(out, expect, atol=1e-10, rtol=0)

    @pytest.mark.parametrize("t", [0, 1001])
    def test_range(self, sched, t):
        x = torch.zeros(1, 3, 4, 4)
        with pytest.raises(ValueError):
            ancestral_step(x, x, t, x, sched)
