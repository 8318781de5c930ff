import math

import numpy as np
import pytest

from seedpc.diffusion import (
    OracleDenoiser,
    SeedAnchorDenoiser,
    add_noise,
    make_schedule,
    posterior_mean,
    predict_x0,
    rounds_for,
    sample_patch,
)
from seedpc.errors import InvalidArgument
from seedpc.tuning import loss_cd

CONST = make_schedule(2, "constant", beta=0.1)


class TestSchedule:
    def test_constant_beta_products(self):
        assert CONST.alpha(1) == pytest.approx(0.9)
        assert CONST.alpha(2) == pytest.approx(0.9)
        assert CONST.alpha_bar(1) == pytest.approx(0.9)
        assert CONST.alpha_bar(2) == pytest.approx(0.81)
        assert CONST.alpha_bar(0) == 1.0

    @pytest.mark.parametrize("kind", ["cosine", "linear"])
    def test_alpha_bar_strictly_decreasing(self, kind):
        sched = make_schedule(16, kind)
        bars = [sched.alpha_bar(t) for t in range(0, 17)]
        assert bars[0] == 1.0
        assert all(a > b for a, b in zip(bars, bars[1:]))

    def test_sigma_zero_at_first_step(self):
        for sched in (CONST, make_schedule(8, "cosine")):
            assert sched.sigma(1) == 0.0
            if sched.T > 1:
                assert sched.sigma(2) > 0.0

    def test_default_is_first_steps_of_long_cosine(self):
        head = make_schedule(8, "cosine")
        full = make_schedule(1024, "cosine")
        assert np.array_equal(head.betas, full.betas[:8])

    def test_invalid_t(self):
        with pytest.raises(InvalidArgument):
            make_schedule(0)
        with pytest.raises(InvalidArgument):
            make_schedule(2048, "cosine", base_steps=1024)
        with pytest.raises(InvalidArgument):
            CONST.alpha_bar(3)


class TestForwardNoising:
    def test_zero_eps(self):
        x0 = np.ones((4, 6))
        out = add_noise(x0, 2, np.zeros_like(x0), CONST)
        assert np.allclose(out, math.sqrt(0.81))

    def test_scalar_example(self):
        # beta = 0.1 constant, t = 2: sqrt(0.81)*1 + sqrt(0.19)*1
        x0 = np.ones((1, 6))
        out = add_noise(x0, 2, np.ones_like(x0), CONST)
        expect = math.sqrt(0.81) + math.sqrt(1 - 0.81)
        assert expect == pytest.approx(1.3358898943540674)
        assert np.allclose(out, expect, atol=1e-12)

    def test_t_zero_is_identity(self):
        x0 = np.random.default_rng(0).normal(size=(3, 6))
        assert np.array_equal(add_noise(x0, 0, np.ones_like(x0), CONST), x0)


class TestReverseIdentities:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.x0 = rng.normal(size=(64, 6))
        self.eps = rng.standard_normal((64, 6))

    def test_predict_x0_inverts_add_noise(self):
        for sched in (CONST, make_schedule(8, "cosine")):
            for t in range(1, sched.T + 1):
                x_t = add_noise(self.x0, t, self.eps, sched)
                back = predict_x0(x_t, self.eps, t, sched)
                assert np.max(np.abs(back - self.x0)) <= 1e-9

    def test_posterior_mean_recovers_x0_at_t1(self):
        x_1 = add_noise(self.x0, 1, self.eps, CONST)
        back = posterior_mean(x_1, self.eps, 1, CONST)
        assert np.max(np.abs(back - self.x0)) <= 1e-9

    def test_posterior_mean_zero_eps_hat(self):
        x_t = add_noise(self.x0, 2, self.eps, CONST)
        out = posterior_mean(x_t, np.zeros_like(x_t), 2, CONST)
        assert np.allclose(out, x_t / math.sqrt(0.9))

    def test_general_t_residual_closed_form(self):
        # With the true eps at general t, the posterior mean misses x_{t-1} by
        # eps * sqrt(1-ab_{t-1}) * (sqrt(a_t (1-ab_{t-1})) - sqrt(1-ab_t)) / sqrt(1-ab_t)
        t = 2
        a_t = CONST.alpha(t)
        ab_prev = CONST.alpha_bar(t - 1)
        ab_t = CONST.alpha_bar(t)
        x_t = add_noise(self.x0, t, self.eps, CONST)
        x_prev = add_noise(self.x0, t - 1, self.eps, CONST)
        got = posterior_mean(x_t, self.eps, t, CONST) - x_prev
        coef = (
            math.sqrt(1 - ab_prev)
            * (math.sqrt(a_t * (1 - ab_prev)) - math.sqrt(1 - ab_t))
            / math.sqrt(1 - ab_t)
        )
        assert np.max(np.abs(got - self.eps * coef)) <= 1e-9


class TestOracleDenoiser:
    def test_recovers_injected_noise(self):
        rng = np.random.default_rng(2)
        target = rng.normal(size=(50, 6))
        sched = make_schedule(8, "cosine")
        # tiny noise at t=1 keeps each noisy row nearest to its own source
        eps = rng.standard_normal((50, 6)) * 1e-4
        x_t = add_noise(target, 1, eps, sched)
        den = OracleDenoiser(target, sched)
        got = den.eps(x_t, np.zeros((1, 6)), 1)
        assert np.allclose(got, eps, atol=1e-9)

    def test_row_equivariance(self):
        rng = np.random.default_rng(3)
        target = rng.normal(size=(30, 6))
        sched = make_schedule(8, "cosine")
        den = OracleDenoiser(target, sched)
        x_t = rng.normal(size=(20, 6))
        perm = rng.permutation(20)
        assert np.array_equal(den.eps(x_t, target, 3)[perm], den.eps(x_t[perm], target, 3))

    def test_sampler_collapses_onto_target(self, sphere_cloud):
        target = sphere_cloud(512, seed=4).as_rows()
        sched = make_schedule(8, "cosine")
        den = OracleDenoiser(target, sched)
        out = sample_patch(den, target, 3072, sched, np.random.default_rng(5))
        assert loss_cd(out[:, :3], target[:, :3]) <= 1e-3


class TestSamplePatch:
    def test_round_counts(self):
        assert rounds_for(6144) == 2
        assert rounds_for(4000) == 1
        assert rounds_for(1000) == 1

    def test_output_rows(self, sphere_cloud):
        seeds = sphere_cloud(100, seed=6).as_rows()
        sched = make_schedule(4, "cosine")
        den = SeedAnchorDenoiser(sched)
        rng = np.random.default_rng(7)
        assert sample_patch(den, seeds, 6144, sched, rng).shape == (6144, 6)
        assert sample_patch(den, seeds, 1000, sched, np.random.default_rng(8)).shape == (3072, 6)

    def test_reproducible(self, sphere_cloud):
        seeds = sphere_cloud(64, seed=9).as_rows()
        sched = make_schedule(4, "cosine")
        den = SeedAnchorDenoiser(sched)
        a = sample_patch(den, seeds, 3072, sched, np.random.default_rng(11))
        b = sample_patch(den, seeds, 3072, sched, np.random.default_rng(11))
        assert np.array_equal(a, b)

    def test_colors_clamped(self, sphere_cloud):
        seeds = sphere_cloud(64, seed=12).as_rows()
        sched = make_schedule(8, "cosine")
        out = sample_patch(SeedAnchorDenoiser(sched), seeds, 3072, sched, np.random.default_rng(13))
        assert out[:, 3:].min() >= 0.0
        assert out[:, 3:].max() <= 1.0

    def test_rejects_bad_count(self, sphere_cloud):
        sched = make_schedule(2, "cosine")
        with pytest.raises(InvalidArgument):
            rounds_for(0)
