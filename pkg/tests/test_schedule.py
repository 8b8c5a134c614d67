"""Noise schedule construction, fraction mapping, forward-process closed forms."""

import numpy as np
import pytest

from latentbridge.numerics import Tensor
from latentbridge.numerics.tensor import ShapeError
from latentbridge.schedule import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    ScheduleError,
    forward_diffuse,
    make_schedule,
    step_from_fraction,
)


class TestMakeSchedule:
    def test_linear_first_alpha_bar_is_single_term_product(self):
        s = make_schedule("linear", 100, 1e-4, 0.02)
        np.testing.assert_allclose(s.alpha_bar[1], 0.9999, rtol=1e-12)

    def test_linear_terminal_alpha_bar_matches_direct_product(self):
        """Multiply the 100 terms in 64-bit; implementation within 1e-6 relative."""
        s = make_schedule("linear", 100, 1e-4, 0.02)
        betas = np.linspace(1e-4, 0.02, 100, dtype=np.float64)
        direct = np.prod(1.0 - betas)
        assert abs(s.alpha_bar[100] - direct) / direct < 1e-6

    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    def test_invariants(self, kind):
        s = make_schedule(kind, 100)
        assert s.alpha_bar[0] == 1.0
        assert 0.0 < s.alpha_bar[-1] < 1.0
        assert np.all(np.diff(s.alpha_bar) < 0.0)
        snr = np.array([s.snr(t) for t in range(1, s.steps + 1)])
        assert np.all(np.diff(snr) < 0.0)
        prod = np.cumprod(1.0 - s.beta)
        np.testing.assert_allclose(s.alpha_bar[1:], prod, rtol=1e-6)

    def test_default_terminal_snr(self):
        """Default schedule lands near alpha_bar_T = 4e-3."""
        s = make_schedule()
        assert abs(s.alpha_bar[-1] - 4e-3) < 2e-4
        assert (s.beta[0], s.beta[-1]) == (DEFAULT_BETA_START, DEFAULT_BETA_END)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"steps": 1},
            {"beta_start": 0.0},
            {"beta_start": 0.5, "beta_end": 0.1},
            {"beta_end": 1.0},
            {"kind": "bogus"},
        ],
    )
    def test_bad_parameters_rejected(self, kwargs):
        base = {"kind": "linear", "steps": 100, "beta_start": 1e-4, "beta_end": 0.02}
        base.update(kwargs)
        with pytest.raises(ScheduleError):
            make_schedule(**base)

    def test_alpha_bar_at_interpolates_monotonically(self):
        s = make_schedule()
        ts = np.arange(0.0, 100.001, 0.25)
        vals = [s.alpha_bar_at(t) for t in ts]
        assert np.all(np.diff(vals) < 0.0)
        for t in (0, 1, 50, 100):
            assert s.alpha_bar_at(float(t)) == s.alpha_bar[t]


class TestStepFromFraction:
    def test_paper_grid(self):
        got = [step_from_fraction(f, 100) for f in (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0)]
        assert got == [50, 60, 70, 80, 90, 95, 100]

    def test_quarter_grid(self):
        got = [step_from_fraction(f, 100) for f in (0.25, 0.5, 0.75, 1.0)]
        assert got == [25, 50, 75, 100]

    def test_monotone_in_fraction(self):
        fracs = np.linspace(0.01, 1.0, 200)
        ks = [step_from_fraction(f, 100) for f in fracs]
        assert all(a <= b for a, b in zip(ks, ks[1:]))

    def test_clamped_to_valid_range(self):
        assert step_from_fraction(1e-9, 100) == 1
        assert step_from_fraction(1.0, 100) == 100

    @pytest.mark.parametrize("frac", [0.0, -0.5, 1.5])
    def test_bad_fraction_rejected(self, frac):
        with pytest.raises(ScheduleError):
            step_from_fraction(frac, 100)


class TestForwardDiffuse:
    def setup_method(self):
        self.s = make_schedule()
        self.rng = np.random.default_rng(0)

    def test_k_zero_returns_input_bitwise(self):
        z0 = Tensor(self.rng.normal(size=(4, 4, 2)).astype(np.float32))
        eps = Tensor(self.rng.normal(size=(4, 4, 2)).astype(np.float32))
        out = forward_diffuse(z0, 0, eps, self.s)
        assert out is z0

    def test_zero_noise_scales_signal_only(self):
        z0 = Tensor(self.rng.normal(size=(3, 3, 1)).astype(np.float32))
        eps = Tensor(np.zeros((3, 3, 1), dtype=np.float32))
        out = forward_diffuse(z0, 40, eps, self.s)
        np.testing.assert_allclose(
            out.data, np.sqrt(self.s.alpha_bar[40]) * z0.data, rtol=1e-6
        )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            forward_diffuse(
                Tensor(np.zeros((2, 2))), 10, Tensor(np.zeros((3, 2))), self.s
            )

    def test_k_out_of_range_rejected(self):
        z = Tensor(np.zeros((2, 2)))
        with pytest.raises(ScheduleError):
            forward_diffuse(z, 101, z, self.s)

    def test_terminal_std_monte_carlo(self):
        """z0=0, k=T: sample std over 1e5 draws = sqrt(1-abar_T) within 2%."""
        draws = 100_000
        eps = self.rng.standard_normal((draws, 1, 1, 1)).astype(np.float32)
        zk = forward_diffuse(
            Tensor(np.zeros((draws, 1, 1, 1), dtype=np.float32)), self.s.steps,
            Tensor(eps), self.s,
        )
        want = np.sqrt(1.0 - self.s.alpha_bar[-1])
        assert abs(zk.data.std() - want) / want < 0.02

    def test_marginal_statistics_three_cases(self):
        """Empirical mean -> sqrt(ab_k) z0 and var -> (1-ab_k), within 3 SE at 1e4 draws."""
        draws = 10_000
        z0 = self.rng.uniform(-1, 1, (2, 2, 1)).astype(np.float32)
        for k in (10, 60, 100):
            eps = self.rng.standard_normal((draws,) + z0.shape).astype(np.float32)
            base = Tensor(np.broadcast_to(z0, eps.shape).copy())
            zk = forward_diffuse(base, k, Tensor(eps), self.s).data
            ab = self.s.alpha_bar[k]
            se_mean = np.sqrt(1 - ab) / np.sqrt(draws)
            assert np.abs(zk.mean(axis=0) - np.sqrt(ab) * z0).max() < 3 * se_mean
            se_var = (1 - ab) * np.sqrt(2.0 / draws)
            assert np.abs(zk.var(axis=0) - (1 - ab)).max() < 3 * se_var

    def test_monotone_corruption(self):
        """Mean squared distance from z0 is non-decreasing in k (in expectation)."""
        draws = 4000
        z0 = self.rng.uniform(-1, 1, (4, 4, 1)).astype(np.float32)
        dists = []
        for k in (0, 10, 30, 60, 90, 100):
            eps = self.rng.standard_normal((draws,) + z0.shape).astype(np.float32)
            base = Tensor(np.broadcast_to(z0, eps.shape).copy())
            zk = forward_diffuse(base, k, Tensor(eps), self.s).data
            dists.append(float(np.mean((zk - z0) ** 2)))
        assert all(a <= b + 1e-6 for a, b in zip(dists, dists[1:]))
