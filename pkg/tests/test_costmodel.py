import json
import math

import numpy as np
import pytest

from servesim.costmodel import (CalibrationError, CostCoefficients, ProfileSample,
                                calibrate, decode_step_ms, estimate_total_ms,
                                load_coefficients, remaining_ms, save_coefficients)

TRUE = dict(t0=2.0, alpha=0.01, beta=5.0)


def make_samples(s_values, noise=0.0, seed=0):
    gen = np.random.default_rng(seed)
    out = []
    for s in s_values:
        e1 = gen.normal(0, noise) if noise else 0.0
        e2 = gen.normal(0, noise) if noise else 0.0
        out.append(ProfileSample(s=s, n=1,
                                 t_pre_ms=TRUE["t0"] * s + e1,
                                 t_step_ms=TRUE["alpha"] * s + TRUE["beta"] + e2))
    return out


class TestCalibrate:
    def test_noise_free_recovery(self):
        coeffs, _ = calibrate(make_samples([8, 16, 32, 64, 128, 256]))
        assert abs(coeffs.t0 - TRUE["t0"]) / TRUE["t0"] < 1e-9
        assert abs(coeffs.alpha - TRUE["alpha"]) / TRUE["alpha"] < 1e-9
        assert abs(coeffs.beta - TRUE["beta"]) / TRUE["beta"] < 1e-9

    def test_single_s_underdetermined(self):
        with pytest.raises(CalibrationError):
            calibrate(make_samples([64, 64, 64]))

    def test_too_few(self):
        with pytest.raises(CalibrationError):
            calibrate(make_samples([64]))

    def test_noisy_recovery_within_3_se(self):
        s_values = list(np.tile([16, 32, 64, 128, 256, 512, 768, 1024], 125))
        samples = make_samples(s_values, noise=0.1, seed=123)
        coeffs, stats = calibrate(samples)
        assert stats.n_samples == 1000
        assert abs(coeffs.t0 - TRUE["t0"]) <= 3 * stats.se_t0
        assert abs(coeffs.alpha - TRUE["alpha"]) <= 3 * stats.se_alpha
        assert abs(coeffs.beta - TRUE["beta"]) <= 3 * stats.se_beta

    def test_fixed_point_on_own_model(self):
        # data generated by the model is recovered exactly: refit of a fit
        coeffs, _ = calibrate(make_samples([10, 100, 1000]))
        again, _ = calibrate([ProfileSample(s, 1, coeffs.t0 * s,
                                            coeffs.alpha * s + coeffs.beta)
                              for s in (10, 100, 1000)])
        assert abs(again.t0 - coeffs.t0) < 1e-12


class TestEstimates:
    C = CostCoefficients(t0=1.0, alpha=0.0, beta=2.0)

    def test_example_arithmetic(self):
        assert estimate_total_ms(10, 5, self.C) == 20.0

    def test_prefill_only(self):
        assert estimate_total_ms(10, 0, self.C) == 10.0

    def test_monotone(self):
        c = CostCoefficients(t0=0.5, alpha=0.01, beta=3.0)
        assert estimate_total_ms(11, 5, c) > estimate_total_ms(10, 5, c)
        assert estimate_total_ms(10, 6, c) > estimate_total_ms(10, 5, c)

    def test_decomposition_exact(self):
        c = CostCoefficients(t0=0.37, alpha=0.0123, beta=7.7)
        for s, n in [(1, 0), (17, 3), (999, 250)]:
            assert estimate_total_ms(s, n, c) == (
                estimate_total_ms(s, 0, c) + n * decode_step_ms(s, c))

    def test_validation(self):
        with pytest.raises(ValueError):
            estimate_total_ms(0, 5, self.C)
        with pytest.raises(ValueError):
            estimate_total_ms(5, -1, self.C)
        with pytest.raises(ValueError):
            CostCoefficients(t0=0.0, alpha=0.0, beta=1.0)


class TestRemaining:
    C = CostCoefficients(t0=2.0, alpha=0.01, beta=5.0)

    def test_finished_zero(self):
        assert remaining_ms(100, 50, 50, True, self.C) == 0.0
        assert remaining_ms(100, 50, 60, True, self.C) == 0.0  # never negative

    def test_unprefilled_equals_total(self):
        assert remaining_ms(100, 50, 0, False, self.C) == estimate_total_ms(100, 50, self.C)

    def test_example(self):
        # 30 steps left at (0.01*100 + 5) ms each
        assert remaining_ms(100, 50, 20, True, self.C) == pytest.approx(180.0)

    def test_non_increasing_in_generated(self):
        vals = [remaining_ms(64, 40, g, True, self.C) for g in range(41)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_coefficients_round_trip(tmp_path):
    coeffs, stats = calibrate(make_samples([8, 64, 512]))
    path = tmp_path / "coeffs.json"
    save_coefficients(path, coeffs, stats)
    loaded = load_coefficients(path)
    assert loaded == coeffs
    payload = json.loads(path.read_text())
    assert set(("t0", "alpha", "beta")) <= set(payload)
