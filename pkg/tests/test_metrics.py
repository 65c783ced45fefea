"""Metric oracles: hand-verified values, the displayed rank-correlation
formula, exhaustive pair enumeration, and cross-checks against scipy on
tie-free inputs."""

import numpy as np
import pytest
import scipy.stats

from biqa import metrics as mx
from biqa.errors import DegenerateInput, LengthMismatch


def srocc_displayed_formula(y, yhat):
    """1 - 6*sum(D^2)/(n(n^2-1)) over rank differences (tie-free only)."""
    ry = mx.average_ranks(y)
    rh = mx.average_ranks(yhat)
    d = ry - rh
    n = len(y)
    return 1.0 - 6.0 * np.sum(d * d) / (n * (n * n - 1))


def krocc_pair_oracle(y, yhat):
    """Exhaustive O(n^2) concordant/discordant enumeration."""
    n = len(y)
    p = 0
    for i in range(n):
        for j in range(i + 1, n):
            dy = y[i] - y[j]
            dh = yhat[i] - yhat[j]
            if dy * dh > 0:
                p += 1
            elif dy * dh < 0:
                p -= 1
    return 2.0 * p / (n * (n - 1))


class TestPlcc:
    def test_perfect_positive(self):
        assert mx.plcc([1, 2, 3], [1, 2, 3]) == 1.0

    def test_perfect_negative(self):
        assert mx.plcc([1, 2, 3], [3, 2, 1]) == -1.0

    def test_hand_example(self):
        # cov/sqrt(var*var) evaluated independently: sqrt(27/28)
        assert mx.plcc([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9819805060619657, abs=1e-12)

    def test_constant_vector_degenerate(self):
        with pytest.raises(DegenerateInput):
            mx.plcc([1, 1, 1], [1, 2, 3])
        with pytest.raises(DegenerateInput):
            mx.plcc([1, 2, 3], [5, 5, 5])

    def test_affine_equivariance(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = rng.integers(3, 50)
            y = rng.standard_normal(n)
            yh = rng.standard_normal(n)
            r = mx.plcc(y, yh)
            a = rng.uniform(0.1, 5.0) * rng.choice([-1.0, 1.0])
            b = rng.uniform(-3, 3)
            assert mx.plcc(y, a * yh + b) == pytest.approx(np.sign(a) * r, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        y, yh = rng.standard_normal(20), rng.standard_normal(20)
        assert mx.plcc(y, yh) == pytest.approx(mx.plcc(yh, y), abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            mx.plcc([1, 2], [1, 2, 3])


class TestSrocc:
    def test_monotone_orderings(self):
        assert mx.srocc([10, 20, 30], [0.1, 0.5, 0.9]) == 1.0

    def test_hand_example(self):
        # D = (-1, 1, 0), sum D^2 = 2, 1 - 12/24 = 0.5
        assert mx.srocc([1, 2, 3], [2, 1, 3]) == pytest.approx(0.5, abs=1e-12)

    def test_full_reversal(self):
        assert mx.srocc([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0

    def test_monotone_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = rng.integers(3, 40)
            y = rng.standard_normal(n)
            yh = rng.standard_normal(n)
            s = mx.srocc(y, yh)
            assert mx.srocc(y, np.exp(2.0 * yh) + 1.0) == pytest.approx(s, abs=1e-12)

    def test_matches_displayed_formula_tie_free(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            n = int(rng.integers(3, 51))
            y = rng.permutation(n).astype(float)
            yh = rng.standard_normal(n)
            assert mx.srocc(y, yh) == pytest.approx(srocc_displayed_formula(y, yh), abs=1e-12)

    def test_ties_use_average_ranks(self):
        y = [1.0, 1.0, 2.0, 3.0]
        yh = [0.5, 0.6, 0.7, 0.8]
        expected = mx.plcc(mx.average_ranks(y), mx.average_ranks(yh))
        assert mx.srocc(y, yh) == pytest.approx(expected, abs=1e-15)
        assert mx.srocc(y, yh) == pytest.approx(
            scipy.stats.spearmanr(y, yh).statistic, abs=1e-12)


class TestKrocc:
    def test_hand_example(self):
        # concordant 2, discordant 1 -> tau = 2*1/(3*2) = 1/3
        assert mx.krocc([1, 2, 3], [2, 1, 3]) == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_identical_and_reversed(self):
        assert mx.krocc([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0
        assert mx.krocc([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0

    def test_all_pairs_tied_degenerate(self):
        with pytest.raises(DegenerateInput):
            mx.krocc([1, 1, 1], [1, 2, 3])

    def test_matches_pair_enumeration(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            n = int(rng.integers(2, 51))
            # occasional ties via rounding
            y = np.round(rng.standard_normal(n), 1)
            yh = np.round(rng.standard_normal(n), 1)
            try:
                got = mx.krocc(y, yh)
            except DegenerateInput:
                continue
            assert got == krocc_pair_oracle(y, yh)

    def test_matches_scipy_tau_when_tie_free(self):
        rng = np.random.default_rng(5)
        y = rng.permutation(30).astype(float)
        yh = rng.standard_normal(30)
        assert mx.krocc(y, yh) == pytest.approx(
            scipy.stats.kendalltau(y, yh).statistic, abs=1e-12)


class TestErrorMetrics:
    def test_identity_zero(self):
        y = [0.3, 0.7, 0.9]
        assert mx.mae(y, y) == 0.0 and mx.rmse(y, y) == 0.0

    def test_unit_offsets(self):
        assert mx.mae([0, 0], [1, -1]) == 1.0
        assert mx.rmse([0, 0], [1, -1]) == 1.0

    def test_rmse_exceeds_mae_witness(self):
        assert mx.mae([0, 0], [0, 2]) == 1.0
        assert mx.rmse([0, 0], [0, 2]) == pytest.approx(np.sqrt(2.0), abs=1e-15)


class TestCombinedLoss:
    def test_zero_at_perfect_prediction(self):
        y = [0.1, 0.4, 0.8, 0.2]
        loss, _ = mx.combined_loss(y, y)
        assert abs(loss) <= 1e-9

    def test_reversed_pair(self):
        loss, _ = mx.combined_loss([0.0, 1.0], [1.0, 0.0])
        assert loss == pytest.approx(21.0, abs=1e-8)

    def test_affine_shift_leaves_only_mae(self):
        loss, _ = mx.combined_loss([1.0, 2.0, 3.0], [2.0, 3.0, 4.0])
        assert loss == pytest.approx(1.0, abs=1e-9)

    def test_constant_truth_degenerate(self):
        with pytest.raises(DegenerateInput):
            mx.combined_loss([1.0, 1.0], [0.5, 0.7])

    def test_constant_prediction_finite(self):
        loss, grad = mx.combined_loss([0.0, 0.5, 1.0], [0.4, 0.4, 0.4])
        assert np.isfinite(loss) and np.all(np.isfinite(grad))

    def test_gradient_matches_finite_differences(self):
        # fourth-order symmetric stencil: rounding noise ~1e-11 at eps=1e-4,
        # comfortably below the 1e-7 relative target
        rng = np.random.default_rng(6)
        cfg = mx.LossConfig()
        for _ in range(50):
            n = int(rng.integers(3, 20))
            y = rng.standard_normal(n)
            yh = rng.standard_normal(n)
            if np.min(np.abs(yh - y)) < 1e-3:
                continue  # stay away from the MAE kink
            _, grad = mx.combined_loss(y, yh, cfg)
            eps = 1e-4
            for i in range(n):
                e = np.zeros(n)
                e[i] = eps

                def at(v):
                    return mx.combined_loss(y, v, cfg)[0]

                num = (-at(yh + 2 * e) + 8 * at(yh + e) - 8 * at(yh - e) + at(yh - 2 * e)) / (12 * eps)
                rel = abs(grad[i] - num) / max(abs(grad[i]), abs(num), 1e-8)
                assert rel <= 1e-7

    def test_nonnegative_with_equality_condition(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            y = rng.standard_normal(8)
            yh = rng.standard_normal(8)
            loss, _ = mx.combined_loss(y, yh)
            assert loss >= 0.0

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            mx.LossConfig(lambda1=0.0, lambda2=0.0)
        with pytest.raises(ValueError):
            mx.LossConfig(lambda1=-1.0)


class TestReport:
    def test_perfect_model(self):
        r = mx.compute_report([1, 2, 3], [1, 2, 3])
        assert (r.plcc, r.srocc, r.krocc) == (1.0, 1.0, 1.0)
        assert r.mae == 0.0 and r.rmse == 0.0 and r.n == 3

    def test_constant_prediction_surfaced(self):
        r = mx.compute_report([1, 2, 3], [5, 5, 5])
        assert r.plcc is None and r.srocc is None and r.krocc is None
        assert r.mae == pytest.approx(3.0)
        assert "degenerate" in r.to_text()
        assert "nan" in r.to_csv()
