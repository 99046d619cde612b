import numpy as np
import pytest

import vbsar.spatial_analysis as sa
from vbsar.exceptions import InputError, NumericalError
from vbsar.model import EstimatorConfig, SarEstimate, StabilityDiagnostics
from vbsar.spatial_analysis import (SimultaneousSystem, assemble_system, cumulative_spillover,
                                    group_weight_average, impulse_response, rolling_estimate,
                                    simulate_system, spillover_rows, weight_average_rows, write_tidy_csv)


def _estimate(lam, betas, names, labels=None):
    N = len(betas)
    return SarEstimate(lambda_=np.asarray(lam, float), beta_by_unit=[np.asarray(b, float) for b in betas],
                       sigma2=np.ones(N), per_equation=[], logs=[],
                       diagnostics=StabilityDiagnostics(True, 0.0),
                       unit_labels=labels or [f"u{i + 1}" for i in range(N)], exog_names=names)


def _system(B, L):
    B, L = np.asarray(B, float), np.asarray(L, float)
    return SimultaneousSystem(contemporaneous=B, lag=L, exog_coef=np.zeros((B.shape[0], 0)), exog_labels=[],
                              unit_labels=[f"u{i + 1}" for i in range(B.shape[0] // 2)],
                              condition_number=float(np.linalg.cond(B)))


RATE_NAMES = ["spread", "rate_lag", "x"]
SPREAD_NAMES = ["rate", "spread_lag", "x"]


class TestAssemble:
    def test_identity_when_decoupled(self):
        N = 3
        rate = _estimate(np.zeros((N, N)), [[0, 0, 1]] * N, [RATE_NAMES] * N)
        spread = _estimate(np.zeros((N, N)), [[0, 0, 1]] * N, [SPREAD_NAMES] * N)
        s = assemble_system(rate, spread)
        np.testing.assert_array_equal(s.contemporaneous, np.eye(2 * N))
        np.testing.assert_array_equal(s.lag, np.zeros((2 * N, 2 * N)))
        assert s.exog_coef.shape == (2 * N, 2 * N)

    def test_single_unit_layout(self):
        rate = _estimate([[0.0]], [[0.3, 0.5, 2.0]], [RATE_NAMES], ["a"])
        spread = _estimate([[0.0]], [[0.2, 0.4, 3.0]], [SPREAD_NAMES], ["a"])
        s = assemble_system(rate, spread)
        np.testing.assert_array_equal(s.contemporaneous, [[1, -0.3], [-0.2, 1]])
        np.testing.assert_array_equal(s.lag, np.diag([0.5, 0.4]))
        np.testing.assert_array_equal(s.exog_coef, np.diag([2.0, 3.0]))
        assert s.exog_labels == ["a__rate__x", "a__spread__x"]

    def test_two_unit_layout(self):
        Lr = np.array([[0, 0.1], [0.2, 0]])
        Ls = np.array([[0, 0.3], [0.4, 0]])
        rate = _estimate(Lr, [[0.11, 0.5, 1], [0.12, 0.6, 1]], [RATE_NAMES] * 2)
        spread = _estimate(Ls, [[0.21, 0.7, 1], [0.22, 0.8, 1]], [SPREAD_NAMES] * 2)
        s = assemble_system(rate, spread)
        expected = np.array([
            [1, -0.1, -0.11, 0],
            [-0.2, 1, 0, -0.12],
            [-0.21, 0, 1, -0.3],
            [0, -0.22, -0.4, 1],
        ])
        np.testing.assert_allclose(s.contemporaneous, expected)
        np.testing.assert_allclose(np.diag(s.lag), [0.5, 0.6, 0.7, 0.8])

    def test_missing_regressor(self):
        rate = _estimate([[0.0]], [[1.0]], [["x"]], ["a"])
        spread = _estimate([[0.0]], [[0.2, 0.4, 3.0]], [SPREAD_NAMES], ["a"])
        with pytest.raises(InputError, match="spread"):
            assemble_system(rate, spread)

    def test_label_mismatch(self):
        rate = _estimate([[0.0]], [[0.3, 0.5, 2.0]], [RATE_NAMES], ["a"])
        spread = _estimate([[0.0]], [[0.2, 0.4, 3.0]], [SPREAD_NAMES], ["b"])
        with pytest.raises(InputError):
            assemble_system(rate, spread)

    def test_singular_flagged(self, caplog):
        rate = _estimate([[0.0]], [[1.0, 0, 0]], [RATE_NAMES], ["a"])
        spread = _estimate([[0.0]], [[1.0, 0, 0]], [SPREAD_NAMES], ["a"])
        s = assemble_system(rate, spread)
        assert s.singular
        with pytest.raises(NumericalError):
            impulse_response(s, [1.0, 0.0], 3)


class TestImpulseResponse:
    def test_identity_dynamics(self):
        s = _system(np.eye(4), 0.5 * np.eye(4))
        out = impulse_response(s, [1, 0, 0, 0], 5)
        np.testing.assert_allclose(out[:, 0], 0.5 ** np.arange(6))
        np.testing.assert_array_equal(out[:, 1:], 0.0)

    def test_two_by_two_oracle(self):
        s = _system([[1, -0.3], [-0.3, 1]], np.zeros((2, 2)))
        out = impulse_response(s, [1, 0], 2)
        np.testing.assert_allclose(out[0], [1 / 0.91, 0.3 / 0.91], rtol=1e-14)
        np.testing.assert_allclose(out[0], [1.0989, 0.3297], atol=1e-4)
        np.testing.assert_array_equal(out[1:], 0.0)

    def test_matches_matrix_power(self):
        rng = np.random.default_rng(0)
        B = np.eye(4) - 0.2 * rng.random((4, 4))
        L = 0.3 * np.diag(rng.random(4))
        shock = rng.standard_normal(4)
        out = impulse_response(_system(B, L), shock, 6)
        M = np.linalg.solve(B, L)
        for h in range(7):
            np.testing.assert_allclose(out[h], np.linalg.matrix_power(M, h) @ np.linalg.solve(B, shock), atol=1e-13)

    def test_linear_in_shock(self):
        rng = np.random.default_rng(1)
        s = _system(np.eye(4) - 0.1 * rng.random((4, 4)), 0.4 * np.eye(4))
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        np.testing.assert_allclose(impulse_response(s, 2 * a - b, 8),
                                   2 * impulse_response(s, a, 8) - impulse_response(s, b, 8), atol=1e-13)

    def test_decays_when_stable(self):
        s = _system([[1, -0.3], [-0.3, 1]], 0.5 * np.eye(2))
        out = impulse_response(s, [1, 0], 200)
        assert np.max(np.abs(out[-1])) < 1e-12

    def test_bad_arguments(self):
        s = _system(np.eye(2), np.zeros((2, 2)))
        with pytest.raises(InputError):
            impulse_response(s, [1, 0, 0], 2)
        with pytest.raises(InputError):
            impulse_response(s, [1, 0], -1)


class TestSpillover:
    # two units, rate block only coupled
    B = np.eye(4) - np.block([[np.array([[0, 0.3], [0.3, 0]]), np.zeros((2, 2))], [np.zeros((2, 2)), np.zeros((2, 2))]])

    def test_static_example(self):
        s = _system(self.B, np.zeros((4, 4)))
        assert cumulative_spillover(s, [0], 1, "rate", 60) == pytest.approx(0.3 / 0.91, rel=1e-14)
        assert cumulative_spillover(s, [0], 1, "spread", 60) == 0.0

    def test_horizon_additivity(self):
        s = _system(self.B, 0.5 * np.eye(4))
        e = np.zeros(4)
        e[0] = 1
        irf = impulse_response(s, e, 20)
        assert cumulative_spillover(s, [0], 1, horizon=20) == pytest.approx(irf[:, 1].sum(), rel=1e-14)
        diff = cumulative_spillover(s, [0], 1, horizon=20) - cumulative_spillover(s, [0], 1, horizon=19)
        assert diff == pytest.approx(irf[20, 1], rel=1e-10)

    def test_long_horizon_converged(self):
        # persistence of B^-1 L is 0.3 / 0.7, so the tail past h = 60 is negligible
        s = _system(self.B, 0.3 * np.eye(4))
        a = cumulative_spillover(s, [0], 1, horizon=60)
        b = cumulative_spillover(s, [0], 1, horizon=120)
        assert abs(a - b) < 1e-10 * abs(b)

    def test_target_excluded(self):
        s = _system(self.B, np.zeros((4, 4)))
        assert cumulative_spillover(s, [0, 1], 1) == cumulative_spillover(s, [0], 1)
        with pytest.raises(InputError, match="empty"):
            cumulative_spillover(s, [1], 1)

    def test_cross_variable_response(self):
        B = np.array([[1, 0, -0.2, 0], [0, 1, 0, -0.2], [-0.2, 0, 1, 0], [0, -0.2, 0, 1]], float)
        B[0, 1] = -0.3
        s = _system(B, np.zeros((4, 4)))
        expected = np.linalg.solve(B, np.eye(4)[:, 3])[0]
        assert cumulative_spillover(s, [1], 0, "spread", 0, response_variable="rate") == pytest.approx(expected)

    def test_rows_skip_singleton_group(self):
        s = _system(self.B, np.zeros((4, 4)))
        s.unit_groups = {"g1": [0], "all": [0, 1]}
        rows = spillover_rows("w0", s, horizon=5)
        # target u1 has no sources in g1
        assert ("w0", "u1", "g1", "rate") not in [r[:4] for r in rows]
        assert len(rows) == 2 * (1 + 2)


class TestGroupWeights:
    def test_threshold_filter(self):
        value, empty = group_weight_average([0.0, 0.2, 0.005, 0.4], [1, 2, 3])
        assert value == pytest.approx(0.3) and not empty

    def test_negative_kept(self):
        value, _ = group_weight_average([-0.2, 0.4], [0, 1])
        assert value == pytest.approx(0.1)

    def test_all_filtered(self):
        assert group_weight_average([0.001, 0.002], [0, 1]) == (0.0, True)

    def test_empty_group(self):
        with pytest.raises(InputError):
            group_weight_average([0.1], [])

    def test_threshold_monotone_count(self):
        rng = np.random.default_rng(3)
        row = rng.normal(scale=0.1, size=50)
        counts = [np.sum(np.abs(row) > t) for t in np.linspace(0, 0.3, 31)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        prev_empty = False
        for t in np.linspace(0, 0.5, 51):
            _, empty = group_weight_average(row, range(50), t)
            assert empty or not prev_empty
            prev_empty = empty

    def test_rows_have_empty_flag(self):
        est = _estimate([[0, 0.001], [0.5, 0]], [[0, 0, 1]] * 2, [RATE_NAMES] * 2)
        rows = weight_average_rows("w", est, est, {"all": [0, 1]})
        assert rows[0][4:] == (0.0, 1) and rows[1][4:] == (0.5, 0)


class TestRolling:
    @staticmethod
    def _count(monkeypatch, T, window):
        panel, _ = simulate_system(3, T, seed=0)
        monkeypatch.setattr(sa, "estimate_sar", lambda p, c: None)
        return rolling_estimate(panel, window)

    def test_window_equal_to_sample(self, monkeypatch):
        assert len(self._count(monkeypatch, 24, 24)) == 1

    def test_window_count(self, monkeypatch):
        out = self._count(monkeypatch, 232, 24)
        assert len(out) == 209
        assert out[0].window_start == "0" and out[-1].window_start == "208"

    def test_window_too_long(self):
        panel, _ = simulate_system(3, 10, seed=0)
        with pytest.raises(InputError):
            rolling_estimate(panel, 11)
        with pytest.raises(InputError):
            rolling_estimate(panel, 1)

    def test_recovers_simulated_system(self):
        panel, truth = simulate_system(4, 300, seed=1)
        (res,) = rolling_estimate(panel, 300, EstimatorConfig(shared_first_stage=True))
        est = assemble_system(res.rate, res.spread)
        np.testing.assert_allclose(est.contemporaneous, truth.contemporaneous, atol=0.03)
        np.testing.assert_allclose(np.diag(est.lag), np.diag(truth.lag), atol=0.03)
        np.testing.assert_allclose(np.diag(est.exog_coef), 1.0, atol=0.03)

    def test_threads_match_serial(self):
        panel, _ = simulate_system(3, 30, seed=2)
        a = rolling_estimate(panel, 28, EstimatorConfig(shared_first_stage=True))
        b = rolling_estimate(panel, 28, EstimatorConfig(shared_first_stage=True, workers=2))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.rate.lambda_, y.rate.lambda_)
            np.testing.assert_array_equal(x.spread.lambda_, y.spread.lambda_)


def test_simulated_panel_marks_coupling_endogenous():
    panel, truth = simulate_system(3, 20, seed=0)
    assert panel.rate.endogenous_columns == [[0]] * 3
    assert panel.spread.endogenous_columns == [[0]] * 3
    assert panel.rate.instruments.shape == (20, 6)


def test_tidy_csv(tmp_path):
    write_tidy_csv([("w", "u1", "g", "rate", 0.1, 0)], tmp_path / "t.csv", ["empty"])
    assert (tmp_path / "t.csv").read_text() == "window_start,target,source_group,variable,value,empty\nw,u1,g,rate,0.10000000000000001,0\n"
