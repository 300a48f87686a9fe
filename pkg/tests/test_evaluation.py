from __future__ import annotations

import numpy as np
import pytest

from defaultcast.evaluation import (
    default_dynamics,
    default_hazard_coefficients,
    generate_scenario,
    logistic_interaction,
    power_curve,
    realized_cumulative_defaults,
    truncate_for_training,
    write_logistic_csv,
    write_roc_csv,
)
from defaultcast.panel import CENSORED, DEFAULT, OTHER_EXIT

from _oracles import concordance_auc


class TestGenerateScenario:
    def test_deterministic_given_seed(self):
        a = generate_scenario(12, seed=5, tau=40)
        b = generate_scenario(12, seed=5, tau=40)
        np.testing.assert_array_equal(a[1].values, b[1].values)
        assert [(e.firm_id, e.month, e.kind) for e in a[2]] == [
            (e.firm_id, e.month, e.kind) for e in b[2]
        ]

    def test_all_censored_when_intensities_vanish(self):
        beta = np.full((2, 5), 0.0)
        beta[:, 0] = -60.0
        _, _, events = generate_scenario(10, seed=1, tau=30, beta=beta)
        assert all(e.kind == CENSORED for e in events)

    def test_identical_intensities_balance_event_types(self):
        # Both event types share one coefficient row, so defaults and other
        # exits are exchangeable; their counts should agree within noise.
        counts = {DEFAULT: 0, OTHER_EXIT: 0}
        for seed in range(8):
            _, _, events = generate_scenario(150, seed=seed, tau=120)
            for e in events:
                if e.kind in counts:
                    counts[e.kind] += 1
        total = counts[DEFAULT] + counts[OTHER_EXIT]
        se = 0.5 * np.sqrt(total)
        assert abs(counts[DEFAULT] - total / 2) <= 3 * se

    def test_event_frequency_matches_hazard_scale(self):
        scen, panel, events = generate_scenario(200, seed=3, tau=100)
        n = panel.n_firms
        levels = panel.values
        d, v = levels[:, :n], levels[:, n : 2 * n]
        r, s = levels[:, 2 * n][:, None], levels[:, 2 * n + 1][:, None]
        beta = scen.beta
        lam = sum(
            np.exp(beta[k, 0] + beta[k, 1] * d + beta[k, 2] * v + beta[k, 3] * r + beta[k, 4] * s)
            for k in range(2)
        )
        p_event = 1.0 - np.exp(-lam)
        observed_cells = ~np.isnan(d)
        expected_events = float(np.nansum(np.where(observed_cells, p_event, 0.0)))
        n_events = sum(e.kind != CENSORED for e in events)
        se = np.sqrt(expected_events)
        assert abs(n_events - expected_events) <= 3 * se

    def test_windows_truncated_at_event(self):
        _, panel, events = generate_scenario(30, seed=7, tau=60)
        n = panel.n_firms
        for e in events:
            if e.kind == CENSORED:
                continue
            i = panel.firm_ids.index(e.firm_id)
            if e.month < panel.n_periods:
                assert np.isnan(panel.values[e.month :, i]).all()
                assert not np.isnan(panel.values[e.month - 1, i])

    def test_truncate_for_training(self):
        _, panel, events = generate_scenario(20, seed=2, tau=50)
        train_panel, train_events = truncate_for_training(panel, events, 40)
        assert train_panel.n_periods == 40
        assert all(e.month <= 40 for e in train_events)
        for orig, trained in zip(events, train_events):
            if orig.month > 40 or (orig.kind == CENSORED and orig.month >= 40):
                assert trained.kind == CENSORED and trained.month == 40

    def test_realized_cumulative_counts(self):
        _, panel, events = generate_scenario(50, seed=11, tau=60)
        origin = 48
        _, train_events = truncate_for_training(panel, events, origin)
        rs = [e.firm_id for e in train_events if e.kind == CENSORED and e.month == origin]
        counts = realized_cumulative_defaults(events, rs, origin, range(1, 13))
        assert np.all(np.diff(counts) >= 0)
        direct = sum(
            1
            for e in events
            if e.kind == DEFAULT and e.firm_id in set(rs) and origin < e.month <= origin + 12
        )
        assert counts[-1] == direct

    def test_default_truth_shapes(self):
        params = default_dynamics(7)
        assert params.m == 16 and params.q == 2
        beta = default_hazard_coefficients()
        np.testing.assert_array_equal(beta[0], beta[1])


class TestPowerCurve:
    def test_perfect_ranking(self):
        curve = power_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert curve.auc == pytest.approx(1.0)

    def test_reversed_ranking(self):
        curve = power_curve([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])
        assert curve.auc == pytest.approx(0.0)

    def test_hand_computed_half(self):
        curve = power_curve([0.9, 0.4, 0.1], [1, 0, 1])
        assert curve.auc == pytest.approx(0.5)

    def test_matches_concordance_oracle_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(4, 40))
            scores = np.round(rng.random(n), 1)  # rounding forces ties
            outcomes = rng.integers(0, 2, n)
            if outcomes.min() == outcomes.max():
                outcomes[0] = 1 - outcomes[0]
            assert power_curve(scores, outcomes).auc == pytest.approx(
                concordance_auc(scores, outcomes), abs=1e-10
            )

    def test_auc_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        scores = rng.random(60)
        outcomes = rng.integers(0, 2, 60)
        outcomes[0], outcomes[1] = 0, 1
        base = power_curve(scores, outcomes).auc
        assert power_curve(np.exp(3 * scores), outcomes).auc == pytest.approx(base)

    def test_curve_monotone_and_ends_at_one(self):
        rng = np.random.default_rng(2)
        scores = rng.random(30)
        outcomes = rng.integers(0, 2, 30)
        outcomes[0], outcomes[1] = 0, 1
        curve = power_curve(scores, outcomes)
        assert np.all(np.diff(curve.tpr) >= 0)
        assert np.all(np.diff(curve.percentile) >= 0)
        assert curve.tpr[-1] == pytest.approx(1.0)
        assert curve.percentile[-1] == pytest.approx(1.0)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            power_curve([0.1, 0.2], [1, 1])

    def test_csv(self, tmp_path):
        curve = power_curve([0.9, 0.4, 0.1], [1, 0, 1])
        write_roc_csv(curve, tmp_path / "roc.csv")
        lines = (tmp_path / "roc.csv").read_text().strip().splitlines()
        assert lines[0] == "percentile,tpr"
        assert len(lines) == curve.percentile.size + 1


class TestLogisticInteraction:
    @staticmethod
    def _simulate(truth, n, seed):
        rng = np.random.default_rng(seed)
        width = rng.uniform(0.0, 1.0, n)
        point = rng.uniform(0.0, 0.5, n)
        eta = truth[0] + truth[1] * width + truth[2] * point + truth[3] * width * point
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
        return y, point, width

    def test_recovery_within_wald_intervals(self):
        truth = np.array([-2.0, 0.0, 3.0, 0.0])
        hits = np.zeros(4)
        runs = 40
        for seed in range(runs):
            y, point, width = self._simulate(truth, 5000, seed)
            fit = logistic_interaction(y, point, width)
            for j in range(4):
                lo = fit.estimates[j] - 1.96 * fit.std_errors[j]
                hi = fit.estimates[j] + 1.96 * fit.std_errors[j]
                hits[j] += lo <= truth[j] <= hi
        assert np.all(hits >= 0.9 * runs), hits

    def test_intercept_only_when_covariates_degenerate(self):
        rng = np.random.default_rng(5)
        y = rng.integers(0, 2, 400).astype(float)
        with pytest.raises(ValueError, match="rank"):
            logistic_interaction(y, np.zeros(400), np.zeros(400))

    def test_null_deviance_for_pure_noise(self):
        rng = np.random.default_rng(6)
        y = rng.integers(0, 2, 2000).astype(float)
        width = rng.random(2000)
        point = rng.random(2000)
        fit = logistic_interaction(y, point, width)
        assert fit.deviance <= fit.null_deviance + 1e-9
        assert fit.null_deviance - fit.deviance < 20.0  # noise-level improvement

    def test_separation_warns(self):
        rng = np.random.default_rng(8)
        width = rng.random(200)
        point = rng.random(200)
        y = (width + 2.0 * point > 1.2).astype(float)
        with pytest.warns(UserWarning, match="separation"):
            logistic_interaction(y, point, width)

    def test_output_table_schema(self, tmp_path):
        y, point, width = self._simulate(np.array([-2.0, 0.5, 2.0, -1.0]), 3000, 0)
        fit = logistic_interaction(y, point, width)
        assert fit.terms == ("intercept", "pi_width", "point_prediction", "width_x_point")
        write_logistic_csv(fit, tmp_path / "logit.csv")
        lines = (tmp_path / "logit.csv").read_text().strip().splitlines()
        assert lines[0] == "term,estimate,std_error,z_value,p_value"
        assert len(lines) == 5
