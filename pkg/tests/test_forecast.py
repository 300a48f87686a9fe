from __future__ import annotations

import numpy as np
import pytest

from defaultcast.dynamics import CovariateDynamics, DynamicsParams
from defaultcast.forecast import (
    DefaultRiskForecaster,
    forecast_default_probabilities,
    path_default_probability,
    risk_set_from_events,
    write_forecast_csv,
)
from defaultcast.hazard import CompetingRisksHazard
from defaultcast.panel import CENSORED, DEFAULT, EventRecord, difference_order3

from _oracles import closed_form_competing_risk
from conftest import make_panel


def constant_rate_beta(lam1, lam2):
    floor = -60.0
    return np.array(
        [
            [np.log(lam1) if lam1 > 0 else floor, 0, 0, 0, 0],
            [np.log(lam2) if lam2 > 0 else floor, 0, 0, 0, 0],
        ]
    )


class TestPathProbability:
    @pytest.mark.parametrize("lam1,lam2", [(0.01, 0.02), (0.005, 0.005), (0.03, 0.0)])
    def test_constant_hazard_matches_closed_form(self, lam1, lam2):
        beta = constant_rate_beta(lam1, lam2)
        rho = path_default_probability(beta, np.zeros((12, 4)), [12])[0]
        exact = closed_form_competing_risk(lam1, lam2, 12.0)
        assert abs(rho - exact) <= 0.02 * exact

    def test_zero_default_intensity_gives_zero(self):
        beta = constant_rate_beta(0.0, 0.02)
        rho = path_default_probability(beta, np.zeros((6, 4)), [1, 3, 6])
        np.testing.assert_allclose(rho, 0.0, atol=1e-20)

    def test_single_risk_exponential_limit(self):
        c = 0.02
        beta = constant_rate_beta(c, 0.0)
        for s in (6, 12, 24):
            rho = path_default_probability(beta, np.zeros((24, 4)), [s])[0]
            exact = 1.0 - np.exp(-c * s)
            assert abs(rho - exact) <= 0.02 * exact

    def test_monotone_in_horizon(self):
        rng = np.random.default_rng(0)
        beta = rng.normal(scale=0.2, size=(2, 5))
        beta[:, 0] -= 4.0
        path = rng.normal(size=(24, 4))
        rho = path_default_probability(beta, path, range(1, 25))
        assert np.all(np.diff(rho) >= 0.0)

    def test_short_path_rejected(self):
        with pytest.raises(ValueError, match="horizon"):
            path_default_probability(np.zeros((2, 5)), np.zeros((3, 4)), [6])

    def test_subdistribution_bound(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            beta = rng.normal(scale=0.5, size=(2, 5))
            path = rng.normal(size=(36, 4))
            rho1 = path_default_probability(beta, path, [36], event_type=0)[0]
            rho2 = path_default_probability(beta, path, [36], event_type=1)[0]
            assert rho1 + rho2 <= 1.0 + 1e-12


def _fitted_components(panel, events):
    hazard = CompetingRisksHazard().fit(panel, events)
    dynamics = CovariateDynamics(q=2, max_iter=40, strict=False).fit(
        difference_order3(panel)
    )
    return hazard, dynamics


class TestForecast:
    def test_single_path_equals_path_probability(self, medium_training):
        panel, events = medium_training
        hazard, dynamics = _fitted_components(panel, events)
        res = forecast_default_probabilities(
            hazard.beta_,
            dynamics.params_,
            panel,
            events=events,
            horizons=(1, 3, 6),
            n_paths=1,
            seed=3,
            factor_state=dynamics.factor_state(),
        )
        np.testing.assert_allclose(res.rho_hat, res.path_samples[0], atol=1e-15)

    def test_noiseless_model_zero_path_spread(self, medium_training):
        panel, events = medium_training
        hazard, dynamics = _fitted_components(panel, events)
        params = dynamics.params_
        frozen = DynamicsParams(
            mu=params.mu,
            kappa=params.kappa,
            loadings=params.loadings,
            transition=params.transition,
            idio_var=np.zeros(params.m),
            factor_cov=np.zeros((params.q, params.q)),
        )
        res = forecast_default_probabilities(
            hazard.beta_,
            frozen,
            panel,
            events=events,
            horizons=(1, 6),
            n_paths=16,
            seed=0,
            factor_state=(np.zeros(params.q), np.zeros((params.q, params.q))),
        )
        assert np.max(res.path_samples.std(axis=0)) == pytest.approx(0.0, abs=1e-15)

    def test_same_seed_bit_identical(self, medium_training):
        panel, events = medium_training
        hazard, dynamics = _fitted_components(panel, events)
        kwargs = dict(
            events=events,
            horizons=(1, 6, 12),
            n_paths=300,  # spans multiple path chunks
            seed=42,
            factor_state=dynamics.factor_state(),
        )
        a = forecast_default_probabilities(hazard.beta_, dynamics.params_, panel, **kwargs)
        b = forecast_default_probabilities(hazard.beta_, dynamics.params_, panel, **kwargs)
        np.testing.assert_array_equal(a.rho_hat, b.rho_hat)
        np.testing.assert_array_equal(a.path_samples, b.path_samples)

    def test_seed_consistency_across_reruns(self, medium_training):
        panel, events = medium_training
        hazard, dynamics = _fitted_components(panel, events)
        res = {}
        for seed in (1, 2):
            res[seed] = forecast_default_probabilities(
                hazard.beta_,
                dynamics.params_,
                panel,
                events=events,
                horizons=(6,),
                n_paths=2000,
                seed=seed,
                factor_state=dynamics.factor_state(),
            )
        a, b = res[1], res[2]
        se = a.path_samples[:, :, 0].std(axis=0, ddof=1) / np.sqrt(a.n_paths)
        gap = np.abs(a.rho_hat[:, 0] - b.rho_hat[:, 0])
        assert np.all(gap <= 3.0 * np.sqrt(2.0) * np.maximum(se, 1e-8))

    def test_aggregation_linearity(self, medium_training):
        panel, events = medium_training
        hazard, dynamics = _fitted_components(panel, events)
        res = forecast_default_probabilities(
            hazard.beta_,
            dynamics.params_,
            panel,
            events=events,
            horizons=(1, 3, 6),
            n_paths=40,
            seed=9,
            factor_state=dynamics.factor_state(),
        )
        np.testing.assert_allclose(res.expected_counts, res.rho_hat.sum(axis=0), atol=1e-12)
        assert np.all(np.diff(res.expected_counts) >= 0.0)

    def test_rho_hat_is_exact_path_mean(self, medium_training):
        panel, events = medium_training
        hazard, dynamics = _fitted_components(panel, events)
        res = forecast_default_probabilities(
            hazard.beta_,
            dynamics.params_,
            panel,
            events=events,
            horizons=(1, 6),
            n_paths=64,
            seed=13,
            factor_state=dynamics.factor_state(),
        )
        np.testing.assert_allclose(
            res.rho_hat, res.path_samples.mean(axis=0), atol=1e-12
        )

    def test_firm_missing_trailing_levels_excluded(self):
        rng = np.random.default_rng(0)
        n = 4
        values = rng.normal(size=(30, 2 * n + 2))
        values[:, 1] = np.nan  # firm f1's D never observed
        values[:, n + 1] = np.nan
        panel = make_panel(values)
        events = [
            EventRecord(firm_id=f"f{i}", month=30, kind=CENSORED) for i in range(n)
        ]
        hazard_beta = constant_rate_beta(0.01, 0.01)
        params = DynamicsParams(
            mu=np.zeros(2 * n + 2),
            kappa=np.zeros(5),
            loadings=np.zeros((2 * n + 2, 1)),
            transition=np.zeros((1, 1)),
            idio_var=np.full(2 * n + 2, 0.1),
            factor_cov=np.eye(1) * 0.1,
        )
        with pytest.warns(UserWarning, match="excluding"):
            res = forecast_default_probabilities(
                hazard_beta, params, panel, events=events, horizons=(3,), n_paths=4, seed=0
            )
        assert res.excluded == ("f1",)
        assert "f1" not in res.firm_ids

    def test_empty_risk_set_rejected(self, medium_training):
        panel, events = medium_training
        hazard, dynamics = _fitted_components(panel, events)
        with pytest.raises(ValueError, match="risk set"):
            forecast_default_probabilities(
                hazard.beta_, dynamics.params_, panel, risk_set=[], horizons=(1,), n_paths=1
            )

    def test_risk_set_from_events(self):
        events = [
            EventRecord(firm_id="a", month=3, kind=DEFAULT),
            EventRecord(firm_id="b", month=9, kind=CENSORED),
            EventRecord(firm_id="c", month=9, kind=CENSORED),
        ]
        assert risk_set_from_events(events) == ("b", "c")

    def test_firm_view(self, medium_training):
        panel, events = medium_training
        hazard, dynamics = _fitted_components(panel, events)
        res = forecast_default_probabilities(
            hazard.beta_,
            dynamics.params_,
            panel,
            events=events,
            horizons=(1, 6),
            n_paths=8,
            seed=1,
            factor_state=dynamics.factor_state(),
        )
        fid = res.firm_ids[0]
        view = res.firm(fid)
        np.testing.assert_array_equal(view.rho_hat, res.rho_hat[0])
        assert view.path_samples.shape == (8, 2)

    def test_csv_writer(self, tmp_path, medium_training):
        panel, events = medium_training
        hazard, dynamics = _fitted_components(panel, events)
        res = forecast_default_probabilities(
            hazard.beta_,
            dynamics.params_,
            panel,
            events=events,
            horizons=(1, 3),
            n_paths=4,
            seed=1,
            factor_state=dynamics.factor_state(),
        )
        write_forecast_csv(res, tmp_path / "f.csv", tmp_path / "f.json")
        lines = (tmp_path / "f.csv").read_text().strip().splitlines()
        assert lines[0] == "firm_id,horizon_months,rho_hat"
        assert len(lines) == 1 + 2 * res.n_firms
        import json

        meta = json.loads((tmp_path / "f.json").read_text())
        assert meta["horizons"] == [1, 3]
        assert meta["risk_set_size"] == res.n_firms


class TestForecasterEstimator:
    def test_fit_predict_pipeline(self, medium_training):
        panel, events = medium_training
        model = DefaultRiskForecaster(
            q=2, horizons=(1, 3), n_paths=16, seed=5, em_max_iter=30
        )
        res = model.fit(panel, events).predict()
        assert res.n_firms > 0
        assert np.all(res.rho_hat >= 0.0) and np.all(res.rho_hat <= 1.0)

    def test_get_params_round_trip(self):
        model = DefaultRiskForecaster(q=3, n_paths=7)
        params = model.get_params()
        assert params["q"] == 3 and params["n_paths"] == 7
        clone = DefaultRiskForecaster(**params)
        assert clone.get_params() == params
