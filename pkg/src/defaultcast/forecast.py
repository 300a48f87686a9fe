"""Multiperiod default-probability forecasting by Monte Carlo.

For each simulated future covariate path, the probability that a firm
defaults within ``s`` months of the panel end is

    rho*(s) = sum_{t = tau+1 .. tau+s} lambda_1(t) * exp(-[Lambda(t) - Lambda(tau)])

with both event types in the cumulative intensity and the same monthly
piecewise-constant rule used when fitting, so estimation and prediction share
one discretization. Point forecasts average ``rho*`` over simulated paths;
aggregate expected counts sum the per-firm means over the risk set.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .dynamics import CovariateDynamics, DynamicsParams, simulate_future_paths
from .hazard import CompetingRisksHazard
from .panel import (
    CENSORED,
    EventRecord,
    FirmPanel,
    difference_order3,
)
from .validation import carry_forward

__all__ = [
    "FirmForecast",
    "ForecastResult",
    "path_default_probability",
    "forecast_default_probabilities",
    "risk_set_from_events",
    "DefaultRiskForecaster",
    "write_forecast_csv",
]

_PATH_CHUNK = 256  # paths per simulation block; fixed so draws are reproducible
_STALE_MONTHS = 12


@dataclass(frozen=True)
class FirmForecast:
    """One firm's per-horizon default probabilities and their path samples."""

    firm_id: str
    horizons: tuple
    rho_hat: np.ndarray       # (S,)
    path_samples: np.ndarray  # (M_kept, S)
    n_paths: int


@dataclass(frozen=True)
class ForecastResult:
    """Risk-set-wide forecast: per-firm probabilities and aggregate counts."""

    firm_ids: tuple
    horizons: tuple
    rho_hat: np.ndarray          # (n', S) per-firm mean probabilities
    expected_counts: np.ndarray  # (S,) = column sums of rho_hat
    path_samples: np.ndarray     # (M_kept, n', S) retained path probabilities
    n_paths: int
    seed: object
    excluded: tuple
    origin: str
    event_type: int = 0

    @property
    def n_firms(self) -> int:
        return len(self.firm_ids)

    def firm(self, firm_id: str) -> FirmForecast:
        i = self.firm_ids.index(firm_id)
        return FirmForecast(
            firm_id=firm_id,
            horizons=self.horizons,
            rho_hat=self.rho_hat[i],
            path_samples=self.path_samples[:, i, :],
            n_paths=self.n_paths,
        )


def _check_horizons(horizons) -> np.ndarray:
    h = np.asarray(sorted(set(int(v) for v in horizons)), dtype=int)
    if h.size == 0 or h[0] < 1:
        raise ValueError("horizons must be positive month counts")
    return h


def path_default_probability(beta, future_covariates, horizons, event_type: int = 0):
    """Per-horizon event probability along one simulated covariate path.

    ``future_covariates`` holds one ``(D, V, r, S)`` row per future month
    starting at ``tau + 1``; it must reach the largest horizon.
    """
    beta = np.asarray(beta, dtype=float)
    path = np.asarray(future_covariates, dtype=float)
    h = _check_horizons(horizons)
    if path.ndim != 2 or path.shape[1] != 4:
        raise ValueError("future_covariates must have shape (months, 4)")
    if path.shape[0] < h[-1]:
        raise ValueError(
            f"path covers {path.shape[0]} months but horizon {h[-1]} was requested"
        )
    eta = beta[:, 0][:, None] + beta[:, 1:] @ path.T  # (2, months)
    rates = np.exp(eta)
    survival = np.exp(-np.cumsum(rates.sum(axis=0)))
    rho = np.cumsum(rates[event_type] * survival)
    return np.minimum(rho[h - 1], 1.0)


def risk_set_from_events(events: list[EventRecord]) -> tuple:
    """Firms still event-free at the end of the panel."""
    return tuple(rec.firm_id for rec in events if rec.kind == CENSORED)


def _rho_paths(beta, lev, n_firms, horizon_idx, event_type):
    """Vectorized per-path probabilities from simulated level paths.

    ``lev`` has shape (paths, months, 2*n'+2) in stacked sub-layout; returns
    (paths, n', S).
    """
    d = lev[:, :, :n_firms]
    v = lev[:, :, n_firms : 2 * n_firms]
    r = lev[:, :, 2 * n_firms][:, :, None]
    s = lev[:, :, 2 * n_firms + 1][:, :, None]
    total = None
    chosen = None
    for k in range(2):
        b = beta[k]
        rate = np.exp(b[0] + b[1] * d + b[2] * v + b[3] * r + b[4] * s)
        total = rate if total is None else total + rate
        if k == event_type:
            chosen = rate
    survival = np.exp(-np.cumsum(total, axis=1))
    rho = np.cumsum(chosen * survival, axis=1)
    return np.minimum(rho[:, horizon_idx, :], 1.0).transpose(0, 2, 1)


def forecast_default_probabilities(
    beta,
    dynamics: DynamicsParams,
    panel: FirmPanel,
    *,
    events: list[EventRecord] | None = None,
    risk_set=None,
    horizons=tuple(range(1, 13)),
    n_paths: int = 1000,
    seed=0,
    factor_state=None,
    event_type: int = 0,
    path_thin: int = 1,
) -> ForecastResult:
    """Monte-Carlo forecast for every risk-set firm.

    Simulates ``n_paths`` joint futures of the differenced process (all firms
    and the macro series drawn together), inverts the differencing from each
    firm's carried-forward trailing levels, evaluates the per-path
    probabilities, and averages. Firms lacking the trailing levels needed for
    inversion are excluded with a warning and listed in the result.
    ``path_thin`` keeps every k-th path's samples in memory (the mean is
    always over all paths).
    """
    beta = np.asarray(beta, dtype=float)
    h = _check_horizons(horizons)
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if risk_set is None:
        if events is None:
            raise ValueError("provide either events or an explicit risk_set")
        risk_set = risk_set_from_events(events)
    risk_set = list(risk_set)
    if not risk_set:
        raise ValueError("the risk set is empty")

    n = panel.n_firms
    filled, age = carry_forward(panel.values)
    tails = filled[-3:]
    tail_age = age[-3:]

    usable, excluded = [], []
    for fid in risk_set:
        i = panel.firm_index(fid)
        cols = (i, n + i)
        if np.isnan(tails[:, cols]).any():
            excluded.append(fid)
        else:
            usable.append(fid)
            if tail_age[-1, list(cols)].max() > _STALE_MONTHS:
                warnings.warn(
                    f"firm {fid!r}: trailing covariates are "
                    f"{int(tail_age[-1, list(cols)].max())} months stale",
                    UserWarning,
                    stacklevel=2,
                )
    if excluded:
        warnings.warn(
            f"excluding {len(excluded)} risk-set firm(s) without trailing levels: "
            + ", ".join(map(repr, excluded[:5]))
            + ("..." if len(excluded) > 5 else ""),
            UserWarning,
            stacklevel=2,
        )
    if not usable:
        raise ValueError("no risk-set firm has the trailing levels needed to forecast")

    idx = np.array([panel.firm_index(f) for f in usable])
    columns = np.concatenate([idx, n + idx, [2 * n, 2 * n + 1]])
    sub = dynamics.select_columns(columns)
    n_sub = len(usable)

    diff_values = panel.values[3:] - panel.values[:-3]
    diff_filled, _ = carry_forward(diff_values[:, columns])
    start_diff = diff_filled[-1]
    start_diff = np.where(np.isnan(start_diff), sub.mu, start_diff)

    sub_tails = tails[:, columns]
    f_mean, f_cov = (None, None) if factor_state is None else factor_state

    s_max = int(h[-1])
    horizon_idx = h - 1
    keep_every = max(int(path_thin), 1)
    kept_chunks = []
    rho_sum = np.zeros((n_sub, h.size))
    done = 0
    while done < n_paths:
        c = min(_PATH_CHUNK, n_paths - done)
        rng = _chunk_rng(seed, done)
        diffs, _ = simulate_future_paths(
            sub, start_diff, s_max, c, rng, factor_mean=f_mean, factor_cov=f_cov
        )
        levels = np.empty_like(diffs)
        for step in range(s_max):
            base = sub_tails[step] if step < 3 else levels[:, step - 3]
            levels[:, step] = base + diffs[:, step]
        rho = _rho_paths(beta, levels, n_sub, horizon_idx, event_type)
        rho_sum += rho.sum(axis=0)
        kept = rho[(np.arange(done, done + c) % keep_every) == 0]
        if kept.size:
            kept_chunks.append(kept)
        done += c

    path_samples = (
        np.concatenate(kept_chunks, axis=0)
        if kept_chunks
        else np.empty((0, n_sub, h.size))
    )
    rho_hat = rho_sum / n_paths
    return ForecastResult(
        firm_ids=tuple(usable),
        horizons=tuple(int(v) for v in h),
        rho_hat=rho_hat,
        expected_counts=rho_hat.sum(axis=0),
        path_samples=path_samples,
        n_paths=n_paths,
        seed=seed,
        excluded=tuple(excluded),
        origin=panel.time_index[-1],
        event_type=event_type,
    )


def _chunk_rng(seed, offset: int):
    from ._rng import substream

    return substream(seed, "paths", offset)


class DefaultRiskForecaster(BaseEstimator):
    """End-to-end pipeline: fit both component models, then forecast.

    ``fit`` estimates the hazard regression on the level panel and the
    covariate dynamics on its order-3 differences; ``predict`` runs the
    Monte-Carlo forecast for the firms still at risk.
    """

    def __init__(
        self,
        q: int = 2,
        horizons=tuple(range(1, 13)),
        n_paths: int = 1000,
        seed=0,
        hazard_tol: float = 1e-8,
        hazard_max_iter: int = 200,
        em_tol: float = 1e-6,
        em_max_iter: int = 100,
        carry_forward_limit: int = 12,
    ):
        self.q = q
        self.horizons = horizons
        self.n_paths = n_paths
        self.seed = seed
        self.hazard_tol = hazard_tol
        self.hazard_max_iter = hazard_max_iter
        self.em_tol = em_tol
        self.em_max_iter = em_max_iter
        self.carry_forward_limit = carry_forward_limit

    def fit(self, panel: FirmPanel, events: list[EventRecord]):
        self.hazard_ = CompetingRisksHazard(
            tol=self.hazard_tol,
            max_iter=self.hazard_max_iter,
            carry_forward_limit=self.carry_forward_limit,
        ).fit(panel, events)
        self.diff_ = difference_order3(panel)
        self.dynamics_ = CovariateDynamics(
            q=self.q, tol=self.em_tol, max_iter=self.em_max_iter, strict=False
        ).fit(self.diff_)
        self.panel_ = panel
        self.events_ = list(events)
        return self

    def predict(self, horizons=None, n_paths=None, seed=None) -> ForecastResult:
        return forecast_default_probabilities(
            self.hazard_.beta_,
            self.dynamics_.params_,
            self.panel_,
            events=self.events_,
            horizons=self.horizons if horizons is None else horizons,
            n_paths=self.n_paths if n_paths is None else n_paths,
            seed=self.seed if seed is None else seed,
            factor_state=self.dynamics_.factor_state(),
        )


def write_forecast_csv(result: ForecastResult, csv_path, sidecar_path=None) -> None:
    """Write the per-firm forecasts plus a JSON sidecar of run metadata."""
    with open(csv_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["firm_id", "horizon_months", "rho_hat"])
        for i, fid in enumerate(result.firm_ids):
            for j, s in enumerate(result.horizons):
                writer.writerow([fid, s, repr(float(result.rho_hat[i, j]))])
    if sidecar_path is not None:
        meta = {
            "n_paths": result.n_paths,
            "seed": result.seed if isinstance(result.seed, (int, str)) else list(result.seed),
            "horizons": list(result.horizons),
            "excluded": list(result.excluded),
            "origin": result.origin,
            "risk_set_size": result.n_firms,
            "expected_counts": [float(v) for v in result.expected_counts],
        }
        with open(sidecar_path, "w") as handle:
            json.dump(meta, handle, indent=2, sort_keys=True)
            handle.write("\n")
