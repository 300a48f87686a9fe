"""Synthetic data generation, coverage studies, power curves, and diagnostics.

The synthetic generator draws covariates from the same dynamics class the
models fit and generates competing-risk events month by month with per-month
event probability ``1 - exp(-(lambda_1 + lambda_2))``, the type chosen
proportionally to the intensities. Using the fitting discretization in the
generator isolates method error from discretization mismatch.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from ._rng import seed_int, substream
from .dynamics import CovariateDynamics, DynamicsParams, stationary_factor_cov, theta_apply
from .forecast import forecast_default_probabilities, risk_set_from_events
from .hazard import CompetingRisksHazard
from .panel import CENSORED, DEFAULT, OTHER_EXIT, EventRecord, FirmPanel, difference_order3, month_label
from .poisson_binomial import pb_cdf
from .uncertainty import aggregate_pi
from .validation import check_level

__all__ = [
    "SyntheticScenario",
    "RocCurve",
    "LogisticFit",
    "default_hazard_coefficients",
    "default_dynamics",
    "generate_scenario",
    "truncate_for_training",
    "realized_cumulative_defaults",
    "coverage_study",
    "write_coverage_csv",
    "power_curve",
    "write_roc_csv",
    "logistic_interaction",
    "write_logistic_csv",
]

# Simulation-design hazard coefficients, identical for both event types.
_BETA_ROW = (-5.26, 0.1, -1.2, -0.045, -0.084)

# Mean-reversion rates and factor transition used by the default synthetic
# dynamics; loadings and noise scales are fixed synthetic stand-ins sized so
# levels wander on realistic scales.
_KAPPA = (0.63766, 0.63551, 0.89208, 0.63546, -0.00714)
_TRANSITION = ((0.3734, 0.2144), (-0.0599, 0.4803))


@dataclass(frozen=True)
class SyntheticScenario:
    """Ground truth for one synthetic data set."""

    n: int
    beta: np.ndarray
    dynamics: DynamicsParams
    tau: int
    seed: int


def default_hazard_coefficients() -> np.ndarray:
    """Both event types share one coefficient row in the simulation design."""
    return np.array([_BETA_ROW, _BETA_ROW], dtype=float)


def default_dynamics(n: int, q: int = 2) -> DynamicsParams:
    """Deterministic synthetic covariate-process truth for ``n`` firms."""
    m = 2 * n + 2
    rng = substream(20_08, "dynamics-truth", n, q)
    loadings = np.zeros((m, q))
    base_d = 0.16 + 0.05 * rng.standard_normal(n)
    base_v = 0.05 + 0.02 * rng.standard_normal(n)
    loadings[:n, 0] = base_d
    loadings[n : 2 * n, 0] = base_v
    loadings[2 * n, 0] = 0.05
    loadings[2 * n + 1, 0] = 0.02
    if q >= 2:
        loadings[:n, 1] = 0.04 * rng.standard_normal(n)
        loadings[n : 2 * n, 1] = -0.03 + 0.01 * rng.standard_normal(n)
        loadings[2 * n, 1] = 0.02
        loadings[2 * n + 1, 1] = 0.015
    idio = np.empty(m)
    idio[:n] = 0.09
    idio[n : 2 * n] = 0.012
    idio[2 * n] = 0.02
    idio[2 * n + 1] = 0.004
    transition = np.asarray(_TRANSITION, dtype=float)[:q, :q]
    factor_cov = np.array([[0.35, 0.05], [0.05, 0.20]])[:q, :q]
    return DynamicsParams(
        mu=np.zeros(m),
        kappa=np.asarray(_KAPPA, dtype=float),
        loadings=loadings,
        transition=transition,
        idio_var=idio,
        factor_cov=factor_cov,
    )


def _initial_levels(n: int, rng) -> np.ndarray:
    m = 2 * n + 2
    lev = np.empty((3, m))
    d0 = 3.0 + 1.0 * rng.standard_normal(n)
    v0 = 0.05 + 0.25 * rng.standard_normal(n)
    r0 = 4.0 + 0.3 * rng.standard_normal()
    s0 = 0.05 + 0.10 * rng.standard_normal()
    for j in range(3):
        lev[j, :n] = d0 + 0.05 * rng.standard_normal(n)
        lev[j, n : 2 * n] = v0 + 0.02 * rng.standard_normal(n)
        lev[j, 2 * n] = r0 + 0.05 * rng.standard_normal()
        lev[j, 2 * n + 1] = s0 + 0.02 * rng.standard_normal()
    return lev


def generate_scenario(
    n: int,
    seed: int,
    *,
    tau: int = 203,
    beta=None,
    dynamics: DynamicsParams | None = None,
    truncate_at_event: bool = True,
    origin_label: str = "1990-01",
):
    """Simulate a level panel and competing-risk events from known truth.

    Covariate differences follow ``dynamics`` (the deterministic synthetic
    truth by default); levels integrate them from drawn initial months; event
    times are drawn month by month and, when ``truncate_at_event`` is set,
    each firm's covariates stop at its event month, mirroring how real panels
    end. Fully deterministic given ``(n, seed)``.

    Returns ``(SyntheticScenario, FirmPanel, list[EventRecord])``.
    """
    if n < 2:
        raise ValueError("need at least two firms")
    if tau < 5:
        raise ValueError("tau must be at least 5 months")
    beta = default_hazard_coefficients() if beta is None else np.asarray(beta, dtype=float)
    dynamics = default_dynamics(n) if dynamics is None else dynamics
    m = 2 * n + 2
    if dynamics.m != m:
        raise ValueError("dynamics dimension does not match n")

    rng = substream(seed, "scenario")
    levels = np.empty((tau, m))
    levels[:3] = _initial_levels(n, rng)

    q = dynamics.q
    sd_e = np.sqrt(dynamics.idio_var)
    sqrt_q = np.linalg.cholesky(dynamics.factor_cov + 1e-12 * np.eye(q))
    f = rng.standard_normal(q) @ np.linalg.cholesky(
        stationary_factor_cov(dynamics.transition, dynamics.factor_cov) + 1e-12 * np.eye(q)
    ).T

    # Start the differenced process near stationarity, component-wise.
    eps0 = f @ dynamics.loadings.T + rng.standard_normal(m) * sd_e
    spread = np.array([1.0 / np.sqrt(max(1.0 - k * k, 0.05)) for k in dynamics.kappa[:4]])
    scale = np.empty(m)
    scale[:n], scale[n : 2 * n] = spread[0], spread[1]
    scale[2 * n], scale[2 * n + 1] = spread[2], spread[3]
    diff_prev = dynamics.mu + eps0 * scale
    diffs = np.empty((tau - 3, m))
    diffs[0] = diff_prev
    for t in range(1, tau - 3):
        f = dynamics.transition @ f + rng.standard_normal(q) @ sqrt_q.T
        eps = f @ dynamics.loadings.T + rng.standard_normal(m) * sd_e
        diff_prev = dynamics.mu + theta_apply(dynamics.kappa, diff_prev - dynamics.mu) + eps
        diffs[t] = diff_prev
    for t in range(3, tau):
        levels[t] = levels[t - 3] + diffs[t - 3]

    d = levels[:, :n]
    v = levels[:, n : 2 * n]
    r = levels[:, 2 * n][:, None]
    s = levels[:, 2 * n + 1][:, None]
    eta = beta[0, 0] + beta[0, 1] * d + beta[0, 2] * v + beta[0, 3] * r + beta[0, 4] * s
    lam1 = np.exp(eta)
    eta2 = beta[1, 0] + beta[1, 1] * d + beta[1, 2] * v + beta[1, 3] * r + beta[1, 4] * s
    lam2 = np.exp(eta2)
    total = lam1 + lam2
    p_event = 1.0 - np.exp(-total)

    u_event = rng.random((tau, n))
    u_type = rng.random((tau, n))
    hit = u_event < p_event
    events: list[EventRecord] = []
    values = levels.copy()
    for i in range(n):
        rows = np.nonzero(hit[:, i])[0]
        if rows.size:
            t0 = int(rows[0])
            is_default = u_type[t0, i] < lam1[t0, i] / total[t0, i]
            kind = DEFAULT if is_default else OTHER_EXIT
            events.append(EventRecord(firm_id=f"firm{i:04d}", month=t0 + 1, kind=kind))
            if truncate_at_event and t0 + 1 < tau:
                values[t0 + 1:, i] = np.nan
                values[t0 + 1:, n + i] = np.nan
        else:
            events.append(EventRecord(firm_id=f"firm{i:04d}", month=tau, kind=CENSORED))

    start = (int(origin_label[:4]) * 12) + int(origin_label[5:7]) - 1
    panel = FirmPanel(
        firm_ids=tuple(f"firm{i:04d}" for i in range(n)),
        time_index=tuple(month_label(start + t) for t in range(tau)),
        values=values,
    )
    scenario = SyntheticScenario(n=n, beta=beta, dynamics=dynamics, tau=tau, seed=seed)
    return scenario, panel, events


def truncate_for_training(panel: FirmPanel, events, origin: int):
    """Cut the panel and events at a forecast origin (1-based month).

    Events after the origin become censored-at-origin records, exactly what a
    forecaster standing at ``origin`` would have seen.
    """
    if not 4 <= origin <= panel.n_periods:
        raise ValueError(f"origin must lie in [4, {panel.n_periods}], got {origin}")
    sub = FirmPanel(
        firm_ids=panel.firm_ids,
        time_index=panel.time_index[:origin],
        values=panel.values[:origin].copy(),
    )
    out = []
    for rec in events:
        if rec.month <= origin and rec.kind != CENSORED:
            out.append(rec)
        elif rec.kind == CENSORED and rec.month < origin:
            out.append(rec)  # firm left observation before the origin
        else:
            out.append(EventRecord(firm_id=rec.firm_id, month=origin, kind=CENSORED))
    return sub, out


def realized_cumulative_defaults(events, risk_set, origin: int, horizons) -> np.ndarray:
    """True cumulative default counts among ``risk_set`` after ``origin``."""
    rs = set(risk_set)
    months = [
        rec.month for rec in events
        if rec.kind == DEFAULT and rec.firm_id in rs and rec.month > origin
    ]
    return np.array([sum(1 for t in months if t <= origin + s) for s in horizons], dtype=float)


def _coverage_rep(n, rep, *, levels, horizons, B, n_paths, tau_history, seed, q, em_max_iter):
    scen, panel, events = generate_scenario(
        n, seed_int(seed, "coverage", n, rep), tau=tau_history + max(horizons)
    )
    train_panel, train_events = truncate_for_training(panel, events, tau_history)
    risk_set = risk_set_from_events(train_events)
    if len(risk_set) < 2:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        hazard = CompetingRisksHazard().fit(train_panel, train_events)
        dynamics = CovariateDynamics(q=q, max_iter=em_max_iter, strict=False).fit(
            difference_order3(train_panel)
        )
        base = forecast_default_probabilities(
            hazard.beta_,
            dynamics.params_,
            train_panel,
            risk_set=risk_set,
            horizons=horizons,
            n_paths=n_paths,
            seed=(seed_int(seed, "coverage", n, rep), "base"),
            factor_state=dynamics.factor_state(),
            path_thin=n_paths,
        )
        alphas = [1.0 - lv for lv in levels]
        calibrated = aggregate_pi(
            hazard,
            dynamics,
            train_panel,
            risk_set=base.firm_ids,
            horizons=horizons,
            alpha=alphas,
            B=B,
            n_paths=n_paths,
            seed=seed_int(seed, "coverage", n, rep, "boot"),
            em_max_iter=em_max_iter,
        )
    truth = realized_cumulative_defaults(events, base.firm_ids, tau_history, horizons)
    hits = {}
    for lv in levels:
        a = 1.0 - lv
        for j, s in enumerate(horizons):
            dist = pb_cdf(base.rho_hat[:, j])
            lo, hi = dist.quantile(a / 2.0), dist.quantile(1.0 - a / 2.0)
            hits[(round(lv, 6), "naive", s)] = lo <= truth[j] <= hi
    for pi in calibrated:
        j = list(horizons).index(pi.horizon)
        hits[(round(pi.level, 6), "calibrated", pi.horizon)] = (
            pi.lower <= truth[j] <= pi.upper
        )
    return hits


def coverage_study(
    n_values,
    *,
    reps: int,
    levels=(0.90, 0.95),
    horizons=tuple(range(1, 7)),
    B: int = 100,
    n_paths: int = 100,
    tau_history: int = 123,
    seed: int = 0,
    q: int = 2,
    em_max_iter: int = 25,
    n_jobs: int = 1,
) -> list[dict]:
    """Empirical interval coverage over repeated synthetic worlds.

    For each replication: draw a fresh world from truth, fit everything on
    the history, build naive and calibrated intervals for cumulative default
    counts, and check them against the realized future. Returns plot-ready
    rows ``{n, level, method, horizon, coverage, se, reps}``.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    for lv in levels:
        check_level(lv)
    rows = []
    for n in n_values:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_coverage_rep)(
                n,
                rep,
                levels=tuple(levels),
                horizons=tuple(horizons),
                B=B,
                n_paths=n_paths,
                tau_history=tau_history,
                seed=seed,
                q=q,
                em_max_iter=em_max_iter,
            )
            for rep in range(reps)
        )
        results = [r for r in results if r is not None]
        used = len(results)
        if used == 0:
            raise RuntimeError(f"no usable coverage replication for n = {n}")
        for lv in levels:
            for method in ("naive", "calibrated"):
                for s in horizons:
                    key = (round(lv, 6), method, s)
                    cov = float(np.mean([r[key] for r in results]))
                    rows.append(
                        {
                            "n": n,
                            "level": lv,
                            "method": method,
                            "horizon": s,
                            "coverage": cov,
                            "se": float(np.sqrt(cov * (1.0 - cov) / used)),
                            "reps": used,
                        }
                    )
    return rows


def write_coverage_csv(rows, path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["n", "level", "method", "horizon", "coverage", "se", "reps"])
        for row in rows:
            writer.writerow(
                [
                    row["n"],
                    repr(float(row["level"])),
                    row["method"],
                    row["horizon"],
                    repr(float(row["coverage"])),
                    repr(float(row["se"])),
                    row["reps"],
                ]
            )


@dataclass(frozen=True)
class RocCurve:
    """Ranking performance of a score against realized outcomes."""

    thresholds: np.ndarray
    tpr: np.ndarray         # cumulative fraction of defaults captured
    fpr: np.ndarray         # cumulative fraction of survivors passed
    percentile: np.ndarray  # fraction of all firms considered
    auc: float


def power_curve(scores, outcomes) -> RocCurve:
    """Curve of defaults captured as one descends the score ranking.

    Firms are swept from the highest score down; tied scores move together,
    which gives tied pairs the conventional half credit in the area. The
    area under the (fpr, tpr) curve equals the probability that a random
    defaulted firm outranks a random surviving one.
    """
    scores = np.asarray(scores, dtype=float)
    outcomes = np.asarray(outcomes, dtype=int)
    if scores.shape != outcomes.shape or scores.ndim != 1:
        raise ValueError("scores and outcomes must be 1-d and aligned")
    pos = int(outcomes.sum())
    neg = outcomes.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("need at least one default and one non-default for a power curve")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_out = outcomes[order]
    boundaries = np.nonzero(np.diff(sorted_scores))[0]
    ends = np.append(boundaries, scores.size - 1)
    cum_tp = np.cumsum(sorted_out)[ends]
    cum_n = ends + 1
    cum_fp = cum_n - cum_tp
    tpr = np.concatenate([[0.0], cum_tp / pos])
    fpr = np.concatenate([[0.0], cum_fp / neg])
    percentile = np.concatenate([[0.0], cum_n / scores.size])
    thresholds = np.concatenate([[np.inf], sorted_scores[ends]])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(thresholds=thresholds, tpr=tpr, fpr=fpr, percentile=percentile, auc=auc)


def write_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["percentile", "tpr"])
        for p, t in zip(curve.percentile, curve.tpr):
            writer.writerow([repr(float(p)), repr(float(t))])


@dataclass(frozen=True)
class LogisticFit:
    """IRLS logistic regression summary shaped like a standard GLM table."""

    terms: tuple
    estimates: np.ndarray
    std_errors: np.ndarray
    z_values: np.ndarray
    p_values: np.ndarray
    deviance: float
    null_deviance: float
    n_iter: int
    converged: bool


def _irls(x: np.ndarray, y: np.ndarray, max_iter: int = 50, tol: float = 1e-10):
    beta = np.zeros(x.shape[1])
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = np.clip(x @ beta, -30.0, 30.0)
        mu = 1.0 / (1.0 + np.exp(-eta))
        w = np.maximum(mu * (1.0 - mu), 1e-10)
        grad = x.T @ (y - mu)
        hess = x.T @ (w[:, None] * x)
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    if not converged or np.max(np.abs(beta)) > 25.0:
        warnings.warn(
            "possible separation: logistic coefficients are diverging; "
            "estimates reported at the iteration cap",
            UserWarning,
            stacklevel=3,
        )
        converged = False
    eta = np.clip(x @ beta, -30.0, 30.0)
    mu = 1.0 / (1.0 + np.exp(-eta))
    deviance = -2.0 * float(np.sum(y * np.log(mu) + (1.0 - y) * np.log(1.0 - mu)))
    return beta, mu, deviance, it, converged


def logistic_interaction(outcomes, point_predictions, pi_widths) -> LogisticFit:
    """Logit of default status on PI width, point prediction, and interaction.

    The interaction term is the paper-and-pencil way to ask whether forecast
    uncertainty carries signal beyond the point forecast itself.
    """
    y = np.asarray(outcomes, dtype=float).ravel()
    point = np.asarray(point_predictions, dtype=float).ravel()
    width = np.asarray(pi_widths, dtype=float).ravel()
    if not (y.size == point.size == width.size):
        raise ValueError("inputs must be aligned")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("outcomes must be 0/1")
    x = np.column_stack([np.ones(y.size), width, point, width * point])
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise ValueError("design matrix is rank deficient")
    beta, mu, deviance, n_iter, converged = _irls(x, y)
    w = np.maximum(mu * (1.0 - mu), 1e-10)
    cov = np.linalg.inv(x.T @ (w[:, None] * x))
    se = np.sqrt(np.diag(cov))
    z = beta / se
    p = 2.0 * stats.norm.sf(np.abs(z))
    p_bar = y.mean()
    if p_bar in (0.0, 1.0):
        null_dev = 0.0
    else:
        null_dev = -2.0 * float(
            y.size * (p_bar * np.log(p_bar) + (1.0 - p_bar) * np.log(1.0 - p_bar))
        )
    return LogisticFit(
        terms=("intercept", "pi_width", "point_prediction", "width_x_point"),
        estimates=beta,
        std_errors=se,
        z_values=z,
        p_values=p,
        deviance=deviance,
        null_deviance=null_dev,
        n_iter=n_iter,
        converged=converged,
    )


def write_logistic_csv(fit: LogisticFit, path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["term", "estimate", "std_error", "z_value", "p_value"])
        for i, term in enumerate(fit.terms):
            writer.writerow(
                [
                    term,
                    repr(float(fit.estimates[i])),
                    repr(float(fit.std_errors[i])),
                    repr(float(fit.z_values[i])),
                    repr(float(fit.p_values[i])),
                ]
            )
