"""Competing-risks intensity regression with maximum-likelihood fitting.

Two event types (default and other market exit) each get a log-linear
monthly intensity in the covariates ``(D, V, r, S)`` plus an intercept. All
time integrals use the piecewise-constant monthly rule, so a firm observed
through month ``t`` contributes ``sum_{u<=t} lambda_k(u)`` to each cumulative
intensity, with covariates carried forward from their last observation.

The log likelihood separates across event types into two concave Poisson-type
terms, so each coefficient row is fitted independently by quasi-Newton ascent
with the analytic gradient, and the asymptotic covariance comes from the
(block-diagonal) observed information at the optimum.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats
from sklearn.base import BaseEstimator

from .panel import CENSORED, DEFAULT, OTHER_EXIT, EventRecord, FirmPanel
from .validation import carry_forward, check_level

__all__ = [
    "N_COEF",
    "DataCoverageError",
    "ConvergenceError",
    "SingularInformationError",
    "BoundaryWarning",
    "intensity",
    "cumulative_intensity",
    "log_likelihood",
    "log_likelihood_grad",
    "wald_interval",
    "CompetingRisksHazard",
]

N_COEF = 5  # intercept + (D, V, r, S)
_EXP_CLIP = 60.0  # keeps exp() finite during line search; never binds near an optimum


class DataCoverageError(ValueError):
    """A firm's covariate history cannot support its likelihood contribution."""


class ConvergenceError(RuntimeError):
    """Optimizer failed to meet the gradient tolerance; carries the best iterate."""

    def __init__(self, message, beta=None, log_likelihood=None, n_iter=None):
        super().__init__(message)
        self.beta = beta
        self.log_likelihood = log_likelihood
        self.n_iter = n_iter


class SingularInformationError(RuntimeError):
    """Observed information is numerically singular; names the flat direction."""


class BoundaryWarning(UserWarning):
    """The likelihood is maximized at an infinite parameter boundary."""


def _linear_predictor(beta_row: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.isfinite(x).all():
        raise ValueError("covariates must be finite")
    if x.shape[-1] != N_COEF - 1:
        raise ValueError(f"covariate vector must have length {N_COEF - 1}")
    return beta_row[0] + x @ beta_row[1:]


def intensity(beta, event_type: int, x) -> np.ndarray | float:
    """Monthly event rate ``exp(b0 + b . x)`` for one event type.

    ``x`` is a length-4 covariate vector ``(D, V, r, S)`` or an array of them.
    """
    beta = np.asarray(beta, dtype=float)
    eta = _linear_predictor(beta[event_type], x)
    out = np.exp(eta)
    return float(out) if np.isscalar(eta) or out.ndim == 0 else out


def cumulative_intensity(beta, event_type: int, covariate_path) -> float:
    """Integrated intensity over a path of monthly covariate rows.

    The path holds one ``(D, V, r, S)`` row per month in the interval; with
    the piecewise-constant rule the integral is just the sum of the monthly
    rates. An empty path integrates to zero.
    """
    path = np.asarray(covariate_path, dtype=float)
    if path.size == 0:
        return 0.0
    return float(np.sum(intensity(beta, event_type, path)))


@dataclass(frozen=True)
class _Design:
    """Flattened at-risk firm-months for fast likelihood evaluation."""

    rows: np.ndarray            # (N, 5): intercept + covariates per at-risk month
    event_x: np.ndarray         # (2, 5): sum of event-month rows per type
    n_events: np.ndarray        # (2,) event counts
    exposure: int               # total at-risk firm-months

    @property
    def grad_const(self) -> np.ndarray:
        return self.event_x


def build_design(
    panel: FirmPanel,
    events: list[EventRecord],
    carry_limit: int = 12,
) -> _Design:
    """Assemble the at-risk firm-month design under carry-forward.

    A firm is at risk from its first observed month through its event (or
    censoring) month. Months whose carried-forward covariates are staler than
    ``carry_limit`` are flagged and dropped from the exposure; an event month
    that cannot be evaluated raises :class:`DataCoverageError`.
    """
    n = panel.n_firms
    filled, age = carry_forward(panel.values[:, : 2 * n], limit=carry_limit)
    macro = panel.values[:, 2 * n:]
    windows = panel.windows

    blocks = []
    event_x = np.zeros((2, N_COEF))
    n_events = np.zeros(2, dtype=int)
    stale_firms = []
    for rec in events:
        i = panel.firm_index(rec.firm_id)
        first = windows[i, 0]
        if first < 0:
            raise DataCoverageError(f"firm {rec.firm_id!r} has no covariates at all")
        t_event = rec.month - 1  # 0-based row of the event month
        if t_event < first:
            raise DataCoverageError(
                f"firm {rec.firm_id!r} has an event at month {rec.month} before any observation"
            )
        rows_t = np.arange(first, t_event + 1)
        d = filled[rows_t, i]
        v = filled[rows_t, n + i]
        ok = ~np.isnan(d) & ~np.isnan(v)
        if not ok.all():
            stale_firms.append(rec.firm_id)
        if not ok[-1]:
            if rec.kind == CENSORED:
                rows_t, d, v, ok = rows_t[:-1], d[:-1], v[:-1], ok[:-1]
                if rows_t.size == 0:
                    raise DataCoverageError(
                        f"firm {rec.firm_id!r} has no evaluable at-risk months"
                    )
            else:
                raise DataCoverageError(
                    f"firm {rec.firm_id!r}: covariates unavailable at its event month {rec.month}"
                )
        rows_t, d, v = rows_t[ok], d[ok], v[ok]
        block = np.column_stack(
            [np.ones(rows_t.size), d, v, macro[rows_t, 0], macro[rows_t, 1]]
        )
        blocks.append(block)
        if rec.kind == DEFAULT:
            event_x[0] += block[-1]
            n_events[0] += 1
        elif rec.kind == OTHER_EXIT:
            event_x[1] += block[-1]
            n_events[1] += 1

    if stale_firms:
        shown = ", ".join(map(repr, stale_firms[:5]))
        warnings.warn(
            f"{len(stale_firms)} firm(s) have at-risk months with covariates "
            f"missing or staler than {carry_limit} months (excluded from "
            f"exposure): {shown}",
            UserWarning,
            stacklevel=2,
        )
    if not blocks:
        raise DataCoverageError("no events supplied")
    rows = np.concatenate(blocks, axis=0)
    return _Design(rows=rows, event_x=event_x, n_events=n_events, exposure=rows.shape[0])


def _type_loglik(beta_row, design: _Design, event_type: int):
    eta = np.clip(design.rows @ beta_row, None, _EXP_CLIP)
    rates = np.exp(eta)
    ll = design.event_x[event_type] @ beta_row - rates.sum()
    grad = design.event_x[event_type] - design.rows.T @ rates
    return ll, grad, rates


def log_likelihood(beta, events, panel, carry_limit: int = 12) -> float:
    """Joint log likelihood of the event records given the covariate panel."""
    beta = np.asarray(beta, dtype=float)
    design = build_design(panel, events, carry_limit=carry_limit)
    return sum(_type_loglik(beta[k], design, k)[0] for k in range(2))


def log_likelihood_grad(beta, events, panel, carry_limit: int = 12) -> np.ndarray:
    """Gradient of :func:`log_likelihood` over the flattened (2, 5) coefficients."""
    beta = np.asarray(beta, dtype=float)
    design = build_design(panel, events, carry_limit=carry_limit)
    return np.concatenate(
        [_type_loglik(beta[k], design, k)[1] for k in range(2)]
    )


def wald_interval(estimate: float, std_error: float, level: float = 0.95):
    """Normal-theory interval ``estimate +/- z * SE``."""
    level = check_level(level)
    if std_error < 0:
        raise ValueError("std_error must be nonnegative")
    z = stats.norm.ppf(0.5 + level / 2.0)
    return estimate - z * std_error, estimate + z * std_error


def _fit_one_type(design: _Design, event_type: int, tol: float, max_iter: int):
    """Maximize one event type's concave log likelihood; returns (beta, iters)."""
    beta0 = np.zeros(N_COEF)
    beta0[0] = np.log(max(design.n_events[event_type], 0.5) / design.exposure)

    def negative(b):
        ll, grad, _ = _type_loglik(b, design, event_type)
        return -ll, -grad

    res = optimize.minimize(
        negative,
        beta0,
        jac=True,
        method="BFGS",
        options={"gtol": tol, "maxiter": max_iter},
    )
    beta = res.x
    n_iter = int(res.nit)
    # Newton polish: BFGS can stop shy of a tight gradient tolerance. The
    # objective is concave, so once the gradient is small the full Newton
    # step is safe; a line search there would stall on likelihood changes
    # below the floating-point noise floor.
    for _ in range(30):
        ll, grad, rates = _type_loglik(beta, design, event_type)
        if np.max(np.abs(grad)) <= tol:
            return beta, n_iter
        hess = design.rows.T @ (rates[:, None] * design.rows)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        if np.max(np.abs(grad)) > 1e-2:
            while scale > 1e-8:
                ll_new = _type_loglik(beta + scale * step, design, event_type)[0]
                if ll_new >= ll:
                    break
                scale /= 2.0
        beta = beta + scale * step
        n_iter += 1
    ll, grad, _ = _type_loglik(beta, design, event_type)
    if np.max(np.abs(grad)) > tol:
        raise ConvergenceError(
            f"gradient sup-norm {np.max(np.abs(grad)):.3e} above tolerance {tol:.1e} "
            f"after {n_iter} iterations",
            beta=beta,
            log_likelihood=ll,
            n_iter=n_iter,
        )
    return beta, n_iter


def _observed_information(design: _Design, beta_row) -> np.ndarray:
    eta = np.clip(design.rows @ beta_row, None, _EXP_CLIP)
    w = np.exp(eta)
    return design.rows.T @ (w[:, None] * design.rows)


_COEF_NAMES = tuple(
    f"beta_{k}{j}" for k in (1, 2) for j in range(N_COEF)
)


class CompetingRisksHazard(BaseEstimator):
    """Maximum-likelihood competing-risks intensity model.

    Parameters
    ----------
    tol : float
        Gradient sup-norm tolerance at the optimum.
    max_iter : int
        Iteration budget per event type.
    carry_forward_limit : int
        Months a covariate value may be carried forward before the firm-month
        is flagged and excluded from exposure.

    Attributes
    ----------
    beta_ : (2, 5) ndarray
        Fitted coefficients; row 0 is default, row 1 other exit; column 0 is
        the intercept, then (D, V, r, S).
    covariance_ : (10, 10) ndarray
        Inverse observed information over the row-major flattened beta.
    log_likelihood_ : float
    converged_ : bool
    n_iter_ : int
    boundary_ : (2,) bool ndarray
        True where an event type had zero events so its intercept diverges.
    """

    def __init__(self, tol: float = 1e-8, max_iter: int = 200, carry_forward_limit: int = 12):
        self.tol = tol
        self.max_iter = max_iter
        self.carry_forward_limit = carry_forward_limit

    def fit(self, panel: FirmPanel, events: list[EventRecord]):
        design = build_design(panel, events, carry_limit=self.carry_forward_limit)
        beta = np.zeros((2, N_COEF))
        cov = np.zeros((2 * N_COEF, 2 * N_COEF))
        boundary = np.zeros(2, dtype=bool)
        total_iter = 0
        for k in range(2):
            if design.n_events[k] == 0:
                kind = DEFAULT if k == 0 else OTHER_EXIT
                warnings.warn(
                    f"no {kind!r} events: the type-{k + 1} intercept diverges to "
                    "-inf; returning a continuity-corrected boundary estimate",
                    BoundaryWarning,
                    stacklevel=2,
                )
                boundary[k] = True
                beta[k, 0] = np.log(0.5 / design.exposure)
                continue
            beta[k], it = _fit_one_type(design, k, self.tol, self.max_iter)
            total_iter += it
            info = _observed_information(design, beta[k])
            eigval, eigvec = np.linalg.eigh(info)
            if eigval[0] <= 1e-10 * max(eigval[-1], 1.0):
                worst = eigvec[:, 0]
                name = _COEF_NAMES[k * N_COEF + int(np.argmax(np.abs(worst)))]
                raise SingularInformationError(
                    f"observed information for event type {k + 1} is singular "
                    f"along {name} (eigenvalue {eigval[0]:.3e})"
                )
            block = slice(k * N_COEF, (k + 1) * N_COEF)
            cov[block, block] = np.linalg.inv(info)
        cov = 0.5 * (cov + cov.T)
        self.beta_ = beta
        self.covariance_ = cov
        self.boundary_ = boundary
        self.log_likelihood_ = float(
            sum(_type_loglik(beta[k], design, k)[0] for k in range(2))
        )
        self.converged_ = True
        self.n_iter_ = total_iter
        self.n_events_ = design.n_events.copy()
        self.exposure_ = design.exposure
        return self

    def intensity(self, x, event_type: int = 0):
        return intensity(self.beta_, event_type, x)

    def wald_interval(self, index: int, level: float = 0.95):
        """Interval for one coefficient of the row-major flattened beta."""
        est = self.beta_.ravel()[index]
        se = float(np.sqrt(self.covariance_[index, index]))
        return wald_interval(est, se, level)

    def to_json(self) -> str:
        return json.dumps(
            {
                "beta": self.beta_.tolist(),
                "cov": self.covariance_.tolist(),
                "loglik": self.log_likelihood_,
                "converged": bool(self.converged_),
                "iterations": int(self.n_iter_),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "CompetingRisksHazard":
        data = json.loads(text)
        est = cls()
        est.beta_ = np.asarray(data["beta"], dtype=float)
        est.covariance_ = np.asarray(data["cov"], dtype=float)
        est.log_likelihood_ = float(data["loglik"])
        est.converged_ = bool(data["converged"])
        est.n_iter_ = int(data["iterations"])
        est.boundary_ = np.zeros(2, dtype=bool)
        return est
