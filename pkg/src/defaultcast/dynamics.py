"""Mean-reverting covariate dynamics with low-rank common factors.

The differenced panel follows a first-order vector autoregression whose
coefficient matrix is tied to five scalars: one mean-reversion rate per
variable block (distance-to-default, stock return, bill rate, index return)
plus a single coupling from the lagged bill rate into every distance series.
Its innovations decompose into ``q`` common autoregressive factors with
dense loadings plus diagonal idiosyncratic noise:

    X_t - mu     = Theta (X_{t-1} - mu) + eps_t
    eps_t        = Lambda F_t + e_t,      e_t ~ N(0, diag(P))
    F_t          = A F_{t-1} + eta_t,     eta_t ~ N(0, Q)

Estimation alternates pooled least squares for ``(mu, kappa)`` with EM for
the factor part (Kalman smoother E-step over the observed cells only,
closed-form M-step). Matrix inversions never exceed ``q x q``, so panels with
thousands of columns stay cheap.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from sklearn.base import BaseEstimator

from .panel import DifferencedPanel
from .validation import as_generator

__all__ = [
    "DynamicsParams",
    "FactorPath",
    "EMConvergenceError",
    "assemble_theta",
    "theta_apply",
    "var_residuals",
    "stationary_factor_cov",
    "kalman_filter_smoother",
    "CovariateDynamics",
    "simulate_future_paths",
    "simulate_future",
    "simulate_historical",
]

VAR_FLOOR = 1e-10
RIDGE_SCALE = 1e-8


class EMConvergenceError(RuntimeError):
    """EM ran out of iterations in strict mode; carries the trace and best fit."""

    def __init__(self, message, trace=None, fit=None):
        super().__init__(message)
        self.trace = trace
        self.fit = fit


def _split_m(m: int) -> int:
    if m < 4 or m % 2:
        raise ValueError(f"stacked dimension must be 2n+2 with n >= 1, got {m}")
    return (m - 2) // 2


def assemble_theta(kappa, n: int) -> np.ndarray:
    """Dense ``(2n+2, 2n+2)`` autoregression matrix from the five scalars.

    Nonzeros: ``kappa_D`` on the first ``n`` diagonal entries, ``kappa_V`` on
    the next ``n``, the two macro rates on the last two, and a single column
    of ``b`` coupling the lagged bill rate into every distance series --
    ``3n + 2`` entries for generic kappa.
    """
    k_d, k_v, k_r, k_s, b = np.asarray(kappa, dtype=float)
    if n < 1:
        raise ValueError("n must be >= 1")
    m = 2 * n + 2
    theta = np.zeros((m, m))
    idx = np.arange(n)
    theta[idx, idx] = k_d
    theta[n + idx, n + idx] = k_v
    theta[2 * n, 2 * n] = k_r
    theta[2 * n + 1, 2 * n + 1] = k_s
    theta[:n, 2 * n] = b
    return theta


def theta_apply(kappa, x: np.ndarray) -> np.ndarray:
    """Apply the structured autoregression matrix without materializing it.

    ``x`` has the stacked layout on its last axis. Exactly-zero coefficients
    contribute an exact zero (no dependence), so missingness propagates only
    through cells the matrix structurally uses.
    """
    k_d, k_v, k_r, k_s, b = np.asarray(kappa, dtype=float)
    x = np.asarray(x, dtype=float)
    n = _split_m(x.shape[-1])
    out = np.empty_like(x)
    d, v = x[..., :n], x[..., n : 2 * n]
    r, s = x[..., 2 * n], x[..., 2 * n + 1]
    out[..., :n] = k_d * d if k_d != 0.0 else 0.0
    if b != 0.0:
        out[..., :n] += b * r[..., None]
    out[..., n : 2 * n] = k_v * v if k_v != 0.0 else 0.0
    out[..., 2 * n] = k_r * r if k_r != 0.0 else 0.0
    out[..., 2 * n + 1] = k_s * s if k_s != 0.0 else 0.0
    return out


def _stacked(x) -> np.ndarray:
    if isinstance(x, DifferencedPanel):
        return x.values
    return np.asarray(x, dtype=float)


def var_residuals(x, mu, kappa) -> np.ndarray:
    """Innovations ``eps_t = (X_t - mu) - Theta (X_{t-1} - mu)`` for t = 2..T.

    Returns a ``(T - 1, m)`` array; a cell is NaN iff the current cell or any
    lagged cell it structurally depends on is missing.
    """
    x = _stacked(x)
    if x.shape[0] < 2:
        raise ValueError("need at least two rows of differences")
    mu = np.asarray(mu, dtype=float)
    centered = x - mu
    return centered[1:] - theta_apply(kappa, centered[:-1])


@dataclass(frozen=True)
class DynamicsParams:
    """Complete parameter set of the covariate process."""

    mu: np.ndarray           # (m,)
    kappa: np.ndarray        # (kappa_D, kappa_V, kappa_r, kappa_S, b)
    loadings: np.ndarray     # (m, q)
    transition: np.ndarray   # (q, q)
    idio_var: np.ndarray     # (m,) diagonal idiosyncratic variances
    factor_cov: np.ndarray   # (q, q)

    def __post_init__(self):
        for name in ("mu", "kappa", "loadings", "transition", "idio_var", "factor_cov"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        m = self.mu.shape[0]
        q = self.loadings.shape[1]
        if self.loadings.shape != (m, q) or self.transition.shape != (q, q):
            raise ValueError("inconsistent loading/transition shapes")
        if self.idio_var.shape != (m,) or self.factor_cov.shape != (q, q):
            raise ValueError("inconsistent noise shapes")
        if self.kappa.shape != (5,):
            raise ValueError("kappa must have 5 entries")
        if (self.idio_var < 0).any():
            raise ValueError("idiosyncratic variances must be nonnegative")

    @property
    def m(self) -> int:
        return self.mu.shape[0]

    @property
    def q(self) -> int:
        return self.loadings.shape[1]

    @property
    def n_firms(self) -> int:
        return _split_m(self.m)

    def select_columns(self, columns) -> "DynamicsParams":
        """Restrict to a stacked sub-layout (marginalization is exact)."""
        columns = np.asarray(columns, dtype=int)
        return DynamicsParams(
            mu=self.mu[columns],
            kappa=self.kappa,
            loadings=self.loadings[columns],
            transition=self.transition,
            idio_var=self.idio_var[columns],
            factor_cov=self.factor_cov,
        )


@dataclass(frozen=True)
class FactorPath:
    """Smoothed factor moments from one filter/smoother pass."""

    means: np.ndarray        # (T, q)
    covariances: np.ndarray  # (T, q, q)
    lag_one: np.ndarray      # (T - 1, q, q); lag_one[t] = Cov(F_{t+1}, F_t | data)

    @property
    def terminal_state(self) -> tuple[np.ndarray, np.ndarray]:
        return self.means[-1], self.covariances[-1]


def stationary_factor_cov(transition, factor_cov) -> np.ndarray:
    """Stationary covariance of the factor autoregression.

    Falls back to an inflated covariance with a warning when the transition
    matrix is not stable.
    """
    a = np.asarray(transition, dtype=float)
    q = np.asarray(factor_cov, dtype=float)
    rho = np.max(np.abs(np.linalg.eigvals(a))) if a.size else 0.0
    if rho < 0.999:
        v = sla.solve_discrete_lyapunov(a, q)
        return 0.5 * (v + v.T)
    warnings.warn(
        f"factor transition spectral radius {rho:.3f} >= 1; "
        "using an inflated initial covariance",
        UserWarning,
        stacklevel=2,
    )
    scale = max(np.trace(q) / max(q.shape[0], 1), 1e-8)
    return q + 50.0 * scale * np.eye(q.shape[0])


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


_SINGULAR_MSG = (
    "innovation covariance is numerically singular; "
    "consider a larger ridge or fewer factors"
)


def _inv_logdet(a: np.ndarray):
    """Inverse and log determinant of a small symmetric PD matrix.

    Analytic for 1x1 and 2x2 (the hot path), Cholesky otherwise; a ridge
    proportional to the mean diagonal repairs near-singular inputs once.
    """
    q = a.shape[0]
    if q == 1:
        v = a[0, 0]
        if v <= 0.0:
            v += RIDGE_SCALE * max(abs(v), 1.0)
            if v <= 0.0:
                raise np.linalg.LinAlgError(_SINGULAR_MSG)
        return np.array([[1.0 / v]]), np.log(v)
    if q == 2:
        a00, a01, a11 = a[0, 0], 0.5 * (a[0, 1] + a[1, 0]), a[1, 1]
        det = a00 * a11 - a01 * a01
        if det <= 0.0 or a00 <= 0.0:
            ridge = RIDGE_SCALE * max(0.5 * (abs(a00) + abs(a11)), 1.0)
            a00 += ridge
            a11 += ridge
            det = a00 * a11 - a01 * a01
            if det <= 0.0 or a00 <= 0.0:
                raise np.linalg.LinAlgError(_SINGULAR_MSG)
        inv = np.array([[a11, -a01], [-a01, a00]]) / det
        return inv, np.log(det)
    a = _sym(a)
    try:
        c = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        ridge = RIDGE_SCALE * max(np.mean(np.diag(a)), 1.0)
        try:
            c = np.linalg.cholesky(a + ridge * np.eye(q))
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(_SINGULAR_MSG) from None
    inv_c = sla.solve_triangular(c, np.eye(q), lower=True, check_finite=False)
    return inv_c.T @ inv_c, 2.0 * float(np.log(np.diag(c)).sum())


def _safe_inv(a: np.ndarray) -> np.ndarray:
    return _inv_logdet(_sym(a))[0]


def kalman_filter_smoother(
    eps,
    loadings,
    transition,
    idio_var,
    factor_cov,
    init_cov=None,
):
    """Exact filter/smoother for the factor model over a ragged panel.

    At each month only the observed rows of ``eps`` enter the update, via the
    information form, so every inversion is ``q x q`` and the returned value
    is the exact marginal log likelihood of the observed cells. The initial
    factor is ``N(0, init_cov)`` (stationary covariance by default).

    Returns ``(FactorPath, log_likelihood)``.
    """
    eps = _stacked(eps)
    lam = np.asarray(loadings, dtype=float)
    a = np.asarray(transition, dtype=float)
    p = np.maximum(np.asarray(idio_var, dtype=float), VAR_FLOOR)
    q_cov = _sym(np.asarray(factor_cov, dtype=float))
    t_len, m = eps.shape
    q = lam.shape[1]
    if init_cov is None:
        init_cov = stationary_factor_cov(a, q_cov)
    init_cov = _sym(np.asarray(init_cov, dtype=float))

    observed = ~np.isnan(eps)
    mask = observed.astype(float)
    y0 = np.where(observed, eps, 0.0)
    # Per-month observation reductions, vectorized up front so the sequential
    # loop touches only q x q quantities:
    #   c_all[t] = Lam_o' R^-1 Lam_o,  g_all[t] = Lam_o' R^-1 y_o,
    #   yy[t]    = y_o' R^-1 y_o,      logp[t]  = sum log R_o.
    lam_w = lam / p[:, None]
    c_all = np.einsum("tj,ja,jb->tab", mask / p[None, :], lam, lam, optimize=True)
    g_all = y0 @ lam_w
    yy = ((y0 * y0) / p[None, :]).sum(axis=1)
    logp = mask @ np.log(p)
    k_all = mask.sum(axis=1)

    x_pred = np.zeros((t_len, q))
    v_pred = np.zeros((t_len, q, q))
    vp_invs = np.zeros((t_len, q, q))
    x_filt = np.zeros((t_len, q))
    v_filt = np.zeros((t_len, q, q))
    loglik = 0.0
    log_2pi = np.log(2.0 * np.pi)

    for t in range(t_len):
        if t == 0:
            xp, vp = np.zeros(q), init_cov
        else:
            xp = a @ x_filt[t - 1]
            vp = _sym(a @ v_filt[t - 1] @ a.T + q_cov)
        vp_inv, logdet_vp = _inv_logdet(vp)
        x_pred[t], v_pred[t], vp_invs[t] = xp, vp, vp_inv
        if k_all[t] == 0.0:
            x_filt[t], v_filt[t] = xp, vp
            continue
        c_t, g_t = c_all[t], g_all[t]
        # Information-form update; determinant lemma + Woodbury for the
        # likelihood keep every inversion q x q.
        vf, logdet_prec = _inv_logdet(vp_inv + c_t)
        vf = _sym(vf)
        d_t = g_t - c_t @ xp
        x_filt[t] = xp + vf @ d_t
        v_filt[t] = vf
        quad = yy[t] - 2.0 * (g_t @ xp) + xp @ (c_t @ xp) - d_t @ (vf @ d_t)
        loglik -= 0.5 * (k_all[t] * log_2pi + logp[t] + logdet_vp + logdet_prec + quad)

    means = np.zeros((t_len, q))
    covs = np.zeros((t_len, q, q))
    lag_one = np.zeros((max(t_len - 1, 0), q, q))
    means[-1], covs[-1] = x_filt[-1], v_filt[-1]
    for t in range(t_len - 2, -1, -1):
        gain = v_filt[t] @ a.T @ vp_invs[t + 1]
        means[t] = x_filt[t] + gain @ (means[t + 1] - x_pred[t + 1])
        covs[t] = _sym(v_filt[t] + gain @ (covs[t + 1] - v_pred[t + 1]) @ gain.T)
        lag_one[t] = covs[t + 1] @ gain.T
    path = FactorPath(means=means, covariances=covs, lag_one=lag_one)
    return path, float(loglik)


def _pooled_block_ls(y, x_list, mask, weights):
    """Pooled weighted regression with per-series intercepts absorbed.

    ``y`` and each regressor in ``x_list`` are (T, k) panels sharing ``mask``;
    the slope vector is common across series while intercepts are free.
    Returns ``(slopes, intercepts)`` with NaN intercepts for empty series.
    """
    w = mask * weights[None, :]
    counts = w.sum(axis=0)
    good = counts > 0
    safe = np.where(good, counts, 1.0)

    def col_mean(z):
        return np.where(good, (w * np.where(mask, z, 0.0)).sum(axis=0) / safe, 0.0)

    y_mean = col_mean(y)
    x_means = [col_mean(x) for x in x_list]
    yd = np.where(mask, y - y_mean, 0.0)
    xds = [np.where(mask, x - xm, 0.0) for x, xm in zip(x_list, x_means)]
    k = len(x_list)
    gram = np.empty((k, k))
    rhs = np.empty(k)
    for i in range(k):
        rhs[i] = (w * xds[i] * yd).sum()
        for j in range(i, k):
            gram[i, j] = gram[j, i] = (w * xds[i] * xds[j]).sum()
    if np.linalg.matrix_rank(gram) < k or not np.isfinite(gram).all():
        slopes = np.zeros(k)
    else:
        slopes = np.linalg.solve(gram, rhs)
    intercepts = y_mean - sum(s * xm for s, xm in zip(slopes, x_means))
    intercepts = np.where(good, intercepts, np.nan)
    return slopes, intercepts


def _ar1_ols(y, x):
    xd, yd = x - x.mean(), y - y.mean()
    denom = (xd * xd).sum()
    slope = (xd * yd).sum() / denom if denom > 0 else 0.0
    return slope, y.mean() - slope * x.mean()


def _mean_reversion_ls(x: np.ndarray, n: int, weights=None, factor_offset=None):
    """Least-squares ``(mu, kappa)`` over observed consecutive pairs.

    The plain fit treats the innovations as white. Because the common factors
    are themselves autoregressive, the lagged regressor correlates with the
    innovation, biasing the plain fit; passing the smoothed factor component
    ``factor_offset`` (aligned with transitions into months ``2..T``) as a
    known offset removes that correlation, which is exactly the maximization
    step for ``(mu, kappa)`` with the factors treated as latent data.
    """
    t_len, m = x.shape
    if weights is None:
        weights = np.ones(m)
    obs = ~np.isnan(x)
    y_f = x[1:] if factor_offset is None else x[1:] - factor_offset
    x_f = x[:-1]
    pair = obs[1:] & obs[:-1]
    r_lag = np.repeat(x_f[:, 2 * n][:, None], n, axis=1)

    (k_d, b), c_d = _pooled_block_ls(
        np.nan_to_num(y_f[:, :n]),
        [np.nan_to_num(x_f[:, :n]), r_lag],
        pair[:, :n],
        weights[:n],
    )
    (k_v,), c_v = _pooled_block_ls(
        np.nan_to_num(y_f[:, n : 2 * n]),
        [np.nan_to_num(x_f[:, n : 2 * n])],
        pair[:, n : 2 * n],
        weights[n : 2 * n],
    )
    k_r, c_r = _ar1_ols(y_f[:, 2 * n], x_f[:, 2 * n])
    k_s, c_s = _ar1_ols(y_f[:, 2 * n + 1], x_f[:, 2 * n + 1])

    kappa = np.array([k_d, k_v, k_r, k_s, b])
    rho = np.max(np.abs(kappa[:4]))
    if rho >= 1.0:
        warnings.warn(
            f"mean-reversion spectral radius {rho:.3f} >= 1: the covariate "
            "autoregression is nonstationary",
            UserWarning,
            stacklevel=2,
        )

    def invert(c, k, fallback):
        return c / (1.0 - k) if abs(1.0 - k) > 1e-8 else fallback

    mu = np.empty(m)
    mu[2 * n] = invert(c_r, k_r, np.nanmean(x[:, 2 * n]))
    mu[2 * n + 1] = invert(c_s, k_s, np.nanmean(x[:, 2 * n + 1]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN series
        col_means = np.nanmean(np.where(obs, x, np.nan), axis=0)
    for j in range(n):
        mu[n + j] = invert(c_v[j], k_v, col_means[n + j]) if np.isfinite(c_v[j]) else col_means[n + j]
        if np.isfinite(c_d[j]):
            mu[j] = invert(c_d[j] + b * mu[2 * n], k_d, col_means[j])
        else:
            mu[j] = col_means[j]
    mu = np.nan_to_num(mu, nan=0.0)
    return mu, kappa


def _pca_init(eps: np.ndarray, q: int):
    filled = np.nan_to_num(eps, nan=0.0)
    t_len = filled.shape[0]
    u, s, vt = np.linalg.svd(filled, full_matrices=False)
    q_eff = min(q, s.size)
    lam = np.zeros((eps.shape[1], q))
    lam[:, :q_eff] = vt[:q_eff].T * (s[:q_eff] / np.sqrt(t_len))
    scores = np.zeros((t_len, q))
    scores[:, :q_eff] = u[:, :q_eff] * np.sqrt(t_len)
    resid = filled - scores @ lam.T
    p = resid.var(axis=0)
    scale = np.median(p[p > 0]) if (p > 0).any() else 1.0
    p = np.maximum(np.where(p > 0, p, scale), VAR_FLOOR)
    if t_len > 1:
        f_lag, f_cur = scores[:-1], scores[1:]
        gram = f_lag.T @ f_lag + 1e-8 * np.eye(q)
        a = np.linalg.solve(gram, f_lag.T @ f_cur).T
        innov = f_cur - f_lag @ a.T
        q_cov = _sym(innov.T @ innov / max(t_len - 1, 1)) + 1e-6 * np.eye(q)
    else:
        a = np.zeros((q, q))
        q_cov = np.eye(q)
    rho = np.max(np.abs(np.linalg.eigvals(a)))
    if rho >= 0.98:
        a = a * (0.95 / rho)
    return lam, a, p, q_cov


def _m_step(eps, observed, path: FactorPath, prior_p):
    t_len, m = eps.shape
    q = path.means.shape[1]
    means, covs = path.means, path.covariances
    s_t = covs + means[:, :, None] * means[:, None, :]           # (T, q, q)
    cross = path.lag_one + means[1:, :, None] * means[:-1, None, :]

    c_mat = s_t[:-1].sum(axis=0)
    b_mat = cross.sum(axis=0)
    ridge = 1e-12 + RIDGE_SCALE * max(np.trace(c_mat) / q, 0.0)
    a_new = np.linalg.solve(_sym(c_mat) + ridge * np.eye(q), b_mat.T).T
    rho = np.max(np.abs(np.linalg.eigvals(a_new)))
    if rho > 2.0:
        # Signal-free panels leave the transition unidentified; contain the
        # ratio-of-noise estimate so the filter cannot overflow. Plausible
        # mean-reverting fits (rho < 1, or slightly above in finite samples)
        # are never touched.
        a_new *= 0.95 / rho
    # Full quadratic form: PSD for any transition, including a contained one.
    q_new = _sym(
        (
            s_t[1:].sum(axis=0)
            - a_new @ b_mat.T
            - b_mat @ a_new.T
            + a_new @ c_mat @ a_new.T
        )
        / max(t_len - 1, 1)
    )
    q_new += VAR_FLOOR * np.eye(q)

    eps0 = np.where(observed, eps, 0.0)
    counts = observed.sum(axis=0)
    # A loading row is identifiable only with more observations than factors;
    # rows at or below that get a zero loading and a plain variance, which
    # also prevents degenerate exact interpolation driving the variance to
    # the floor (and the likelihood terms to cancellation noise).
    ident = counts > q
    s_row = np.einsum("tj,tab->jab", observed.astype(float), s_t)
    b_row = np.einsum("tj,tq->jq", eps0, means)
    lam_new = np.zeros((m, q))
    if ident.any():
        lam_new[ident] = np.linalg.solve(
            s_row[ident] + 1e-12 * np.eye(q)[None], b_row[ident][..., None]
        )[..., 0]
    sumsq = (eps0 * eps0).sum(axis=0)
    p_new = np.where(
        ident,
        (sumsq - np.einsum("jq,jq->j", lam_new, b_row)) / np.maximum(counts, 1),
        np.where(counts > 0, sumsq / np.maximum(counts, 1), prior_p),
    )
    p_new = np.maximum(p_new, VAR_FLOOR)
    init_cov = _sym(s_t[0])
    return lam_new, a_new, p_new, q_new, init_cov


def _normalize_rotation(lam, a, q_cov, path: FactorPath, init_cov):
    """Rotate so the loading columns are orthogonal with decreasing norms."""
    gram = _sym(lam.T @ lam)
    eigval, eigvec = np.linalg.eigh(gram)
    order = np.argsort(eigval)[::-1]
    rot = eigvec[:, order]
    lam_r = lam @ rot
    signs = np.sign(lam_r[np.argmax(np.abs(lam_r), axis=0), np.arange(lam.shape[1])])
    signs[signs == 0] = 1.0
    rot = rot * signs
    lam_r = lam @ rot
    a_r = rot.T @ a @ rot
    q_r = _sym(rot.T @ q_cov @ rot)
    path_r = FactorPath(
        means=path.means @ rot,
        covariances=np.einsum("ij,tjk,kl->til", rot.T, path.covariances, rot),
        lag_one=np.einsum("ij,tjk,kl->til", rot.T, path.lag_one, rot),
    )
    return lam_r, a_r, q_r, path_r, _sym(rot.T @ init_cov @ rot)


class CovariateDynamics(BaseEstimator):
    """EM-fitted covariate process: structured VAR plus dynamic factors.

    Parameters
    ----------
    q : int
        Number of common factors.
    tol : float
        Relative log-likelihood change that stops EM.
    max_iter : int
        EM iteration budget (per phase when ``refine`` is on).
    refine : bool
        After the first EM pass, re-estimate ``(mu, kappa)`` with
        per-series inverse-variance weights and run EM once more.
    strict : bool
        Raise :class:`EMConvergenceError` when the budget is exhausted
        instead of returning the best fit with ``converged_ = False``.
    init_params : DynamicsParams, optional
        Warm start (used heavily inside bootstrap replicates).

    Attributes
    ----------
    mu_, kappa_, loadings_, transition_, idio_var_, factor_cov_ :
        Fitted parameters (see :class:`DynamicsParams`).
    factor_path_ : FactorPath
        Smoothed factors for the innovation sample (months 2..T of the
        differenced panel).
    loglik_trace_ : list of float
        Marginal log likelihood at each EM iteration of the final phase;
        nondecreasing by construction.
    converged_ : bool
    """

    def __init__(
        self,
        q: int = 2,
        tol: float = 1e-6,
        max_iter: int = 100,
        refine: bool = True,
        refine_passes: int = 2,
        strict: bool = True,
        init_params: DynamicsParams | None = None,
    ):
        self.q = q
        self.tol = tol
        self.max_iter = max_iter
        self.refine = refine
        self.refine_passes = refine_passes
        self.strict = strict
        self.init_params = init_params

    def fit(self, X, y=None):
        x = _stacked(X)
        t_len, m = x.shape
        n = _split_m(m)
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.q > m:
            raise ValueError(f"q = {self.q} exceeds the panel dimension {m}")
        if self.q == m:
            warnings.warn(
                "q equals the panel dimension: the factor model is degenerate",
                UserWarning,
                stacklevel=2,
            )
        if t_len < 3:
            raise ValueError("need at least 3 differenced months to fit")

        # (mu, kappa) are always re-estimated from the data; a warm start only
        # seeds the factor part, so bootstrap replicates still propagate
        # mean-reversion estimation uncertainty.
        mu, kappa = _mean_reversion_ls(x, n)
        eps = var_residuals(x, mu, kappa)
        observed = ~np.isnan(eps)

        if self.init_params is not None:
            lam = self.init_params.loadings.copy()
            a = self.init_params.transition.copy()
            p = self.init_params.idio_var.copy()
            q_cov = self.init_params.factor_cov.copy()
            init_cov = stationary_factor_cov(a, q_cov)
        else:
            lam, a, p, q_cov = _pca_init(eps, self.q)
            init_cov = stationary_factor_cov(a, q_cov)

        lam, a, p, q_cov, init_cov, path, trace, converged = self._em_phase(
            eps, observed, lam, a, p, q_cov, init_cov
        )
        self.initial_loglik_trace_ = list(trace)

        for _ in range(self.refine_passes if self.refine else 0):
            # Known-offset re-estimate of (mu, kappa): subtracting the smoothed
            # common component leaves (approximately) white idiosyncratic
            # errors, so the weights are the idiosyncratic precisions.
            offset = path.means @ lam.T
            mu, kappa = _mean_reversion_ls(
                x, n, weights=1.0 / np.maximum(p, VAR_FLOOR), factor_offset=offset
            )
            eps = var_residuals(x, mu, kappa)
            observed = ~np.isnan(eps)
            lam, a, p, q_cov, init_cov, path, trace, converged = self._em_phase(
                eps, observed, lam, a, p, q_cov, init_cov
            )

        lam, a, q_cov, path, init_cov = _normalize_rotation(lam, a, q_cov, path, init_cov)

        if not converged and self.strict:
            last_change = (
                abs(trace[-1] - trace[-2]) / max(1.0, abs(trace[-2]))
                if len(trace) > 1
                else float("inf")
            )
            raise EMConvergenceError(
                f"EM did not converge within {self.max_iter} iterations "
                f"(last relative change {last_change:.2e})",
                trace=list(trace),
                fit=DynamicsParams(mu, kappa, lam, a, p, q_cov),
            )

        rho = np.max(np.abs(np.linalg.eigvals(a))) if a.size else 0.0
        if rho >= 1.0:
            warnings.warn(
                f"fitted factor transition has spectral radius {rho:.3f} >= 1",
                UserWarning,
                stacklevel=2,
            )

        self.mu_ = mu
        self.kappa_ = kappa
        self.loadings_ = lam
        self.transition_ = a
        self.idio_var_ = p
        self.factor_cov_ = q_cov
        self.init_cov_ = init_cov
        self.factor_path_ = path
        self.loglik_trace_ = list(trace)
        self.converged_ = bool(converged)
        self.n_iter_ = len(trace)
        self.n_firms_ = n
        return self

    def _em_phase(self, eps, observed, lam, a, p, q_cov, init_cov):
        trace: list[float] = []
        converged = False
        path = None
        for it in range(self.max_iter + 1):
            path, ll = kalman_filter_smoother(eps, lam, a, p, q_cov, init_cov=init_cov)
            trace.append(ll)
            if it > 0 and abs(trace[-1] - trace[-2]) <= self.tol * max(1.0, abs(trace[-2])):
                converged = True
                break
            if it == self.max_iter:
                break
            lam, a, p, q_cov, init_cov = _m_step(eps, observed, path, p)
        return lam, a, p, q_cov, init_cov, path, trace, converged

    @property
    def params_(self) -> DynamicsParams:
        return DynamicsParams(
            mu=self.mu_,
            kappa=self.kappa_,
            loadings=self.loadings_,
            transition=self.transition_,
            idio_var=self.idio_var_,
            factor_cov=self.factor_cov_,
        )

    def factor_state(self) -> tuple[np.ndarray, np.ndarray]:
        """Smoothed mean and covariance of the terminal factor."""
        return self.factor_path_.terminal_state

    def to_json(self) -> str:
        return json.dumps(
            {
                "mu": self.mu_.tolist(),
                "kappa": self.kappa_.tolist(),
                "Lambda": self.loadings_.tolist(),
                "A": self.transition_.tolist(),
                "P": self.idio_var_.tolist(),
                "Q": self.factor_cov_.tolist(),
                "q": int(self.q),
                "loglik_trace": [float(v) for v in self.loglik_trace_],
                "converged": bool(self.converged_),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "CovariateDynamics":
        data = json.loads(text)
        est = cls(q=int(data["q"]))
        est.mu_ = np.asarray(data["mu"], dtype=float)
        est.kappa_ = np.asarray(data["kappa"], dtype=float)
        est.loadings_ = np.asarray(data["Lambda"], dtype=float)
        est.transition_ = np.asarray(data["A"], dtype=float)
        est.idio_var_ = np.asarray(data["P"], dtype=float)
        est.factor_cov_ = np.asarray(data["Q"], dtype=float)
        est.loglik_trace_ = [float(v) for v in data["loglik_trace"]]
        est.converged_ = bool(data["converged"])
        est.init_cov_ = stationary_factor_cov(est.transition_, est.factor_cov_)
        est.n_firms_ = _split_m(est.mu_.shape[0])
        return est

    def attach_factor_path(self, diffs) -> "CovariateDynamics":
        """Recompute the smoothed factor path for a panel (after from_json)."""
        eps = var_residuals(diffs, self.mu_, self.kappa_)
        path, _ = kalman_filter_smoother(
            eps,
            self.loadings_,
            self.transition_,
            self.idio_var_,
            self.factor_cov_,
            init_cov=self.init_cov_,
        )
        self.factor_path_ = path
        return self


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    a = _sym(np.asarray(a, dtype=float))
    eigval, eigvec = np.linalg.eigh(a)
    return eigvec * np.sqrt(np.clip(eigval, 0.0, None))


def simulate_future_paths(
    params: DynamicsParams,
    start_diff,
    horizon: int,
    n_paths: int,
    rng,
    factor_mean=None,
    factor_cov=None,
):
    """Joint forecast draws of the differenced process.

    Starting from the last differenced observation ``start_diff``, draws the
    initial factor from ``N(factor_mean, factor_cov)`` (zeros by default) and
    iterates factor transition, innovation composition, and mean reversion
    for ``horizon`` months. Returns ``(diffs, factors)`` with shapes
    ``(n_paths, horizon, m)`` and ``(n_paths, horizon, q)``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = as_generator(rng)
    m, q = params.m, params.q
    start = np.asarray(start_diff, dtype=float)
    if start.shape != (m,) or np.isnan(start).any():
        raise ValueError("start_diff must be a fully observed length-m vector")
    f_mean = np.zeros(q) if factor_mean is None else np.asarray(factor_mean, dtype=float)
    f_cov = (
        stationary_factor_cov(params.transition, params.factor_cov)
        if factor_cov is None
        else np.asarray(factor_cov, dtype=float)
    )
    sqrt_f0 = _psd_sqrt(f_cov)
    sqrt_q = _psd_sqrt(params.factor_cov)
    sd_e = np.sqrt(params.idio_var)

    f = f_mean + rng.standard_normal((n_paths, q)) @ sqrt_f0.T
    x = np.broadcast_to(start, (n_paths, m)).copy()
    diffs = np.empty((n_paths, horizon, m))
    factors = np.empty((n_paths, horizon, q))
    for h in range(horizon):
        f = f @ params.transition.T + rng.standard_normal((n_paths, q)) @ sqrt_q.T
        eps = f @ params.loadings.T + rng.standard_normal((n_paths, m)) * sd_e
        x = params.mu + theta_apply(params.kappa, x - params.mu) + eps
        diffs[:, h] = x
        factors[:, h] = f
    return diffs, factors


def simulate_future(params, start_diff, horizon, rng, factor_mean=None, factor_cov=None):
    """Single-path convenience wrapper around :func:`simulate_future_paths`."""
    diffs, factors = simulate_future_paths(
        params, start_diff, horizon, 1, rng, factor_mean=factor_mean, factor_cov=factor_cov
    )
    return diffs[0], factors[0]


def simulate_historical(params: DynamicsParams, template: DifferencedPanel, rng):
    """Simulate a full-history differenced panel shaped like ``template``.

    Each series keeps its first observed differenced value from the template
    and its exact missingness pattern; the latent process still evolves
    through interior gaps so later observed cells stay on one coherent path.
    No cell is created outside the template's observed cells.
    """
    rng = as_generator(rng)
    values = template.values
    t_len, m = values.shape
    if params.m != m:
        raise ValueError("parameter dimension does not match the template")
    observed = ~np.isnan(values)
    first_obs = np.where(observed.any(axis=0), observed.argmax(axis=0), t_len)

    q = params.q
    f_cov0 = stationary_factor_cov(params.transition, params.factor_cov)
    f = rng.standard_normal(q) @ _psd_sqrt(f_cov0).T
    sqrt_q = _psd_sqrt(params.factor_cov)
    sd_e = np.sqrt(params.idio_var)

    latent = np.empty((t_len, m))
    eps0 = f @ params.loadings.T + rng.standard_normal(m) * sd_e
    latent[0] = np.where(first_obs == 0, values[0], params.mu + eps0)
    for t in range(1, t_len):
        f = params.transition @ f + rng.standard_normal(q) @ sqrt_q.T
        eps = f @ params.loadings.T + rng.standard_normal(m) * sd_e
        latent[t] = params.mu + theta_apply(params.kappa, latent[t - 1] - params.mu) + eps
        keep = first_obs == t
        if keep.any():
            latent[t, keep] = values[t, keep]
    out = np.where(observed, latent, np.nan)
    return DifferencedPanel(
        firm_ids=template.firm_ids,
        time_index=template.time_index,
        values=out,
        source=template.source,
    )
