"""Independent reference implementations used only to check the main code.

Everything here favors directness over speed: exhaustive enumeration, dense
joint-covariance assembly, O(n^2) pairwise counts, and plain per-firm loops.
None of it shares code with the package paths it validates.
"""
from __future__ import annotations

import numpy as np
from scipy.stats import multivariate_normal


def pb_pmf_enumeration(p) -> np.ndarray:
    """Poisson-binomial PMF by summing over all 2^n outcomes."""
    p = np.asarray(p, dtype=float)
    n = p.size
    pmf = np.zeros(n + 1)
    total = 1 << n
    chunk = min(total, 1 << 16)
    bit_cols = np.arange(n, dtype=np.int64)
    for start in range(0, total, chunk):
        masks = np.arange(start, min(start + chunk, total), dtype=np.int64)
        bits = (masks[:, None] >> bit_cols) & 1
        probs = np.prod(np.where(bits == 1, p, 1.0 - p), axis=1)
        pmf += np.bincount(bits.sum(axis=1), weights=probs, minlength=n + 1)
    return pmf


def pb_cdf_enumeration(p) -> np.ndarray:
    return np.cumsum(pb_pmf_enumeration(p))


def stacked_gaussian_loglik(eps, lam, a, p, q_cov, init_cov) -> float:
    """Marginal log density of the observed cells via one big normal.

    Assembles the full covariance of the stacked innovation vector from the
    factor model and evaluates the multivariate normal density directly.
    """
    eps = np.asarray(eps, dtype=float)
    t_len, m = eps.shape
    q = lam.shape[1]
    var_f = [np.asarray(init_cov, dtype=float)]
    for _ in range(1, t_len):
        var_f.append(a @ var_f[-1] @ a.T + q_cov)
    cov_f = np.zeros((t_len * q, t_len * q))
    for s in range(t_len):
        for t in range(s, t_len):
            block = np.linalg.matrix_power(a, t - s) @ var_f[s]
            cov_f[t * q:(t + 1) * q, s * q:(s + 1) * q] = block
            cov_f[s * q:(s + 1) * q, t * q:(t + 1) * q] = block.T
    big_lam = np.kron(np.eye(t_len), lam)
    cov = big_lam @ cov_f @ big_lam.T + np.kron(np.eye(t_len), np.diag(p))
    flat = eps.ravel()
    obs = ~np.isnan(flat)
    return float(
        multivariate_normal(
            mean=np.zeros(int(obs.sum())), cov=cov[np.ix_(obs, obs)], allow_singular=True
        ).logpdf(flat[obs])
    )


def concordance_auc(scores, outcomes) -> float:
    """Mann-Whitney AUC by explicit pairwise comparison with half-credit ties."""
    scores = np.asarray(scores, dtype=float)
    outcomes = np.asarray(outcomes, dtype=int)
    pos = scores[outcomes == 1]
    neg = scores[outcomes == 0]
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (pos.size * neg.size)


def hazard_loglik_by_hand(beta, events, panel, carry_limit=12) -> float:
    """Term-by-term likelihood with plain per-firm, per-month loops."""
    beta = np.asarray(beta, dtype=float)
    n = panel.n_firms
    total = 0.0
    for rec in events:
        i = panel.firm_ids.index(rec.firm_id)
        cols = (i, n + i)
        last_seen = {c: None for c in cols}
        last_t = {c: None for c in cols}
        first = None
        for t in range(panel.n_periods):
            if not np.isnan(panel.values[t, cols[0]]) or not np.isnan(panel.values[t, cols[1]]):
                if first is None:
                    first = t
            for c in cols:
                if not np.isnan(panel.values[t, c]):
                    last_seen[c], last_t[c] = panel.values[t, c], t
            if first is None or t < first or t > rec.month - 1:
                continue
            usable = all(
                last_seen[c] is not None and t - last_t[c] <= carry_limit for c in cols
            )
            if not usable:
                continue
            x = np.array(
                [
                    last_seen[cols[0]],
                    last_seen[cols[1]],
                    panel.values[t, 2 * n],
                    panel.values[t, 2 * n + 1],
                ]
            )
            lam = [np.exp(beta[k, 0] + beta[k, 1:] @ x) for k in range(2)]
            total -= lam[0] + lam[1]
            if t == rec.month - 1:
                if rec.kind == "default":
                    total += np.log(lam[0])
                elif rec.kind == "exit":
                    total += np.log(lam[1])
    return total


def closed_form_competing_risk(lam1: float, lam2: float, s: float) -> float:
    """Continuous-time constant-hazard probability of a type-1 event by s."""
    total = lam1 + lam2
    if total == 0.0:
        return 0.0
    return (lam1 / total) * (1.0 - np.exp(-s * total))
