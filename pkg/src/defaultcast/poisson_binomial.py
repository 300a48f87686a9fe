"""Exact distribution of a sum of independent non-identical Bernoullis.

The CDF comes from the discrete Fourier transform of the characteristic
function: with ``N = n' + 1`` grid points and ``w = 2*pi/N``,

    F(k) = (1/N) * sum_l [(1 - exp(-i w l (k+1))) / (1 - exp(-i w l))]
                 * prod_j [1 - p_j + p_j exp(i w l)]

where the ``l = 0`` term is its limit ``k + 1``. The product over firms is
accumulated in log-polar form (summed log moduli and phases) so thousands of
probabilities cannot underflow an intermediate product, and the sum over
``l`` for all counts at once is a single FFT.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import as_generator, check_alpha, check_probabilities

__all__ = [
    "CountDistribution",
    "pb_cdf",
    "naive_pi",
    "sample_count",
    "normal_approx_cdf",
]

_IMAG_TOL = 1e-9
_CHUNK_ELEMENTS = 4_000_000  # bound on the (n x chunk) complex work array


@dataclass(frozen=True)
class CountDistribution:
    """Exact count distribution over 0..n' for one vector of probabilities."""

    probabilities: np.ndarray  # (n',)
    cdf: np.ndarray            # (n' + 1,), clamped to [0, 1]
    imag_residual: float       # max |Im| discarded when taking the real part
    overshoot: float           # max distance of the raw CDF outside [0, 1]

    @property
    def pmf(self) -> np.ndarray:
        return np.diff(self.cdf, prepend=0.0)

    @property
    def n(self) -> int:
        return self.probabilities.size

    def quantile(self, prob: float) -> int:
        """Smallest count whose CDF reaches ``prob`` (left inversion)."""
        return int(np.searchsorted(self.cdf, prob, side="left"))


def pb_cdf(probabilities) -> CountDistribution:
    """Exact CDF of the count of successes across independent Bernoullis."""
    p = check_probabilities(probabilities)
    n = p.size
    if n == 0:
        return CountDistribution(
            probabilities=p, cdf=np.ones(1), imag_residual=0.0, overshoot=0.0
        )
    big_n = n + 1
    omega = 2.0 * np.pi / big_n

    log_mod = np.zeros(big_n)
    phase = np.zeros(big_n)
    chunk = max(1, _CHUNK_ELEMENTS // n)
    with np.errstate(divide="ignore"):  # log(0) -> -inf is the correct limit
        for start in range(0, big_n, chunk):
            l_grid = np.arange(start, min(start + chunk, big_n))
            c = 1.0 - p[:, None] + p[:, None] * np.exp(1j * omega * l_grid[None, :])
            log_mod[l_grid] = np.log(np.abs(c)).sum(axis=0)
            phase[l_grid] = np.angle(c).sum(axis=0)
    z = np.exp(log_mod) * np.exp(1j * phase)

    l_grid = np.arange(big_n)
    h = np.zeros(big_n, dtype=complex)
    denom = 1.0 - np.exp(-1j * omega * l_grid[1:])
    h[1:] = z[1:] / denom
    spectrum = np.fft.fft(h)
    # F(k) = (k+1)/N + (H[0] - H[(k+1) mod N]) / N, the l = 0 term made explicit.
    counts = np.arange(big_n)
    raw = (counts + 1) / big_n + (spectrum[0] - spectrum[(counts + 1) % big_n]) / big_n

    imag_residual = float(np.max(np.abs(raw.imag)))
    if imag_residual > _IMAG_TOL:
        raise ArithmeticError(
            f"imaginary residual {imag_residual:.3e} exceeds {_IMAG_TOL:.0e}; "
            "the transform lost too much precision"
        )
    real = raw.real
    overshoot = float(max(0.0, real.max() - 1.0, -real.min()))
    cdf = np.clip(real, 0.0, 1.0)
    return CountDistribution(
        probabilities=p, cdf=cdf, imag_residual=imag_residual, overshoot=overshoot
    )


def naive_pi(probabilities, alpha: float) -> tuple[int, int]:
    """Plug-in interval for the count: exact-CDF quantiles at alpha/2 levels.

    Both endpoints left-invert the CDF: the smallest counts with
    ``F(lower) >= alpha/2`` and ``F(upper) >= 1 - alpha/2``.
    """
    alpha = check_alpha(alpha)
    dist = pb_cdf(probabilities)
    return dist.quantile(alpha / 2.0), dist.quantile(1.0 - alpha / 2.0)


def sample_count(probabilities, rng) -> int:
    """One exact draw of the count via independent Bernoulli draws."""
    p = check_probabilities(probabilities)
    rng = as_generator(rng)
    return int((rng.random(p.size) < p).sum())


def normal_approx_cdf(probabilities, second_order: bool = True) -> np.ndarray:
    """Normal approximation to the count CDF (cross-check, not the main path).

    With ``second_order`` a skewness correction is added to the
    continuity-corrected normal CDF.
    """
    from scipy.stats import norm

    p = check_probabilities(probabilities)
    mean = p.sum()
    var = (p * (1.0 - p)).sum()
    sd = np.sqrt(var)
    counts = np.arange(p.size + 1)
    if sd == 0.0:
        return (counts >= mean).astype(float)
    x = (counts + 0.5 - mean) / sd
    out = norm.cdf(x)
    if second_order:
        skew = (p * (1.0 - p) * (1.0 - 2.0 * p)).sum() / sd**3
        out = out + skew * (1.0 - x * x) * norm.pdf(x) / 6.0
    return np.clip(out, 0.0, 1.0)
