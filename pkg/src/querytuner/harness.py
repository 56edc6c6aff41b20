"""Test-only oracles and baselines.

Nothing here is used by the production path: the tuning comparisons sample
uniformly, the Shapley enumerator walks all coalitions, the gradient checker
uses central differences, and the standard-normal CDF comes from a classic
rational erf approximation checked against tabulated values.  Keeping these
routes independent of the implementations they verify is the point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError

PHI_AT_ONE = 0.841344746  # tabulated standard-normal CDF at 1.0


@dataclass(frozen=True)
class OracleResult:
    name: str
    value: float
    tolerance: float
    passed: bool


def random_baseline(query_id: str, evaluate, budget: int,
                    rng: np.random.Generator, n_dims: int) -> list[tuple[np.ndarray, float, int]]:
    """Uniform-random tuning baseline: budget i.i.d. evaluations."""
    if budget < 1:
        raise UsageError("budget must be >= 1")
    out = []
    for _ in range(budget):
        theta = rng.uniform(0.0, 1.0, n_dims)
        latency, status = evaluate(theta)
        out.append((theta, float(latency), int(status)))
    return out


def latin_hypercube(n_dims: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """One stratified sample per row, independently permuted per dimension."""
    grid = (np.arange(count)[:, None] + rng.random((count, n_dims))) / count
    for j in range(n_dims):
        grid[:, j] = grid[rng.permutation(count), j]
    return grid


def exact_shapley(predict, point: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Shapley values by full coalition enumeration (n <= 12).

    Coalition value v(S) marginalizes absent features over the background
    rows, matching the sampled estimator's marginalization.
    """
    point = np.asarray(point, dtype=np.float64)
    background = np.atleast_2d(background)
    n = point.size
    if n > 12:
        raise UsageError(f"exact enumeration is limited to 12 features, got {n}")
    values = np.empty(1 << n)
    for mask in range(1 << n):
        comp = background.copy()
        for j in range(n):
            if mask >> j & 1:
                comp[:, j] = point[j]
        values[mask] = predict(comp).mean()
    fact = [math.factorial(i) for i in range(n + 1)]
    phi = np.zeros(n)
    for mask in range(1 << n):
        size = bin(mask).count("1")
        weight = fact[size] * fact[n - size - 1] / fact[n]
        for j in range(n):
            if not mask >> j & 1:
                phi[j] += weight * (values[mask | 1 << j] - values[mask])
    return phi


def fd_gradients(loss_fn, arrays: dict[str, np.ndarray],
                 step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of ``loss_fn()`` w.r.t. each array entry.

    Arrays are perturbed in place (the loss closure must read them live) and
    restored afterwards.
    """
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss_fn()
            arr[idx] = orig - step
            down = loss_fn()
            arr[idx] = orig
            g[idx] = (up - down) / (2.0 * step)
            it.iternext()
        grads[name] = g
    return grads


def grad_check(loss_fn, arrays: dict[str, np.ndarray],
               analytic: dict[str, np.ndarray], step: float = 1e-5,
               tolerance: float = 1e-4) -> list[OracleResult]:
    """Compare analytic gradients to central differences, per array.

    The reported value is the relative error in vector norm,
    ||g_a - g_fd|| / max(||g_fd||, 1e-12).
    """
    numeric = fd_gradients(loss_fn, arrays, step)
    results = []
    for name in arrays:
        fd = numeric[name].ravel()
        an = analytic[name].ravel()
        denom = max(float(np.linalg.norm(fd)), 1e-12)
        rel = float(np.linalg.norm(an - fd)) / denom
        results.append(OracleResult(name=name, value=rel, tolerance=tolerance,
                                    passed=rel < tolerance))
    return results


def erf_approx(x: float) -> float:
    """Rational erf approximation (absolute error below 1.5e-7)."""
    sign = 1.0 if x >= 0 else -1.0
    x = abs(x)
    t = 1.0 / (1.0 + 0.3275911 * x)
    poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741
               + t * (-1.453152027 + t * 1.061405429))))
    return sign * (1.0 - poly * math.exp(-x * x))


def phi(x: float) -> float:
    """Reference standard-normal CDF via erf_approx (|error| < 1e-7)."""
    return 0.5 * (1.0 + erf_approx(x / math.sqrt(2.0)))


def normal_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


# Acklam's rational approximation of the standard-normal quantile function;
# relative error is below 1.2e-9 over (0, 1).
_PPF_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
          1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_PPF_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
          6.680131188771972e+01, -1.328068155288572e+01)
_PPF_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
          -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_PPF_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
          3.754408661907416e+00)


def normal_ppf(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0) or np.any(p >= 1):
        raise UsageError("quantiles must lie strictly inside (0, 1)")
    out = np.empty_like(p)
    lo = p < 0.02425
    hi = p > 1 - 0.02425
    mid = ~(lo | hi)

    def tail(q):
        t = np.sqrt(-2.0 * np.log(q))
        num = ((((_PPF_C[0] * t + _PPF_C[1]) * t + _PPF_C[2]) * t + _PPF_C[3]) * t
               + _PPF_C[4]) * t + _PPF_C[5]
        den = (((_PPF_D[0] * t + _PPF_D[1]) * t + _PPF_D[2]) * t + _PPF_D[3]) * t + 1.0
        return num / den

    out[lo] = tail(p[lo])
    out[hi] = -tail(1.0 - p[hi])
    q = p[mid] - 0.5
    r = q * q
    num = ((((_PPF_A[0] * r + _PPF_A[1]) * r + _PPF_A[2]) * r + _PPF_A[3]) * r
           + _PPF_A[4]) * r + _PPF_A[5]
    den = ((((_PPF_B[0] * r + _PPF_B[1]) * r + _PPF_B[2]) * r + _PPF_B[3]) * r
           + _PPF_B[4]) * r + 1.0
    out[mid] = q * num / den
    return out


def mc_expected_improvement(f_star: float, mu: float, sigma: float,
                            n_samples: int, rng: np.random.Generator) -> float:
    """Stratified Monte-Carlo estimate of E[max(0, f_star - X)], X ~ N(mu, sigma).

    One random draw per probability stratum keeps the estimator unbiased
    while shrinking its error far below a plain-sampling standard error.
    """
    u = (np.arange(n_samples) + rng.random(n_samples)) / n_samples
    x = mu + sigma * normal_ppf(u)
    return float(np.maximum(0.0, f_star - x).mean())
