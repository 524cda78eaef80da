"""Independent numerical references used by several test modules."""

import math

from scipy import integrate, optimize, stats


def gaussian_hockey_stick(delta2: float, sigma: float, eps: float) -> float:
    """``int max(0, p - e^eps q)`` for p = N(delta2, sigma^2), q = N(0, sigma^2)."""
    p = stats.norm(delta2, sigma)
    q = stats.norm(0.0, sigma)

    def log_lr(y):
        return p.logpdf(y) - q.logpdf(y)

    lo, hi = -1e3 * (sigma + delta2), 1e3 * (sigma + delta2)
    y0 = optimize.brentq(lambda y: log_lr(y) - eps, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=500)
    scale = math.exp(eps)
    val, _ = integrate.quad(
        lambda y: p.pdf(y) - scale * q.pdf(y), y0, y0 + 60 * sigma, epsabs=1e-14, epsrel=1e-13, limit=400
    )
    return max(0.0, val)


def laplace_hockey_stick(delta1: float, b: float, eps: float) -> float:
    """Same divergence for Lap(delta1, b) against Lap(0, b)."""
    if eps >= delta1 / b:
        return 0.0
    p = stats.laplace(delta1, b)
    q = stats.laplace(0.0, b)

    # log LR = (|y| - |y - delta1|) / b rises linearly on [0, delta1]
    y0 = optimize.brentq(lambda y: (abs(y) - abs(y - delta1)) / b - eps, 0.0, delta1, xtol=1e-15, rtol=1e-15)
    scale = math.exp(eps)
    f = lambda y: p.pdf(y) - scale * q.pdf(y)  # noqa: E731
    a, _ = integrate.quad(f, y0, delta1, epsabs=1e-13, epsrel=1e-12, limit=200)
    c, _ = integrate.quad(f, delta1, delta1 + 60 * b, epsabs=1e-13, epsrel=1e-12, limit=200)
    return max(0.0, a + c)
