"""Per-round (epsilon, delta) accounting for CEPAM.

Profiles follow the analytic Gaussian mechanism and the Laplace privacy
profile; amplification is by subsampling with replacement, which is what
``tau`` single-sample local SGD steps amount to.  Everything is evaluated
in log space so that budgets of order 1e4 do not overflow.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaln, log_ndtr

LOG_TINY = -745.0  # below log of the smallest subnormal double


class InfeasiblePrivacyTarget(ValueError):
    pass


def _log_expm1(x: float) -> float:
    """``log(e^x - 1)`` for ``x > 0`` without overflow."""
    if x <= 0:
        raise ValueError("log_expm1 needs x > 0")
    if x > 50:
        return x + math.log1p(-math.exp(-x))
    return math.log(math.expm1(x))


def _log_sub_exp(a: float, b: float) -> float:
    """``log(e^a - e^b)`` for ``a >= b``; ``-inf`` when equal."""
    if b == -math.inf or b < a - 800:
        return a
    d = b - a
    if d >= 0:
        return -math.inf
    return a + math.log(-math.expm1(d))


def gaussian_log_delta(sensitivity: float, sigma: float, eps: float) -> float:
    if sensitivity <= 0 or sigma <= 0:
        raise ValueError("sensitivity and sigma must be positive")
    if eps < 0:
        raise ValueError("epsilon must be non-negative")
    ratio = sensitivity / (2.0 * sigma)
    shift = eps * sigma / sensitivity
    return min(0.0, _log_sub_exp(float(log_ndtr(ratio - shift)), eps + float(log_ndtr(-ratio - shift))))


def gaussian_profile_delta(sensitivity: float, sigma: float, eps: float) -> float:
    """``Phi(D/2s - e s/D) - e^e Phi(-D/2s - e s/D)``, clamped to [0, 1]."""
    return min(1.0, max(0.0, math.exp(gaussian_log_delta(sensitivity, sigma, eps))))


def laplace_log_delta(sensitivity: float, scale: float, eps: float) -> float:
    if sensitivity <= 0 or scale <= 0:
        raise ValueError("sensitivity and scale must be positive")
    if eps < 0:
        raise ValueError("epsilon must be non-negative")
    t = 0.5 * (eps - sensitivity / scale)
    if t >= 0:
        return -math.inf
    return math.log(-math.expm1(t))


def laplace_profile_delta(sensitivity: float, scale: float, eps: float) -> float:
    """``[1 - exp((eps - D/b) / 2)]_+``."""
    return math.exp(laplace_log_delta(sensitivity, scale, eps))


@dataclass(frozen=True)
class PrivacyProfile:
    """``eps -> delta`` for a Gaussian or Laplace mechanism.

    ``covers_groups`` marks a profile whose sensitivity already bounds the
    change caused by any number of replaced records (true for CEPAM, where
    the whole update is clipped); such a profile is its own group profile.
    """

    mechanism: str
    sensitivity: float
    scale: float
    covers_groups: bool = False

    def __post_init__(self):
        if self.mechanism not in ("gaussian", "laplace"):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.sensitivity <= 0 or self.scale <= 0:
            raise ValueError("sensitivity and noise scale must be positive")

    def log_delta(self, eps: float) -> float:
        if self.mechanism == "gaussian":
            return gaussian_log_delta(self.sensitivity, self.scale, eps)
        return laplace_log_delta(self.sensitivity, self.scale, eps)

    def delta(self, eps: float) -> float:
        return min(1.0, math.exp(self.log_delta(eps)))


def gaussian_profile(sensitivity: float, sigma: float) -> PrivacyProfile:
    return PrivacyProfile("gaussian", sensitivity, sigma)


def laplace_profile(sensitivity: float, scale: float, covers_groups: bool = False) -> PrivacyProfile:
    return PrivacyProfile("laplace", sensitivity, scale, covers_groups)


def group_log_bound(base: PrivacyProfile, j: int, eps_tilde: float) -> float:
    if j < 1:
        raise ValueError("group size must be >= 1")
    if j == 1 or base.covers_groups:
        return base.log_delta(eps_tilde)
    if eps_tilde <= 0:
        raise ValueError("group bound needs eps_tilde > 0")
    inner = base.log_delta(eps_tilde / j)
    if inner == -math.inf:
        return -math.inf
    return _log_expm1(eps_tilde) - _log_expm1(eps_tilde / j) + inner


def group_profile_bound(base: PrivacyProfile, j: int, eps_tilde: float) -> float:
    """``(e^e - 1) / (e^{e/j} - 1) * delta_base(e/j)``; may exceed 1 (or be inf)."""
    lb = group_log_bound(base, j, eps_tilde)
    return math.inf if lb > 709.0 else math.exp(lb)


def sampling_probability(n_data: int, tau: int) -> float:
    """``1 - (1 - 1/n)^tau``: chance a given record is used in a round."""
    if n_data < 1 or tau < 1:
        raise ValueError("dataset size and tau must be >= 1")
    if n_data == 1:
        return 1.0
    return -math.expm1(tau * math.log1p(-1.0 / n_data))


def amplified_epsilon(eps_tilde: float, p: float) -> float:
    """``log(1 + p (e^eps_tilde - 1))``."""
    if eps_tilde < 0:
        raise ValueError("eps_tilde must be non-negative")
    if eps_tilde == 0 or p == 0:
        return 0.0
    if eps_tilde < 700:
        return math.log1p(p * math.expm1(eps_tilde))
    return float(np.logaddexp(0.0, math.log(p) + _log_expm1(eps_tilde)))


def base_epsilon(eps: float, p: float) -> float:
    """Inverse of :func:`amplified_epsilon`: ``log(1 + (e^eps - 1) / p)``."""
    if eps <= 0:
        raise ValueError("target epsilon must be positive")
    if eps < 700:
        return math.log1p(math.expm1(eps) / p)
    return float(np.logaddexp(0.0, _log_expm1(eps) - math.log(p)))


def amplified_delta_subsampling(base: PrivacyProfile, n_data: int, tau: int, eps_tilde: float) -> tuple[float, float]:
    """Amplification by subsampling ``tau`` records with replacement from ``n_data``.

    Returns ``(eps, delta)``; delta is the binomial mixture of group bounds,
    summed in log space and clamped to [0, 1].
    """
    p = sampling_probability(n_data, tau)
    eps = amplified_epsilon(eps_tilde, p)
    if base.covers_groups:
        return eps, min(1.0, p * base.delta(eps_tilde))
    if tau == 1:
        # single term with weight exactly 1/n; skip the lossy log round trip
        return eps, min(1.0, base.delta(eps_tilde) / n_data)
    log_q = math.log1p(-1.0 / n_data) if n_data > 1 else -math.inf
    terms = []
    for j in range(1, tau + 1):
        lg = group_log_bound(base, j, eps_tilde)
        if lg == -math.inf:
            continue
        log_w = float(gammaln(tau + 1) - gammaln(j + 1) - gammaln(tau - j + 1)) - j * math.log(n_data)
        if tau > j:
            if log_q == -math.inf:
                continue
            log_w += (tau - j) * log_q
        terms.append(log_w + lg)
    if not terms:
        return eps, 0.0
    log_delta = float(np.logaddexp.reduce(terms))
    return eps, math.exp(min(0.0, log_delta))


@dataclass(frozen=True)
class RoundPrivacyReport:
    mechanism: str
    eps_tilde: float
    eps: float
    delta: float
    inputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def cepam_gaussian_round(
    gamma: float, tau: int, clients: int, sigma: float, n_data: int, eps_tilde: float
) -> RoundPrivacyReport:
    """Guarantee of the server average after one round of CEPAM-Gaussian.

    Sensitivity of the average is ``2*tau*gamma/K`` and its noise scale is
    ``sigma/sqrt(K)``.
    """
    base = gaussian_profile(2.0 * tau * gamma / clients, sigma / math.sqrt(clients))
    eps, delta = amplified_delta_subsampling(base, n_data, tau, eps_tilde)
    inputs = {"gamma": gamma, "tau": tau, "clients": clients, "sigma": sigma, "n_data": n_data}
    return RoundPrivacyReport("cepam-gaussian", eps_tilde, eps, delta, inputs)


def cepam_laplace_round(gamma: float, tau: int, scale: float, n_data: int, eps_tilde: float) -> RoundPrivacyReport:
    """Guarantee of one client's CEPAM-Laplace update; delta = 0 iff eps_tilde >= 2*tau*gamma/b."""
    base = laplace_profile(2.0 * tau * gamma, scale, covers_groups=True)
    eps, delta = amplified_delta_subsampling(base, n_data, tau, eps_tilde)
    inputs = {"gamma": gamma, "tau": tau, "scale": scale, "n_data": n_data}
    return RoundPrivacyReport("cepam-laplace", eps_tilde, eps, delta, inputs)


def gaussian_delta_ceiling(eps: float, gamma: float, tau: int, clients: int, n_data: int) -> float:
    """Largest delta the Gaussian accountant can report at ``eps`` (the sigma -> 0 limit)."""
    p = sampling_probability(n_data, tau)
    eps_tilde = base_epsilon(eps, p)
    sensitivity = 2.0 * tau * gamma / clients
    # any sigma small enough that every base term saturates at 1
    tiny = sensitivity * 1e-9
    return cepam_gaussian_round(gamma, tau, clients, tiny * math.sqrt(clients), n_data, eps_tilde).delta


def calibrate_sigma(
    eps_target: float,
    delta_target: float,
    gamma: float,
    tau: int,
    clients: int,
    n_data: int,
    rtol: float = 1e-9,
) -> float:
    """Smallest per-client sigma meeting ``(eps_target, delta_target)`` in one round.

    Solves for the base budget from ``eps_target`` and bisects on ``log sigma``.
    Raises :class:`InfeasiblePrivacyTarget` when ``delta_target`` is at or
    above the accountant's ceiling for this ``eps_target``.
    """
    if not 0 < delta_target < 1:
        raise InfeasiblePrivacyTarget("delta target must lie in (0, 1)")
    p = sampling_probability(n_data, tau)
    eps_tilde = base_epsilon(eps_target, p)

    def delta_at(log_sigma: float) -> float:
        return cepam_gaussian_round(gamma, tau, clients, math.exp(log_sigma), n_data, eps_tilde).delta

    ceiling = gaussian_delta_ceiling(eps_target, gamma, tau, clients, n_data)
    if delta_target >= ceiling:
        raise InfeasiblePrivacyTarget(
            f"delta={delta_target:g} is unattainable at eps={eps_target:g}: the subsampled "
            f"accountant never exceeds {ceiling:.6g} for |D|={n_data}, tau={tau}"
        )
    sens = 2.0 * tau * gamma / clients * math.sqrt(clients)
    lo, hi = math.log(sens * 1e-9), math.log(sens)
    while delta_at(hi) > delta_target:
        hi += math.log(4.0)
        if hi > lo + 200:
            raise InfeasiblePrivacyTarget("no sigma found that meets the delta target")
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        d = delta_at(mid)
        if abs(d - delta_target) <= rtol * delta_target:
            return math.exp(mid)
        if d > delta_target:
            lo = mid
        else:
            hi = mid
    return math.exp(0.5 * (lo + hi))


def naive_composition(report: RoundPrivacyReport, rounds: int) -> tuple[float, float]:
    """Upper bound ``(R*eps, R*delta)`` over ``R`` rounds by basic composition."""
    return rounds * report.eps, min(1.0, rounds * report.delta)
