"""Truncation machinery: the (omega, h) pair, the ball projection and the
step-size condition calculators.

omega bounds coefficient magnitude on balls, h sets the per-step coefficient
budget, and the truncation radius is omega^{-1}(h(delta)).  The default
configuration restricts both to power laws, which have exact closed-form
inverses and let the old-condition threshold be solved in log space; a generic
monotone variant with a bisection inverse sits behind the same interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .model import SdeModel, eval_l_op, sigma_matrix


@dataclass(frozen=True)
class TruncationConfig:
    """Power-law pair omega(u) = c_w * u**rho, h(delta) = c_h * delta**(-eps).

    delta**(1/4) * h(delta) <= h_bar on (0, 1] is enforced at construction,
    which for the power family reduces to eps <= 1/4 and c_h <= h_bar.
    """

    omega_coeff: float
    omega_power: float
    h_coeff: float
    h_power: float
    h_bar: float

    def __post_init__(self) -> None:
        if not self.omega_coeff > 0:
            raise ValueError("omega coefficient must be positive")
        if not self.omega_power >= 1:
            raise ValueError("omega power must be >= 1")
        if not self.h_coeff > 0:
            raise ValueError("h coefficient must be positive")
        if not 0 < self.h_power <= 0.25:
            raise ValueError("h power must lie in (0, 1/4]")
        if not self.h_bar >= 1:
            raise ValueError("h_bar must be >= 1")
        if self.h_coeff > self.h_bar:
            raise ValueError("h coefficient must not exceed h_bar "
                             "(otherwise delta^(1/4) h(delta) > h_bar at delta = 1)")

    def omega(self, u):
        return self.omega_coeff * np.asarray(u, dtype=float) ** self.omega_power

    def omega_inv(self, v):
        return (np.asarray(v, dtype=float) / self.omega_coeff) ** (1.0 / self.omega_power)

    def h(self, delta: float) -> float:
        return self.h_coeff * delta ** (-self.h_power)

    def radius(self, delta: float) -> float:
        """Truncation radius omega^{-1}(h(delta))."""
        _check_delta(delta)
        return float(self.omega_inv(self.h(delta)))


class MonotoneTruncation:
    """Generic (omega, h) pair with a bisection inverse for omega.

    Same evaluation interface as :class:`TruncationConfig`; used when the
    coefficient bound is not a power law.  omega must be strictly increasing
    and unbounded, h strictly decreasing on (0, 1].
    """

    def __init__(self, omega: Callable[[float], float], h: Callable[[float], float],
                 h_bar: float = 1.0) -> None:
        if not h_bar >= 1:
            raise ValueError("h_bar must be >= 1")
        self._omega = omega
        self._h = h
        self.h_bar = h_bar

    def omega(self, u: float) -> float:
        return float(self._omega(u))

    def h(self, delta: float) -> float:
        return float(self._h(delta))

    def omega_inv(self, v: float) -> float:
        hi = 1.0
        while self.omega(hi) < v:
            hi *= 2.0
            if hi > 1e200:
                raise ValueError("omega appears bounded; cannot invert")
        if self.omega(0.0) > v:
            raise ValueError(f"value {v} below omega(0)")
        return float(brentq(lambda u: self.omega(u) - v, 0.0, hi, xtol=1e-12 * max(1.0, hi)))

    def radius(self, delta: float) -> float:
        _check_delta(delta)
        return self.omega_inv(self.h(delta))


def _check_delta(delta: float) -> None:
    if not 0 < delta <= 1:
        raise ValueError(f"step size must lie in (0, 1], got {delta}")


def project(cfg, delta: float, x) -> np.ndarray:
    """Metric projection of x onto the ball of radius omega^{-1}(h(delta)).

    Total on finite inputs; x/|x| is taken as 0 at x = 0.  The returned norm
    never exceeds the radius, so the projection is exactly idempotent.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    r = cfg.radius(delta)
    if x.shape == (1,):
        return np.where(np.abs(x) <= r, x, np.copysign(r, x))
    n = float(np.linalg.norm(x))
    if n <= r or n == 0.0:
        return x
    y = x * (r / n)
    # one more contraction if rounding left the norm a hair above r
    while float(np.linalg.norm(y)) > r:
        y = y * (r / float(np.linalg.norm(y)))
    return y


def project_scalar_batch(cfg, delta: float, y: np.ndarray) -> np.ndarray:
    """Elementwise projection for batches of scalar states."""
    r = cfg.radius(delta)
    return np.where(np.abs(y) <= r, y, np.copysign(r, y))


@dataclass(frozen=True)
class TruncatedCoeffs:
    """Drift, diffusion and L-operator blocks evaluated at the projected point."""

    point: np.ndarray          # pi_delta(x), shape (d,)
    mu: np.ndarray             # shape (d,)
    sigma: np.ndarray          # shape (d, m)
    l_terms: np.ndarray        # shape (m, m, d), [j1-1, j2-1] = L^{j1} sigma_{j2}


def truncated_coeffs(model: SdeModel, cfg, delta: float, x) -> TruncatedCoeffs:
    """Evaluate mu, sigma_j and L^{j1} sigma_{j2} at pi_delta(x)."""
    z = project(cfg, delta, x)
    mu = np.broadcast_to(np.asarray(model.drift(z), dtype=float), (model.d,))
    sigma = sigma_matrix(model, z)
    l_terms = np.empty((model.m, model.m, model.d))
    for j1 in range(1, model.m + 1):
        for j2 in range(1, model.m + 1):
            l_terms[j1 - 1, j2 - 1] = eval_l_op(model, z, j1, j2)
    return TruncatedCoeffs(point=z, mu=np.array(mu), sigma=sigma, l_terms=l_terms)


# ---------------------------------------------------------------------------
# step-size condition calculators


def _power_law_condition(cfg: TruncationConfig, q: float, p: float):
    """Reduce the legacy condition h(D) >= omega((D^q h(D)^{2q})^{-1/(p-q)})
    to log(c) >= a * log(D) and return (log c, a)."""
    eps = cfg.h_power
    rho = cfg.omega_power
    a = eps - rho * q * (1.0 - 2.0 * eps) / (p - q)
    log_c = (1.0 + 2.0 * q * rho / (p - q)) * math.log(cfg.h_coeff) - math.log(cfg.omega_coeff)
    return log_c, a


def old_condition_threshold(cfg, q: float, p: float) -> float:
    """Largest step size in (0, 1] below which the legacy restriction holds.

    Solved in closed form (log space) for power-law configs; by log-space
    bisection for :class:`MonotoneTruncation`.  Returns 0 when the condition
    fails for all arbitrarily small steps, 1 when it never binds.
    """
    if not (q >= 1 and p > q):
        raise ValueError(f"need q >= 1 and p > q, got q={q}, p={p}")
    if isinstance(cfg, TruncationConfig):
        log_c, a = _power_law_condition(cfg, q, p)
        if a > 0:
            if log_c >= 0:
                return 1.0
            return math.exp(log_c / a)
        if a == 0:
            return 1.0 if log_c >= 0 else 0.0
        # RHS grows without bound as delta -> 0: never holds on a full interval
        return 0.0
    return _bisect_threshold(cfg, q, p)


def _condition_holds(cfg, q: float, p: float, log_delta: float) -> bool:
    delta = math.exp(log_delta)
    h = cfg.h(delta)
    inner = (delta**q * h ** (2.0 * q)) ** (-1.0 / (p - q))
    return h >= cfg.omega(inner)


def _bisect_threshold(cfg, q: float, p: float, log_floor: float = math.log(1e-120)) -> float:
    if _condition_holds(cfg, q, p, 0.0) and _condition_holds(cfg, q, p, log_floor):
        return 1.0
    if not _condition_holds(cfg, q, p, log_floor):
        return 0.0
    lo, hi = log_floor, 0.0  # holds at lo, fails somewhere above
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _condition_holds(cfg, q, p, mid):
            lo = mid
        else:
            hi = mid
    return math.exp(lo)


def new_error_bound(cfg, q: float, p: float, r: float, delta: float) -> float:
    """Shape of the relaxed error bound
    max(delta^{2q} h^{4q}, omega^{-1}(h(delta))^{-(2p-2qr-2q)}), up to a constant.

    Evaluated in log space so extreme exponents do not overflow.
    """
    if not p > (1.0 + r) * q:
        raise ValueError(f"need p > (1+r)q, got p={p}, q={q}, r={r}")
    _check_delta(delta)
    log_h = math.log(cfg.h(delta))
    t1 = 2.0 * q * math.log(delta) + 4.0 * q * log_h
    t2 = -(2.0 * p - 2.0 * q * r - 2.0 * q) * math.log(cfg.radius(delta))
    return math.exp(max(t1, t2))


def _frac(x: float) -> Fraction:
    return Fraction(x).limit_denominator(10**9)


def dominant_rate(cfg: TruncationConfig, q: float, p: float, r: float) -> float:
    """Exponent of the dominant (slower) term of the error bound as delta -> 0.

    Computed with rational arithmetic so paper-style exponents come out exact.
    """
    if not p > (1.0 + r) * q:
        raise ValueError(f"need p > (1+r)q, got p={p}, q={q}, r={r}")
    eps, rho = _frac(cfg.h_power), _frac(cfg.omega_power)
    qf, pf, rf = _frac(q), _frac(p), _frac(r)
    e1 = 2 * qf * (1 - 2 * eps)
    e2 = (eps / rho) * (2 * pf - 2 * qf * rf - 2 * qf)
    return float(min(e1, e2))


# ---------------------------------------------------------------------------
# sampled probes tied to the truncated coefficients


def coefficient_bound_margin(model: SdeModel, cfg, delta: float, points: Sequence) -> float:
    """Worst (block norm - h(delta)) over truncated-coefficient blocks at the
    given points; <= 0 confirms the boundedness guarantee."""
    bound = cfg.h(delta)
    worst = -math.inf
    for x in points:
        tc = truncated_coeffs(model, cfg, delta, x)
        blocks = [float(np.linalg.norm(tc.mu))]
        blocks += [float(np.linalg.norm(tc.sigma[:, j])) for j in range(model.m)]
        blocks += [float(np.linalg.norm(tc.l_terms[j1, j2]))
                   for j1 in range(model.m) for j2 in range(model.m)]
        worst = max(worst, max(blocks) - bound)
    return worst


def preservation_margin(model: SdeModel, cfg, delta: float, p_bar: float,
                        lambda2: float, points: Sequence) -> float:
    """Worst margin of <x, mu~(x)> + (2 p_bar - 1) |sigma~(x)|^2 <= 2 lambda2 (1 + |x|^2)."""
    worst = -math.inf
    for x in points:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        tc = truncated_coeffs(model, cfg, delta, x)
        lhs = float(np.dot(x, tc.mu)) + (2.0 * p_bar - 1.0) * float(np.sum(tc.sigma**2))
        worst = max(worst, lhs - 2.0 * lambda2 * (1.0 + float(np.dot(x, x))))
    return worst


def fit_lambda2(model: SdeModel, p_bar: float, points: Sequence) -> float:
    """Smallest lambda2 making <x, mu> + (2 p_bar - 1)|sigma|^2 <= lambda2 (1+|x|^2)
    hold at the sampled points (floored at 1e-6)."""
    best = 1e-6
    for x in points:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        mu = np.broadcast_to(np.asarray(model.drift(x), dtype=float), (model.d,))
        lhs = float(np.dot(x, mu)) + (2.0 * p_bar - 1.0) * float(np.sum(sigma_matrix(model, x) ** 2))
        best = max(best, lhs / (1.0 + float(np.dot(x, x))))
    return best
