"""Closed-form step sizes and guaranteed rates, plus enumeration audits.

All formulas are driven by the regime parameter

    K = 4 q L / (n mu),

which separates the big-data regime (K small, rate ~ q/n) from the
ill-conditioned regime (K large, rate ~ mu/4L).  Functions here are pure and
tolerance-free; numerical slack lives only in tests.

The `*_audit` functions numerically validate the one-step inequalities the
rate results rest on, by enumerating the index and update-set distributions
exactly on small problems.  They are deliberately independent of the
optimizer engine: memory enters as a plain (n, d) array of stored vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .memengine import SamplerSpec, enumerate_update_distribution
from .problem import LossModel, ReferenceOptimum


def k_param(mu: float, lipschitz: float, q: int, n: int) -> float:
    return 4.0 * q * lipschitz / (n * mu)


def a_star(K: float) -> float:
    """Optimal step-size scale: gamma* = a*(K) / (4L)."""
    if K <= 0:
        raise ValueError("K must be positive")
    return 2.0 * K / (1.0 + K + math.sqrt(1.0 + K * K))


def gamma_star(K: float, lipschitz: float) -> float:
    if lipschitz <= 0:
        raise ValueError("L must be positive")
    return a_star(K) / (4.0 * lipschitz)


def a_tilde(K: float) -> float:
    """Step-size scale patched for eps-accurate memory; decays to (2/3)a*."""
    if K <= 0:
        raise ValueError("K must be positive")
    return 2.0 * K / (1.0 + 1.5 * K + math.sqrt(1.0 + K + (1.5 * K) ** 2))


def gamma_tilde(K: float, lipschitz: float) -> float:
    if lipschitz <= 0:
        raise ValueError("L must be positive")
    return a_tilde(K) / (4.0 * lipschitz)


def rho_of_gamma(gamma: float, mu: float, lipschitz: float, q: int, n: int) -> float:
    """Guaranteed per-step contraction rate for step size gamma in (0, 1/(4L)).

    Above gamma*(K) the rate is (q/n)(1-a)/(1-a/2) with a = 4 L gamma;
    below it the rate is mu * gamma.  The two branches agree at gamma*.
    """
    L = lipschitz
    if not 0.0 < gamma < 1.0 / (4.0 * L):
        raise ValueError(f"gamma must lie in (0, {1.0 / (4.0 * L):.3e}), got {gamma}")
    K = k_param(mu, L, q, n)
    if gamma >= gamma_star(K, L):
        a = 4.0 * L * gamma
        return (q / n) * (1.0 - a) / (1.0 - 0.5 * a)
    return mu * gamma


def rho_star(mu: float, lipschitz: float, q: int, n: int, K: float | None = None) -> float:
    """Best guaranteed rate, attained at gamma*(K)."""
    K_actual = k_param(mu, lipschitz, q, n)
    if K is not None and not math.isclose(K, K_actual, rel_tol=1e-9):
        raise ValueError(f"inconsistent K: given {K}, computed {K_actual}")
    return (q / n) * 2.0 / (1.0 + K_actual + math.sqrt(1.0 + K_actual * K_actual))


def universal_gamma(lipschitz: float) -> float:
    """mu-independent step size whose rate is within 2 - sqrt(2) of optimal."""
    if lipschitz <= 0:
        raise ValueError("L must be positive")
    return (2.0 - math.sqrt(2.0)) / (4.0 * lipschitz)


def universal_ratio(K: float) -> float:
    """rho(universal gamma) / rho*(K); a function of K alone, >= 2 - sqrt(2)."""
    a = 2.0 - math.sqrt(2.0)
    astar = a_star(K)
    if a >= astar:
        return K * (1.0 - a) / ((1.0 - 0.5 * a) * astar)
    return a / astar


def admissible_step(c: float, sigma: float, K: float, lipschitz: float) -> float:
    """Largest step size for which the one-step potential contracts at c*mu*gamma.

    Computes the bound in both of its algebraically equivalent published
    forms and insists they agree, guarding against transcription drift.
    """
    if not 0.0 < c <= 1.0:
        raise ValueError("c must be in (0, 1]")
    if not 0.0 <= sigma <= 1.0:
        raise ValueError("sigma must be in [0, 1]")
    if K <= 0 or lipschitz <= 0:
        raise ValueError("K and L must be positive")
    L = lipschitz
    main = (1.0 / (2.0 * L)) * min(K * sigma / (K + 2.0 * c * sigma), 1.0 - sigma)
    alt = (1.0 / L) * min(K * sigma / (2.0 * K + 4.0 * c * sigma), (1.0 - sigma) / 2.0)
    if abs(main - alt) > 1e-12 * max(1.0, abs(main)):
        raise AssertionError(f"admissible-step forms disagree: {main} vs {alt}")
    return main


def s_gamma(gamma: float, mu: float, lipschitz: float, q: int, n: int) -> float:
    """Weight of the memory-error term in the starting potential."""
    K = k_param(mu, lipschitz, q, n)
    return (4.0 * gamma / (K * mu)) * (1.0 - 2.0 * lipschitz * gamma)


def approx_bound(t, gamma: float, mu: float, eps: float, L0: float):
    """Potential bound under eps-accurate memory: (1-mu*gamma)^t L0 + 4*gamma*eps/mu.

    `eps` bounds the mean squared memory error E||alpha_i - beta_i||^2.  The
    starting potential L0 uses mean ||f'_i(w*)||^2 (see `initial_lyapunov`).
    Accepts a scalar or array of step counts t.
    """
    rate = mu * gamma
    if not 0.0 < rate < 1.0:
        raise ValueError(f"mu*gamma must lie in (0, 1), got {rate}")
    t = np.asarray(t)
    return (1.0 - rate) ** t * L0 + 4.0 * gamma * eps / mu


def mean_grad_sq_at_optimum(model: LossModel, ref: ReferenceOptimum) -> float:
    """mean_i ||f'_i(w*)||^2; also the memory-error level of plain SGD
    (zero corrections), pluggable into `approx_bound` as eps."""
    grads, _ = model.gradient_batch(np.arange(model.n), ref.w_star)
    return float(np.einsum("ij,ij->i", grads, grads).mean())


def initial_lyapunov(
    model: LossModel, ref: ReferenceOptimum, w0: np.ndarray, gamma: float, q: int
) -> float:
    """Starting potential ||w0 - w*||^2 + s(gamma) * mean ||f'_i(w*)||^2."""
    diff = w0 - ref.w_star
    s = s_gamma(gamma, model.mu, model.lipschitz, q, model.n)
    return float(diff @ diff) + s * mean_grad_sq_at_optimum(model, ref)


@dataclass(frozen=True)
class RateParams:
    """Problem constants from which every rate quantity derives."""

    mu: float
    lipschitz: float
    n: int
    q: int

    @property
    def K(self) -> float:
        return k_param(self.mu, self.lipschitz, self.q, self.n)

    @property
    def kappa(self) -> float:
        return self.lipschitz / self.mu

    def gamma_star(self) -> float:
        return gamma_star(self.K, self.lipschitz)

    def gamma_tilde(self) -> float:
        return gamma_tilde(self.K, self.lipschitz)

    def rho_star(self) -> float:
        return rho_star(self.mu, self.lipschitz, self.q, self.n)

    def rho(self, gamma: float) -> float:
        return rho_of_gamma(gamma, self.mu, self.lipschitz, self.q, self.n)

    def universal_gamma(self) -> float:
        return universal_gamma(self.lipschitz)


@dataclass
class LyapunovState:
    """Tracked per-slot error bounds H_i plus the potential's fixed weights."""

    H: np.ndarray
    S: float
    sigma: float

    @property
    def H_mean(self) -> float:
        return float(self.H.mean())

    def value(self, w: np.ndarray, w_star: np.ndarray) -> float:
        diff = w - w_star
        return float(diff @ diff) + self.S * self.sigma * self.H_mean


@dataclass(frozen=True)
class ApproxRateParams:
    """Bundle for eps-accurate runs: step size, error level, starting potential."""

    eps: float
    gamma: float
    mu: float
    L0: float
    s_gamma: float

    def bound(self, t):
        return approx_bound(t, self.gamma, self.mu, self.eps, self.L0)


# -- suboptimality decompositions -------------------------------------------


def h_values(model: LossModel, ref: ReferenceOptimum, w: np.ndarray) -> np.ndarray:
    """All h_i(w) = f_i(w) - f_i(w*) - <w - w*, f'_i(w*)>, nonnegative by convexity."""
    w_star = ref.w_star
    diff = w - w_star
    fi_w = model.point_objectives(w)
    fi_s = model.point_objectives(w_star)
    xis_s = model.xi_prime_all(w_star)
    inner = xis_s * (model.instance.features @ diff) + model.mu * float(w_star @ diff)
    return fi_w - fi_s - inner


def h_suboptimality(model: LossModel, ref: ReferenceOptimum, w: np.ndarray, i: int | None = None):
    """h_i(w) for one datapoint, or the objective gap f(w) - f(w*) when i is None."""
    if ref is None:
        raise ValueError("reference optimum required")
    if i is None:
        return model.objective(w) - ref.f_star
    if not 0 <= i < model.n:
        raise IndexError(f"datapoint index {i} out of range")
    return float(h_values(model, ref, w)[i])


# -- enumeration audits ------------------------------------------------------


def _grads_at(model, w):
    grads, _ = model.gradient_batch(np.arange(model.n), w)
    return grads


def memory_mean_recurrence_audit(
    model: LossModel,
    ref: ReferenceOptimum,
    w: np.ndarray,
    H: np.ndarray,
    sampler: SamplerSpec,
) -> tuple[float, float]:
    """Exact E[mean(H+)] by enumeration vs the closed form
    ((n-q)/n) mean(H) + (2Lq/n)(f(w) - f*).  H+ sets H_j := 2L h_j(w) on
    refreshed slots."""
    n = model.n
    L = model.lipschitz
    h = h_values(model, ref, w)
    base = float(H.sum())
    enumerated = 0.0
    for J, p in enumerate_update_distribution(sampler):
        js = np.fromiter(J, dtype=np.int64, count=len(J))
        delta = float((2.0 * L * h[js] - H[js]).sum()) if js.size else 0.0
        enumerated += float(p) * (base + delta) / n
    f_delta = model.objective(w) - ref.f_star
    closed = ((n - sampler.q) / n) * float(H.mean()) + (2.0 * L * sampler.q / n) * f_delta
    return enumerated, closed


def descent_bound_audit(
    model: LossModel,
    ref: ReferenceOptimum,
    w: np.ndarray,
    alpha: np.ndarray,
    gamma: float,
) -> tuple[float, float]:
    """One-step expected decrease of ||w - w*||^2 (enumerated over i) vs its
    guaranteed lower bound.  Holds for any memory table and any gamma > 0."""
    n = model.n
    w_star = ref.w_star
    grads = _grads_at(model, w)
    corrections = alpha - alpha.mean(axis=0)
    dist0 = float(np.sum((w - w_star) ** 2))
    lhs = 0.0
    for i in range(n):
        w_plus = w - gamma * (grads[i] - corrections[i])
        lhs += float(np.sum((w_plus - w_star) ** 2))
    lhs = dist0 - lhs / n
    grads_star = _grads_at(model, w_star)
    err = alpha - grads_star
    mean_err_sq = float(np.einsum("ij,ij->i", err, err).mean())
    f_delta = model.objective(w) - ref.f_star
    L = model.lipschitz
    rhs = (
        gamma * model.mu * dist0
        - 2.0 * gamma * gamma * mean_err_sq
        + (2.0 * gamma - 4.0 * gamma * gamma * L) * f_delta
    )
    return lhs, rhs


def centered_identity_audit(
    model: LossModel, ref: ReferenceOptimum, alpha: np.ndarray
) -> tuple[float, float]:
    """mean_i ||(alpha_i - mean alpha) - f'_i(w*)||^2 equals
    mean_i ||alpha_i - f'_i(w*)||^2 - ||mean alpha||^2 when f'(w*) = 0."""
    grads_star = _grads_at(model, ref.w_star)
    bar = alpha.mean(axis=0)
    centered = alpha - bar - grads_star
    lhs = float(np.einsum("ij,ij->i", centered, centered).mean())
    err = alpha - grads_star
    rhs = float(np.einsum("ij,ij->i", err, err).mean()) - float(bar @ bar)
    return lhs, rhs


class LyapunovAudit(NamedTuple):
    lhs: float
    rhs: float
    gamma_max: float

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs + 1e-12


def lyapunov_step_audit(
    model: LossModel,
    ref: ReferenceOptimum,
    w: np.ndarray,
    alpha: np.ndarray,
    H: np.ndarray,
    sampler: SamplerSpec,
    gamma: float,
    sigma: float,
    c: float,
) -> LyapunovAudit:
    """Exact expected one-step potential vs the contraction (1 - c*mu*gamma).

    The potential is ||w - w*||^2 + S*sigma*mean(H) with S = gamma*n/(L*q).
    Its expected next value splits into an i-expectation (iterate part) and a
    J-expectation (memory part), so the two marginals suffice regardless of
    how i and J are coupled.  Premise: H_i >= ||alpha_i - f'_i(w*)||^2 and
    gamma within the admissible bound for (c, sigma), which is enforced.
    """
    n = model.n
    L = model.lipschitz
    K = k_param(model.mu, L, sampler.q, n)
    gamma_max = admissible_step(c, sigma, K, L)
    if gamma > gamma_max * (1.0 + 1e-12):
        raise ValueError(
            f"gamma {gamma:.3e} exceeds the admissible bound {gamma_max:.3e} "
            f"for c={c}, sigma={sigma}"
        )
    S = gamma * n / (L * sampler.q)
    w_star = ref.w_star
    grads = _grads_at(model, w)
    corrections = alpha - alpha.mean(axis=0)
    e_dist = 0.0
    for i in range(n):
        w_plus = w - gamma * (grads[i] - corrections[i])
        e_dist += float(np.sum((w_plus - w_star) ** 2))
    e_dist /= n
    e_hbar, _ = memory_mean_recurrence_audit(model, ref, w, H, sampler)
    lhs = e_dist + S * sigma * e_hbar
    dist0 = float(np.sum((w - w_star) ** 2))
    rhs = (1.0 - c * model.mu * gamma) * (dist0 + S * sigma * float(H.mean()))
    return LyapunovAudit(lhs, rhs, gamma_max)
