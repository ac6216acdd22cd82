"""Stochastic gradient descent with per-datapoint gradient memory.

Every algorithm here performs the same corrected update

    w＋ = w - gamma * g_i(w),      g_i(w) = f'_i(w) - alpha_i + mean(alpha),

with i uniform, and differs only in which memory slots J get refreshed with
current-gradient information afterwards.  The update-set distributions all
give every slot the same refresh probability q/n per step:

    saga         J = {i}                                   (q = 1)
    q_saga       J = {i} plus q-1 other slots, uniform     (marginal uniform
                 over q-subsets; including i keeps the gradient budget at
                 exactly q per step)
    svrg         J = everything with probability q/n, else nothing
    n_saga       J = N_i, a fixed neighborhood with exact in-degree q
    eps_n_saga   J = N_i, but a neighbor's slot is overwritten with the
                 sampled point's scalar derivative whenever the precomputed
                 error bound allows it, saving the fresh gradient
    sgd          J = {} (plain SGD; corrections stay zero)

Two storage modes: `full_vectors` freezes whole gradient vectors f'_j(w) per
slot; `glm_scalars` stores only the scalar loss derivatives (slot j
reconstructs to s_j * x_j) and applies the exact regularizer term mu*w
analytically in each step.  For mu > 0 these are two slightly different
algorithms: the full mode carries the regularizer gradient of the write-time
iterate inside each slot, the scalar mode never stales it.

Counters: `datapoint_evals` is the number of update steps, `gradient_evals`
the number of fresh per-point gradient computations; the step's own gradient
is reused for its memory slot whenever i is in J.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .errors import DivergenceError
from .neighbors import EpsBoundTable, NeighborGraph, verify_uniformity
from .problem import LossModel

SAGA = "saga"
Q_SAGA = "q_saga"
SVRG = "svrg"
N_SAGA = "n_saga"
EPS_N_SAGA = "eps_n_saga"
SGD = "sgd"
SAMPLER_KINDS = (SAGA, Q_SAGA, SVRG, N_SAGA, EPS_N_SAGA, SGD)

FULL_VECTORS = "full_vectors"
GLM_SCALARS = "glm_scalars"
STORAGE_MODES = (FULL_VECTORS, GLM_SCALARS)


@dataclass
class SamplerSpec:
    """Validated description of which update-set distribution runs."""

    kind: str
    n: int
    q: int
    graph: NeighborGraph | None = None
    eps: float | None = None
    table: EpsBoundTable | None = None


def make_sampler(
    kind: str,
    n: int,
    q: int | None = None,
    graph: NeighborGraph | None = None,
    eps: float | None = None,
) -> SamplerSpec:
    """Build a sampler, enforcing the uniform-refresh preconditions."""
    if kind not in SAMPLER_KINDS:
        raise ValueError(f"unknown sampler kind {kind!r}")
    if kind == SGD:
        return SamplerSpec(SGD, n, 0)
    if kind == SAGA:
        q = 1 if q is None else q
        if q != 1:
            raise ValueError("saga has q = 1; use q_saga for q > 1")
        return SamplerSpec(SAGA, n, 1)
    if kind in (Q_SAGA, SVRG):
        if q is None:
            raise ValueError(f"{kind} requires q")
        if not 1 <= q <= n:
            raise ValueError(f"q must be in [1, {n}], got {q}")
        return SamplerSpec(kind, n, q)
    # neighborhood kinds
    if graph is None:
        raise ValueError(f"{kind} requires a neighbor graph")
    if graph.n != n:
        raise ValueError(f"graph has n={graph.n}, sampler n={n}")
    if q is not None and q != graph.q:
        raise ValueError(f"graph was built with q={graph.q}, sampler asked for q={q}")
    report = verify_uniformity(graph)
    if not report.ok:
        raise ValueError(f"graph violates exact in-degree: {report.summary()}")
    if kind == EPS_N_SAGA:
        if eps is None or eps < 0:
            raise ValueError("eps_n_saga requires eps >= 0")
        return SamplerSpec(EPS_N_SAGA, n, graph.q, graph, float(eps))
    return SamplerSpec(N_SAGA, n, graph.q, graph)


def sample_update_set(sampler: SamplerSpec, rng: np.random.Generator, i: int) -> np.ndarray:
    """Draw the refresh set J given the already-sampled step index i."""
    kind, n, q = sampler.kind, sampler.n, sampler.q
    if kind == SGD:
        return np.empty(0, dtype=np.int64)
    if kind == SAGA:
        return np.array([i], dtype=np.int64)
    if kind == Q_SAGA:
        if q == n:
            return np.arange(n, dtype=np.int64)
        others = rng.choice(n - 1, size=q - 1, replace=False)
        others = others + (others >= i)
        out = np.empty(q, dtype=np.int64)
        out[0] = i
        out[1:] = others
        out.sort()
        return out
    if kind == SVRG:
        if rng.random() < q / n:
            return np.arange(n, dtype=np.int64)
        return np.empty(0, dtype=np.int64)
    return sampler.graph.children[i]


def enumerate_update_distribution(sampler: SamplerSpec, max_n: int = 12):
    """Exhaustive support of P{J} with exact rational probabilities.

    Test-scale only (n <= max_n).  Returns a list of (frozenset, Fraction)
    pairs summing to 1.
    """
    n, q = sampler.n, sampler.q
    if n > max_n:
        raise ValueError(f"enumeration supported only for n <= {max_n}")
    kind = sampler.kind
    if kind == SGD:
        return [(frozenset(), Fraction(1))]
    if kind == SAGA:
        return [(frozenset({i}), Fraction(1, n)) for i in range(n)]
    if kind == Q_SAGA:
        subsets = list(itertools.combinations(range(n), q))
        p = Fraction(1, len(subsets))
        return [(frozenset(s), p) for s in subsets]
    if kind == SVRG:
        p_full = Fraction(q, n)
        return [(frozenset(), 1 - p_full), (frozenset(range(n)), p_full)]
    probs: dict[frozenset, Fraction] = {}
    for i in range(n):
        key = frozenset(int(j) for j in sampler.graph.children[i])
        probs[key] = probs.get(key, Fraction(0)) + Fraction(1, n)
    return sorted(probs.items(), key=lambda kv: sorted(kv[0]))


class MemoryState:
    """Gradient memory table with an incrementally maintained mean.

    The mean normalizes by `seen` (number of datapoints introduced so far)
    while a growing first pass is active, and by n afterwards.  All slots
    start at zero.
    """

    def __init__(self, model: LossModel, mode: str = FULL_VECTORS, growing: bool = False):
        if mode not in STORAGE_MODES:
            raise ValueError(f"unknown storage mode {mode!r}")
        n, d = model.n, model.d
        self.mode = mode
        self.n = n
        self._X = model.instance.features
        if mode == FULL_VECTORS:
            self.alpha = np.zeros((n, d))
            self.scal = None
        else:
            self.alpha = None
            self.scal = np.zeros(n)
        self._sum = np.zeros(d)
        self.ages = np.full(n, -1, dtype=np.int64)
        self.seen = 0 if growing else n

    @property
    def denominator(self) -> int:
        return max(self.seen, 1)

    def mean(self) -> np.ndarray:
        return self._sum / self.denominator

    def slot(self, i: int) -> np.ndarray:
        """Stored value of slot i, reconstructed to a gradient-shaped vector."""
        if self.mode == FULL_VECTORS:
            return self.alpha[i]
        return self.scal[i] * self._X[i]

    def write_vector(self, j: int, value: np.ndarray) -> None:
        self._sum += value - self.alpha[j]
        self.alpha[j] = value

    def write_vectors(self, js: np.ndarray, values: np.ndarray) -> None:
        if js.size == 0:
            return
        self._sum += values.sum(axis=0) - self.alpha[js].sum(axis=0)
        self.alpha[js] = values

    def write_scalar(self, j: int, s: float) -> None:
        self._sum += (s - self.scal[j]) * self._X[j]
        self.scal[j] = s

    def write_scalars(self, js: np.ndarray, svals: np.ndarray) -> None:
        if js.size == 0:
            return
        rows = self._X[js]
        self._sum += (svals - self.scal[js]) @ rows
        self.scal[js] = svals

    def rebuild_mean(self) -> np.ndarray:
        """Recompute the mean from the stored table; audit for drift."""
        if self.mode == FULL_VECTORS:
            total = self.alpha.sum(axis=0)
        else:
            total = self.scal @ self._X
        return total / self.denominator

    def mean_drift(self) -> float:
        rebuilt = self.rebuild_mean()
        return float(np.linalg.norm(self.mean() - rebuilt))


def memory_mean_rebuild(memory: MemoryState) -> np.ndarray:
    return memory.rebuild_mean()


@dataclass
class StepCounters:
    datapoint_evals: int = 0
    gradient_evals: int = 0


class OptState:
    """One optimizer run: iterate, memory, counters, and the RNG stream.

    The stream order is fixed for reproducibility: the growing-pass shuffle
    is drawn once at init; each step then draws the index first and any
    update-set randomness second.
    """

    def __init__(
        self,
        model: LossModel,
        seed: int,
        *,
        mode: str = FULL_VECTORS,
        growing: bool = True,
        w0: np.ndarray | None = None,
    ):
        n, d = model.n, model.d
        self.w = np.zeros(d) if w0 is None else np.array(w0, dtype=np.float64)
        if self.w.shape != (d,):
            raise ValueError(f"w0 shape {self.w.shape} does not match d={d}")
        self.rng = np.random.default_rng(seed)
        self.growing = growing
        self.order = self.rng.permutation(n) if growing else None
        self.available = np.zeros(n, dtype=bool) if growing else None
        self.memory = MemoryState(model, mode=mode, growing=growing)
        self.counters = StepCounters()
        self.t = 0


def init_state(model, seed, *, mode=FULL_VECTORS, growing=True, w0=None) -> OptState:
    return OptState(model, seed, mode=mode, growing=growing, w0=w0)


class StepInfo(NamedTuple):
    i: int
    updated: np.ndarray
    fresh: int


def gradient_estimate(
    model: LossModel, memory: MemoryState, i: int, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """Corrected update direction g_i(w), plus (f'_i(w), xi'_i(w)) for reuse."""
    grad_i, xi = model.point_gradient(i, w)
    g = grad_i - memory.slot(i) + memory.mean()
    return g, grad_i, xi


def apply_shared_update(
    memory: MemoryState,
    model: LossModel,
    sampler: SamplerSpec,
    i: int,
    w: np.ndarray,
    xi_i: float | None = None,
    neigh: np.ndarray | None = None,
) -> int:
    """Refresh the neighborhood of i, sharing xi'_i(w) where the bound allows.

    For each j in N_i: if eps_ij(w) <= eps the slot is overwritten with the
    shared value (scalar mode stores xi'_i(w) against x_j; vector mode stores
    xi'_i(w) * x_j + mu * w, the same loss direction with the exact current
    regularizer term), otherwise f'_j(w) is computed exactly.  The self edge
    has eps_ii(w) = 0, so slot i always receives the exact value at no extra
    cost.  Returns the number of fresh gradient computations.
    """
    if sampler.kind != EPS_N_SAGA:
        raise ValueError("apply_shared_update requires an eps_n_saga sampler")
    if sampler.table is None:
        sampler.table = EpsBoundTable(model.instance, sampler.graph)
    if neigh is None:
        neigh = sampler.graph.children[i]
        bounds = sampler.table.neighborhood_bounds(i, w)
    else:
        full = sampler.graph.children[i]
        mask = np.isin(full, neigh)
        bounds = sampler.table.neighborhood_bounds(i, w)[mask]
    if xi_i is None:
        xi_i = model.xi_prime(i, w)
    share = bounds <= sampler.eps
    share_idx = neigh[share]
    exact_idx = neigh[~share]
    mu = model.mu
    if memory.mode == GLM_SCALARS:
        if share_idx.size:
            memory.write_scalars(share_idx, np.full(share_idx.size, xi_i))
        if exact_idx.size:
            memory.write_scalars(exact_idx, model.xi_prime_batch(exact_idx, w))
    else:
        if share_idx.size:
            values = xi_i * model.instance.features[share_idx] + mu * w
            memory.write_vectors(share_idx, values)
        if exact_idx.size:
            grads, _ = model.gradient_batch(exact_idx, w)
            memory.write_vectors(exact_idx, grads)
    return int(exact_idx.size)


def step(state: OptState, model: LossModel, sampler: SamplerSpec, gamma: float) -> StepInfo:
    """One stochastic update; mutates `state` in place and reports what it did.

    Draws i, forms the corrected direction from the pre-update memory,
    refreshes the slots of J with values taken at the pre-step iterate, and
    only then moves w.  While a growing first pass is active the index pool
    and every update set are restricted to the introduced prefix.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    mem = state.memory
    n = mem.n
    rng = state.rng

    if state.growing:
        if mem.seen < n:
            mem.seen += 1
            state.available[state.order[mem.seen - 1]] = True
        i = int(state.order[rng.integers(mem.seen)])
    else:
        i = int(rng.integers(n))

    w = state.w
    g, grad_i, xi_i = gradient_estimate(model, mem, i, w)

    kind = sampler.kind
    filtering = state.growing and mem.seen < n
    if kind == SAGA:
        updated = np.array([i], dtype=np.int64)
        if mem.mode == GLM_SCALARS:
            mem.write_scalar(i, xi_i)
        else:
            mem.write_vector(i, grad_i)
        fresh = 1
    elif kind == SGD:
        updated = np.empty(0, dtype=np.int64)
        fresh = 1
    elif kind == SVRG:
        triggered = rng.random() < sampler.q / n
        if triggered:
            updated = np.arange(n, dtype=np.int64)
            if filtering:
                updated = updated[state.available[updated]]
            xis = model.xi_prime_batch(updated, w)
            if mem.mode == GLM_SCALARS:
                mem.write_scalars(updated, xis)
            else:
                mem.write_vectors(
                    updated, xis[:, None] * model.instance.features[updated] + model.mu * w
                )
            fresh = int(updated.size)
        else:
            updated = np.empty(0, dtype=np.int64)
            fresh = 1
    elif kind == EPS_N_SAGA:
        updated = sampler.graph.children[i]
        if filtering:
            updated = updated[state.available[updated]]
        fresh = 1 + apply_shared_update(mem, model, sampler, i, w, xi_i=xi_i, neigh=updated)
    else:  # q_saga, n_saga: exact refresh of a slot set containing i
        if kind == Q_SAGA:
            updated = sample_update_set(sampler, rng, i)
        else:
            updated = sampler.graph.children[i]
        if filtering:
            updated = updated[state.available[updated]]
        others = updated[updated != i]
        if mem.mode == GLM_SCALARS:
            mem.write_scalar(i, xi_i)
            if others.size:
                mem.write_scalars(others, model.xi_prime_batch(others, w))
        else:
            mem.write_vector(i, grad_i)
            if others.size:
                grads, _ = model.gradient_batch(others, w)
                mem.write_vectors(others, grads)
        fresh = 1 + int(others.size)

    w -= gamma * g
    if not np.all(np.isfinite(w)):
        raise DivergenceError(state.t)
    if updated.size:
        mem.ages[updated] = state.t
    state.counters.datapoint_evals += 1
    state.counters.gradient_evals += fresh
    state.t += 1
    return StepInfo(i, updated, fresh)


def run(
    state: OptState,
    model: LossModel,
    sampler: SamplerSpec,
    gamma,
    num_steps: int,
    callback=None,
    callback_every: int | None = None,
) -> OptState:
    """Run `num_steps` updates.  `gamma` may be a float or a callable of the
    1-based step count (for decaying schedules).  `callback(state)` fires
    every `callback_every` steps and once more at the end."""
    fixed = None if callable(gamma) else float(gamma)
    for k in range(num_steps):
        g = fixed if fixed is not None else float(gamma(state.t + 1))
        step(state, model, sampler, g)
        if callback is not None and callback_every and (k + 1) % callback_every == 0:
            callback(state)
    if callback is not None and (not callback_every or num_steps % callback_every != 0):
        callback(state)
    return state
