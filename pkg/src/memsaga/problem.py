"""Ridge and logistic regression problems with an L2 regularizer.

The objective is the mean of per-datapoint terms

    f(w) = (1/n) sum_i f_i(w),    f_i(w) = loss(<x_i, w>, y_i) + (mu/2) ||w||^2,

with `loss` either the squared residual (ridge) or the logistic loss on
labels in {-1, +1}.  Both losses are generalized linear: the loss part of
every per-point gradient is a scalar multiple of the data row,

    f'_i(w) = xi'_i(w) * x_i + mu * w,

where xi'_i is the scalar loss derivative (ridge: <x_i,w> - y_i; logistic:
-y_i / (1 + exp(y_i <x_i,w>))).  That scalar is what the gradient-memory
engine stores in its compact mode, so every gradient routine here returns it
alongside the full vector.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DataError, NonConvergenceError

RIDGE = "ridge"
LOGISTIC = "logistic"
LOSS_KINDS = (RIDGE, LOGISTIC)


def _sigmoid(t: float) -> float:
    # scalar, overflow-safe; hot path for single-point gradients
    if t >= 0.0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


@dataclass(frozen=True)
class ProblemInstance:
    """Immutable dataset plus loss/regularization choice.

    features: (n, d) dense float64 rows, one datapoint per row.
    labels:   (n,) regression targets, or +-1 for logistic.
    mu:       strong-convexity / L2 strength, must be positive.
    """

    features: np.ndarray
    labels: np.ndarray
    loss_kind: str
    mu: float

    def __post_init__(self):
        X = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        y = np.ascontiguousarray(np.asarray(self.labels, dtype=np.float64))
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"features must be a nonempty 2-d matrix, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError(f"labels shape {y.shape} does not match n={X.shape[0]}")
        if not np.isfinite(X).all() or not np.isfinite(y).all():
            raise ValueError("features/labels contain NaN or Inf")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.loss_kind == LOGISTIC and not np.all(np.abs(y) == 1.0):
            bad = np.flatnonzero(np.abs(y) != 1.0)[0]
            raise ValueError(f"logistic labels must be +-1, found {y[bad]} at row {bad}")
        if not (self.mu > 0.0):
            raise ValueError(f"mu must be positive, got {self.mu}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def fingerprint(self) -> str:
        """Stable content hash, used to pair cached artifacts with their data."""
        h = hashlib.sha256()
        h.update(self.loss_kind.encode())
        h.update(repr(self.mu).encode())
        h.update(self.features.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


def lipschitz_constant(instance: ProblemInstance) -> float:
    """Uniform gradient-Lipschitz constant valid for every f_i.

    ridge: max_i ||x_i||^2 + mu;  logistic: max_i ||x_i||^2 / 4 + mu.
    """
    row_sq = np.einsum("ij,ij->i", instance.features, instance.features)
    peak = float(row_sq.max())
    if instance.loss_kind == LOGISTIC:
        peak *= 0.25
    return peak + instance.mu


class LossModel:
    """A problem instance together with its Lipschitz constant.

    All evaluation routines live here.  Scalar per-point methods are kept
    allocation-light because the optimizer calls them once per step; batch
    methods serve multi-slot memory refreshes and full-objective passes.
    """

    def __init__(self, instance: ProblemInstance, lipschitz: float | None = None):
        self.instance = instance
        self.lipschitz = float(lipschitz) if lipschitz is not None else lipschitz_constant(instance)
        if self.lipschitz < instance.mu:
            raise ValueError(f"lipschitz {self.lipschitz} < mu {instance.mu}")
        self._X = instance.features
        self._y = instance.labels
        self._mu = instance.mu
        self._ridge = instance.loss_kind == RIDGE

    @property
    def n(self) -> int:
        return self.instance.n

    @property
    def d(self) -> int:
        return self.instance.d

    @property
    def mu(self) -> float:
        return self._mu

    # -- scalar loss derivatives -------------------------------------------

    def xi_prime(self, i: int, w: np.ndarray) -> float:
        """Scalar s with f'_i(w) = s * x_i + mu * w."""
        z = float(self._X[i] @ w)
        if self._ridge:
            return z - self._y[i]
        y = self._y[i]
        return -y * _sigmoid(-y * z)

    def xi_prime_batch(self, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
        z = self._X[idx] @ w
        if self._ridge:
            return z - self._y[idx]
        y = self._y[idx]
        return -y * expit(-y * z)

    def xi_prime_all(self, w: np.ndarray) -> np.ndarray:
        z = self._X @ w
        if self._ridge:
            return z - self._y
        return -self._y * expit(-self._y * z)

    # -- gradients -----------------------------------------------------------

    def point_gradient(self, i: int, w: np.ndarray) -> tuple[np.ndarray, float]:
        """Return (f'_i(w), xi'_i(w))."""
        if not 0 <= i < self.n:
            raise IndexError(f"datapoint index {i} out of range [0, {self.n})")
        if w.shape != (self.d,):
            raise ValueError(f"weight shape {w.shape} does not match d={self.d}")
        s = self.xi_prime(i, w)
        return s * self._X[i] + self._mu * w, s

    def gradient_batch(self, idx: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Stacked f'_j(w) for j in idx, plus the scalar derivatives."""
        xis = self.xi_prime_batch(idx, w)
        return xis[:, None] * self._X[idx] + self._mu * w, xis

    def point_objective(self, i: int, w: np.ndarray) -> float:
        z = float(self._X[i] @ w)
        reg = 0.5 * self._mu * float(w @ w)
        if self._ridge:
            return 0.5 * (z - self._y[i]) ** 2 + reg
        return float(np.logaddexp(0.0, -self._y[i] * z)) + reg

    def point_objectives(self, w: np.ndarray) -> np.ndarray:
        """All f_i(w) as a vector."""
        z = self._X @ w
        reg = 0.5 * self._mu * float(w @ w)
        if self._ridge:
            return 0.5 * (z - self._y) ** 2 + reg
        return np.logaddexp(0.0, -self._y * z) + reg

    def objective(self, w: np.ndarray) -> float:
        z = self._X @ w
        reg = 0.5 * self._mu * float(w @ w)
        if self._ridge:
            r = z - self._y
            return 0.5 * float(r @ r) / self.n + reg
        return float(np.logaddexp(0.0, -self._y * z).mean()) + reg

    def objective_and_gradient(self, w: np.ndarray) -> tuple[float, np.ndarray]:
        """f(w) and f'(w) = mean_i f'_i(w)."""
        if w.shape != (self.d,):
            raise ValueError(f"weight shape {w.shape} does not match d={self.d}")
        z = self._X @ w
        reg = 0.5 * self._mu * float(w @ w)
        if self._ridge:
            r = z - self._y
            value = 0.5 * float(r @ r) / self.n + reg
            xis = r
        else:
            value = float(np.logaddexp(0.0, -self._y * z).mean()) + reg
            xis = -self._y * expit(-self._y * z)
        grad = (self._X.T @ xis) / self.n + self._mu * w
        return value, grad


@dataclass(frozen=True)
class ReferenceOptimum:
    """Solution of the problem to high accuracy, the anchor for suboptimality."""

    w_star: np.ndarray
    f_star: float
    grad_norm: float
    fingerprint: str


def reference_optimum(model: LossModel, tol: float | None = None) -> ReferenceOptimum:
    """Solve for w* = argmin f.

    Ridge solves the normal equations (X^T X / n + mu I) w = X^T y / n with
    one iterative-refinement pass.  Logistic runs damped Newton with Armijo
    backtracking until ||f'(w)|| <= tol.
    """
    inst = model.instance
    X, y, mu = inst.features, inst.labels, inst.mu
    if tol is None:
        tol = 1e-10 if inst.loss_kind == RIDGE else 1e-9
    if tol <= 0:
        raise ValueError("tol must be positive")

    if inst.loss_kind == RIDGE:
        A = X.T @ X / inst.n + mu * np.eye(inst.d)
        b = X.T @ y / inst.n
        w = np.linalg.solve(A, b)
        w = w + np.linalg.solve(A, b - A @ w)
        _, g = model.objective_and_gradient(w)
        gn = float(np.linalg.norm(g))
        if gn > tol:
            raise NonConvergenceError(gn, tol, iterations=2)
        return ReferenceOptimum(w, model.objective(w), gn, inst.fingerprint())

    max_iter = 500
    w = np.zeros(inst.d)
    f_val, g = model.objective_and_gradient(w)
    for it in range(max_iter):
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return ReferenceOptimum(w, f_val, gn, inst.fingerprint())
        z = X @ w
        s = expit(y * z)
        weights = s * (1.0 - s)
        H = (X.T * weights) @ X / inst.n + mu * np.eye(inst.d)
        direction = np.linalg.solve(H, g)
        slope = float(g @ direction)
        t = 1.0
        for _ in range(60):
            w_try = w - t * direction
            f_try, g_try = model.objective_and_gradient(w_try)
            if f_try <= f_val - 0.25 * t * slope:
                break
            t *= 0.5
        w, f_val, g = w_try, f_try, g_try
    gn = float(np.linalg.norm(g))
    raise NonConvergenceError(gn, tol, iterations=max_iter)


def synthesize_problem(
    n: int,
    d: int,
    loss_kind: str,
    mu: float,
    seed: int,
    noise: float = 0.0,
    *,
    clusters: int = 0,
    cluster_spread: float = 0.15,
    row_scale: float = 1.0,
) -> tuple[ProblemInstance, np.ndarray]:
    """Generate a random dense problem and return it with the planted weights.

    Rows are i.i.d. standard normal by default.  `clusters > 0` instead draws
    that many Gaussian centers and scatters points around them with relative
    spread `cluster_spread`, giving data with real neighborhood structure;
    `row_scale` rescales all rows.  Ridge targets are <x, w_plant> plus
    noise * N(0,1); logistic labels are the sign of the noisy logit.

    Deterministic given `seed`: one generator, draws in the fixed order
    rows (centers, assignments, offsets when clustered), planted weights,
    label noise.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    rng = np.random.default_rng(seed)
    if clusters > 0:
        centers = rng.standard_normal((clusters, d))
        assign = rng.integers(clusters, size=n)
        X = centers[assign] + cluster_spread * rng.standard_normal((n, d))
    else:
        X = rng.standard_normal((n, d))
    if row_scale != 1.0:
        X = X * row_scale
    w_plant = rng.standard_normal(d) / math.sqrt(d)
    logits = X @ w_plant + noise * rng.standard_normal(n)
    if loss_kind == RIDGE:
        y = logits
    else:
        y = np.where(logits >= 0.0, 1.0, -1.0)
    return ProblemInstance(X, y, loss_kind, mu), w_plant


def load_libsvm(
    path,
    loss_kind: str,
    mu: float,
    expected_dim: int | None = None,
    label_map: dict | None = None,
) -> ProblemInstance:
    """Parse a libsvm-format text file into a dense ProblemInstance.

    Format: one datapoint per line, `<label> <index>:<value> ...` with
    1-based indices; `#` starts a comment.  When `expected_dim` is given the
    feature dimension is fixed to it (indices beyond it are an error),
    otherwise it is the largest index seen.  `label_map` remaps parsed label
    values (e.g. {0.0: -1.0}) before validation.
    """
    labels: list[float] = []
    rows: list[list[tuple[int, float]]] = []
    max_index = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                label = float(tokens[0])
            except ValueError:
                raise DataError(f"{path}:{lineno}: unparseable label {tokens[0]!r}") from None
            if label_map is not None and label in label_map:
                label = float(label_map[label])
            entries = []
            for tok in tokens[1:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: malformed pair {tok!r}") from None
                if idx < 1:
                    raise DataError(f"{path}:{lineno}: index {idx} is not 1-based")
                if expected_dim is not None and idx > expected_dim:
                    raise DataError(
                        f"{path}:{lineno}: index {idx} exceeds expected_dim {expected_dim}"
                    )
                entries.append((idx, val))
                max_index = max(max_index, idx)
            labels.append(label)
            rows.append(entries)
    if not rows:
        raise DataError(f"{path}: no data lines")
    d = expected_dim if expected_dim is not None else max_index
    if d < 1:
        raise DataError(f"{path}: no feature indices present and no expected_dim given")
    X = np.zeros((len(rows), d))
    for r, entries in enumerate(rows):
        for idx, val in entries:
            X[r, idx - 1] = val
    try:
        return ProblemInstance(X, np.asarray(labels), loss_kind, mu)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
