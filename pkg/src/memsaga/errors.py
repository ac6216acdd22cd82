"""Exception types shared across the package."""


class MemsagaError(Exception):
    """Base class for package errors."""


class ConfigError(MemsagaError):
    """Bad configuration: unknown key, unparseable value, invalid combination."""


class DataError(MemsagaError):
    """Bad input data: malformed dataset file, label problems, stale graph cache."""


class DivergenceError(MemsagaError):
    """Iterate became NaN/Inf during optimization."""

    def __init__(self, step_index, message=None):
        self.step_index = step_index
        super().__init__(message or f"non-finite iterate at step {step_index}")


class NonConvergenceError(MemsagaError):
    """Reference solver failed to reach the requested gradient tolerance."""

    def __init__(self, grad_norm, tol, iterations):
        self.grad_norm = grad_norm
        self.tol = tol
        self.iterations = iterations
        super().__init__(
            f"solver stopped after {iterations} iterations with "
            f"gradient norm {grad_norm:.3e} > tol {tol:.3e}"
        )
