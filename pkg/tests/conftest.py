import pytest

from memsaga import LossModel, reference_optimum, synthesize_problem


def make_ridge(n=8, d=3, mu=0.3, seed=0, noise=0.2):
    inst, _ = synthesize_problem(n, d, "ridge", mu, seed=seed, noise=noise)
    return LossModel(inst)


def make_logistic(n=40, d=3, mu=0.1, seed=1, noise=0.3):
    inst, _ = synthesize_problem(n, d, "logistic", mu, seed=seed, noise=noise)
    return LossModel(inst)


def fill_memory(memory, model, rng, scale=1.0):
    """Populate a memory table with random values through the write API,
    keeping the incremental mean consistent."""
    n, d = model.n, model.d
    if memory.mode == "full_vectors":
        for j in range(n):
            memory.write_vector(j, scale * rng.standard_normal(d))
    else:
        for j in range(n):
            memory.write_scalar(j, scale * float(rng.standard_normal()))
    return memory


@pytest.fixture
def ridge_model():
    return make_ridge()


@pytest.fixture
def ridge_ref(ridge_model):
    return reference_optimum(ridge_model)


@pytest.fixture
def logistic_model():
    return make_logistic()
