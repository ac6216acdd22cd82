"""Variance-reduced SGD with per-datapoint gradient memory and neighbor sharing."""

from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    MemsagaError,
    NonConvergenceError,
)
from .problem import (
    LOGISTIC,
    RIDGE,
    LossModel,
    ProblemInstance,
    ReferenceOptimum,
    lipschitz_constant,
    load_libsvm,
    reference_optimum,
    synthesize_problem,
)
from .neighbors import (
    EpsBoundTable,
    NeighborGraph,
    build_knn_graph,
    load_graph,
    save_graph,
    verify_uniformity,
)
from .memengine import (
    EPS_N_SAGA,
    FULL_VECTORS,
    GLM_SCALARS,
    N_SAGA,
    Q_SAGA,
    SAGA,
    SGD,
    SVRG,
    MemoryState,
    OptState,
    SamplerSpec,
    StepCounters,
    apply_shared_update,
    enumerate_update_distribution,
    gradient_estimate,
    init_state,
    make_sampler,
    memory_mean_rebuild,
    run,
    sample_update_set,
    step,
)
from .theory import (
    ApproxRateParams,
    LyapunovState,
    RateParams,
    a_star,
    a_tilde,
    admissible_step,
    approx_bound,
    gamma_star,
    gamma_tilde,
    h_suboptimality,
    h_values,
    initial_lyapunov,
    k_param,
    rho_of_gamma,
    rho_star,
    universal_gamma,
    universal_ratio,
)
from .bench import (
    MetricsTrace,
    RunConfig,
    read_trace,
    run_experiment,
    suboptimality,
    write_trace,
)

__version__ = "0.1.0"
