"""Learn ODE right-hand sides from irregular, partially observed data.

A neural network embedded in a fixed-step RK4 integrator template is
trained by unrolled backpropagation on trajectory data with arbitrary
sampling times and per-channel observations.  Known physics (conservation
skeletons, couplings) can be composed with the network so it only learns
kinetic or growth functions, while unknown experimental parameters and
missing initial conditions are fit simultaneously.
"""

from .autodiff import Tensor, backward, no_grad
from .data import (
    Batch,
    Observation,
    PathologySpec,
    TimeGrid,
    Trajectory,
    generate_corpus,
    load_corpus,
    make_batches,
    plan_time_grid,
    save_corpus,
)
from .errors import (
    ConfigError,
    CorpusFormatError,
    IntegrationError,
    NumericError,
    OdenetError,
    PeriodDetectionError,
    RolloutError,
)
from .metrics import (
    MetricsReport,
    NormTriple,
    TestPointSet,
    bifurcation_sweep,
    build_test_points,
    kinetic_error,
    norms,
    param_error,
    rhs_error,
    solution_error,
    true_cycle,
    zigzag_fraction,
)
from .model import ChannelScaling, LearnedRhs, integrate_gap, rk4_step
from .nn import Mlp, ParamStore, init_weights
from .systems import (
    BfParams,
    BfSystem,
    CycleResult,
    TruthSystem,
    UrpParams,
    UrpSystem,
    find_limit_cycle,
    jacobian_eigs,
    make_system,
    reference_integrate,
)
from .training import (
    OdeNetModel,
    RolloutConfig,
    TrainableIc,
    build_model,
    infer_trajectory,
    load_checkpoint,
    masked_mse,
    rollout,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
