"""Left-inverse-penalized generative training with exact optimal-transport evaluation."""

from .ad import ConfigurationError, ParamVector, Tape, UsageError
from .bounds import (
    BoundReport,
    covering_count_check,
    ga_function,
    ga_lower_bound_check,
    hard_lower_bound,
    inf_g0_proxy,
    lambda_threshold,
    soft_lower_bound,
    ub_decomposition,
    unit_ball_volume,
)
from .measures import (
    DiscreteMeasure,
    ResourceError,
    empirical_rate_study,
    exact_w1,
    grid_uniform,
    pushforward,
    sample_uniform,
    w1,
)
from .nets import (
    MlpNetwork,
    certify_lipschitz,
    make_critic,
    make_encoder,
    make_generator,
    project_to_lipschitz,
)
from .train import (
    ArchSpec,
    LipermConfig,
    TrainingDiverged,
    evaluate_generator,
    left_inverse_penalty,
    liperm_step,
    train,
)

__version__ = "0.1.0"
