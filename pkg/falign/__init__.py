from .data import Dataset, DataUnavailableError, IdxFormatError, load_idx, load_mnist, synthetic_xor
from .experiments import (
    ExperimentConfig,
    RunResult,
    TrainingDivergedError,
    alignment_forcing_experiment,
    angle_sweep,
    init_scale_sweep,
    matched_perturbation_comparison,
    swap_experiment,
    train,
)
from .instrumentation import MetricsRecord, UndefinedAlignmentError, alignment, gradient_alignment, weight_alignment
from .network import Architecture, Network, WeightMode, forward
from .numerics import NumericError, Rng, ShapeError
from .rules import (
    FeedbackSet,
    GradientSet,
    RuleTag,
    apply_update,
    backprop,
    build_rule,
    compute_update,
    fa_pseudogradient,
)
