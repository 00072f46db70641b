"""Low-rank tensor-train solver for nonlinear filtering problems."""

from .baselines import dense_fd_filter, load_truth, particle_filter, save_truth, simulate_truth
from .errors import MaterializationError, NumericalInstability, RankCapExceeded, ShapeMismatchError, ZeroMassError
from .filter import (
    ObservationSeries,
    OfflineBundle,
    PosteriorEstimate,
    load_bundle,
    offline_build,
    propagator_power,
    run_filter,
    save_bundle,
)
from .model import BUILTIN_MODELS, Grid, ModelSpec, get_model
from .operators import assemble_generator, check_stability, sample_field, step_operator
from .tt import (
    RoundingPolicy,
    TtMatrix,
    TtTensor,
    dequantize,
    effective_rank,
    matrix_from_full,
    quantize,
    tt_add,
    tt_from_full,
    tt_hadamard,
    tt_matmul,
    tt_matvec,
    tt_round,
    tt_scale,
    tt_sum,
    tt_to_full,
)

__version__ = "0.1.0"
