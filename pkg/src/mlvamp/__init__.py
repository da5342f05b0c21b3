"""MAP inference in multi-layer stochastic feed-forward networks via
message passing, with a splitting-method verifier, a state-evolution
predictor, and a direct-optimization baseline."""

from .model import (GaussianPrior, LinearLayer, LinearLayerSVD,
                    ModelFormatError, Network, NonlinearLayer, SyntheticConfig,
                    Trajectory, build_conditioned_matrix, build_random_network,
                    decompose_linear, forward_sample, load_model, save_model,
                    transform_signals)
from .denoise import (DenoiseResult, PrecisionPair, clamp_alpha, linear_alpha,
                      linear_denoise, prox_identity_pair, prox_input,
                      prox_output_linear, prox_output_relu, prox_relu_pair)
from .driver import (BeliefState, DivergenceError, EffectiveChain, RunOptions,
                     RunResult, extrinsic, nmse_db, run, update_gamma)
from .admm import (AdmmState, DualState, KktReport, admm_step_reference,
                   check_fixed_point, init_admm_state, lagrangian, run_fixed,
                   run_fixed_traced)
from .se import (DisturbanceModel, SEState, disturbance_model,
                 empirical_converge_check, message_error_correlations,
                 predicted_nmse_db, run_se)
from .baseline import OptimizerOptions, OptimizeResult, gradient, minimize
from .baseline import objective as map_objective
from .harness import (AggregateRow, ExperimentConfig, RunRecord, aggregate,
                      load_experiment_config, main, read_csv, run_experiment,
                      write_csv)

__all__ = [
    "GaussianPrior", "LinearLayer", "LinearLayerSVD", "ModelFormatError",
    "Network", "NonlinearLayer", "SyntheticConfig", "Trajectory",
    "build_conditioned_matrix", "build_random_network", "decompose_linear",
    "forward_sample", "load_model", "save_model", "transform_signals",
    "DenoiseResult", "PrecisionPair", "clamp_alpha", "linear_alpha",
    "linear_denoise", "prox_identity_pair", "prox_input",
    "prox_output_linear", "prox_output_relu", "prox_relu_pair",
    "BeliefState", "DivergenceError", "EffectiveChain", "RunOptions",
    "RunResult", "extrinsic", "nmse_db", "run", "update_gamma",
    "AdmmState", "DualState", "KktReport", "admm_step_reference",
    "check_fixed_point", "init_admm_state", "lagrangian", "run_fixed",
    "run_fixed_traced",
    "DisturbanceModel", "SEState", "disturbance_model",
    "empirical_converge_check", "message_error_correlations",
    "predicted_nmse_db", "run_se",
    "OptimizerOptions", "OptimizeResult", "gradient", "minimize",
    "map_objective",
    "AggregateRow", "ExperimentConfig", "RunRecord", "aggregate",
    "load_experiment_config", "main", "read_csv", "run_experiment",
    "write_csv",
    "__version__",
]

__version__ = "0.1.0"
