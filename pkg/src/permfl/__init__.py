"""Personalized federated learning with estimated mixing weights.

The package trains one personalized model per client by minimizing a
weighted combination of the client losses. The per-client weights are
solved from pairwise gradient dissimilarities measured at a collaboratively
trained global model, and the personalized models are fit with a shuffled
client schedule so every model visits every shard each epoch.
"""

from .baselines import BaselineResult, run_localized_fedavg, run_werm
from .datagen import (Federation, SyntheticSpec, gen_cluster_rows,
                      gen_synthetic, load_csv, load_federation, partition_csv,
                      save_federation)
from .discrepancy import (AlphaSolverConfig, estimate_all_alphas, kappa_g,
                          local_sgd_global, mean_dissimilarity, mixing_objective,
                          pairwise_dissimilarity, solve_alpha_gd, solve_alpha_kkt,
                          theorem_gamma)
from .harness import (BENCHMARK_PRESET, ConfigError, RunConfig, build_config,
                      build_federation, compare, config_echo, emit_heatmap,
                      execute_run, parse_config_text, summarize)
from .numerics import (finite_diff_grad, project_ball, project_domain,
                       project_simplex)
from .objectives import LossModel, Shard, estimate_constants
from .shuffling import (ShufflingResult, epoch_permutation, grad_phi, phi,
                        reference_minimizer, reference_minimizers,
                        round_assignments, run_shuffling, theorem_eta,
                        weighted_ridge_minimizer)
from .single_loop import SingleLoopResult, run_single_loop, theorem_gamma_single_loop

__version__ = "0.1.0"

__all__ = [
    "AlphaSolverConfig", "BaselineResult", "ConfigError", "Federation",
    "LossModel", "BENCHMARK_PRESET", "RunConfig", "Shard", "ShufflingResult",
    "SingleLoopResult", "SyntheticSpec", "build_config", "build_federation",
    "compare", "config_echo", "emit_heatmap", "epoch_permutation",
    "estimate_all_alphas", "estimate_constants", "execute_run",
    "finite_diff_grad", "gen_cluster_rows", "gen_synthetic", "grad_phi",
    "kappa_g", "load_csv", "load_federation", "local_sgd_global",
    "mean_dissimilarity", "mixing_objective", "pairwise_dissimilarity",
    "parse_config_text", "partition_csv", "phi", "project_ball",
    "project_domain", "project_simplex", "reference_minimizer",
    "reference_minimizers", "round_assignments", "run_localized_fedavg",
    "run_shuffling", "run_single_loop", "run_werm", "save_federation",
    "solve_alpha_gd", "solve_alpha_kkt", "summarize", "theorem_eta",
    "theorem_gamma", "theorem_gamma_single_loop",
]
