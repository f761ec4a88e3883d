"""spatialcc: multilevel Bayesian contaminated case-control models.

Rare-event case-control regression with contaminated controls, BYM2
(ICAR + unstructured) small-area effects, large-area random effects, a
self-contained No-U-Turn sampler, rank-normalized convergence
diagnostics, posterior-predictive profile tables, and a simulation-study
harness comparing the model against fixed-effects and prior-correction
logits.
"""

__version__ = "0.1.0"

from .data import (CaseControlData, DesignMatrix, LoadResult, RawRecord,
                   SamplingCorrection, Schema, StandardizationInfo, assemble,
                   build_design, from_arrays, load_dataset,
                   sampling_correction, standardize,
                   unstandardize_coefficients)
from .graph import (AdjacencyGraph, connected_components, grid_graph,
                    load_edge_list, morans_i, morans_i_null_expectation,
                    morans_i_permutation, scaling_factor)
from .posterior import (ModelConfig, ModelParams, Posterior, constrain,
                        convolved_effect, icar_logpdf, log_likelihood_mixture,
                        log_posterior, make_layout, unconstrain)
from .sampler import (ChainDraws, SamplerConfig, UnconstrainedTarget,
                      leapfrog, run_chain, run_chains, stack_draws,
                      write_chain_csv)
from .diagnostics import (DiagnosticReport, ess, ess_quantile, folded_rhat,
                          quantile_ess_curve, rank_histogram, rank_normalize,
                          rhat_report, split_rhat, summarize)
from .predict import (Profile, ProfilePrediction, age_grid,
                      enumerate_profiles, predict_profile, profile_table,
                      relative_deprivation_scenarios, residual_by_area)
from .simulation import (Estimates, SimScenario, SimScore, SimTruth,
                         StudyConfig, calibrate_intercept, fit_m1, fit_m2,
                         fit_m3, fit_logistic_irls, generate_dataset,
                         run_study, sample_icar, score)

__all__ = [name for name in dir() if not name.startswith("_")]
