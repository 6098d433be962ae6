"""patchtraj: follow-up patch trajectory prediction and classification
from a single baseline volume, with supervised (error-regression) and
unsupervised (multi-kernel manifold) atlas patch selection."""

from .volumes import (Volume, Landmark, Patch, sobel_edge_map, edge_density_map,
                      auto_threshold, select_landmarks, extract_patch,
                      read_volume, write_volume)
from .similarity import (DisparityPair, QuotientMap, KernelBank, abs_disparity,
                         directional_disparities, quotient_map, knn_bandwidth,
                         build_kernel_bank, sigma_grid)
from .sas import (PairErrorDataset, ErrorRegressorPair, AtlasRanking,
                  prediction_error, build_pair_error_dataset,
                  train_error_regressors, rank_atlases_sas)
from .mkml import (MkmlParams, SimilarityModel, mkml_objective, update_w,
                   update_L, update_S, optimize_similarity, rank_atlases_mkml)
from .trajectory import PredictionConfig, predict_followup, mae, pearson
from .classify import (LandmarkClassifier, VoteResult, train_linear_svm,
                       tune_C_nested_cv, platt_calibrate, weighted_vote,
                       classify_subject, default_C_grid)
from .synth import CohortSpec, Cohort, generate_cohort, write_cohort, load_cohort
from .config import PipelineConfig, RoiConfig, load_config, save_config
from .pipeline import run_loocv, run_fold, emit_report, EvaluationReport

__version__ = "0.1.0"
