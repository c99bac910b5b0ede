"""Class-imbalance-aware candidate classification for lung CT screening.

A from-scratch neural network engine, inversely imbalanced sampling with
rotation/scale augmentation, cascaded single-sided classifier stages, a
probability-vector fusion net trained with scan-level cross-validation,
and FROC evaluation with CPM scoring.
"""

from .nn import (Conv2D, Dense, Dropout, MaxPool2x2, Network, NumericError,
                 Relu, ShapeError, Softmax, TrainConfig, build_patch_cnn,
                 gradient_check, loss_cross_entropy, train, train_step)
from .data import (CandidateRecord, DataError, FoldAssignment, PatchStore,
                   SyntheticConfig, generate_synthetic, load_candidates,
                   load_patch_store, save_candidates, save_patch_store,
                   split_folds)
from .sampling import (AugmentationParams, InverseSamplerConfig, SamplingError,
                       TrainingSet, augment, balanced_sample,
                       inverse_imbalanced_sample)
from .cascade import (CandidateScore, CascadeError, CascadeModel,
                      CascadeTrace, CascadeTrainConfig, StageModel,
                      calibrate_threshold, infer_cascade, load_cascade,
                      nodule_probabilities, save_cascade, train_cascade)
from .fusion import (FusionError, FusionNetSpec, ProbabilityMatrix,
                     build_fusion_net, build_probability_vectors,
                     load_matrix_csv, save_matrix_csv, train_fusion_cv)
from .froc import (FrocCurve, FrocError, ScoredCandidate, compute_froc, cpm,
                   emit_report, load_scores_csv, save_scores_csv,
                   sensitivity_at)
from .pipeline import (ConfigError, PipelineConfig, PipelineError,
                       load_dataset, run_pipeline, run_train_cascade)

__version__ = "0.1.0"
