"""In-context tabular learner with an inspectable kernel-regression head."""

from .autodiff import (Tape, Tensor, backward, finite_difference_grad, matmul_raw,
                       max_relative_error)
from .backbone import (ASYMMETRIC, SYMMETRIC, EmbeddingBundle, ModelConfig, ModelParameters,
                       embed_columns, embed_dataset, embed_icl_asymmetric, embed_icl_symmetric,
                       embed_rows, encode_labels, init_parameters, load_checkpoint, project,
                       save_checkpoint, standardize)
from .calibration import CalibrationGrid, CalibrationResult, calibrate, default_grid
from .errors import ContractViolation, DataFormatError
from .evaluation import (MethodResult, MethodSpec, OverheadRow, SweepPoint, compactness,
                         evaluate, load_csv, mean_rank, overhead_benchmark, split,
                         tradeoff_sweep, write_dataset_csv)
from .flops import embedding_flops, flop_ratio
from .kernels import (DOT, GAUSSIAN, KNN, KernelSpec, PredictionReport, WeightMatrix,
                      build_report, default_scale, kernel_dot, kernel_gaussian, kernel_knn,
                      kernel_weights, perplexity, predict, relative_perplexity)
from .optim import AdamState, adam_step
from .priorgen import Dataset, PriorConfig, generate_toy, sample_prior_batch
from .training import TrainConfig, TrainLog, embeddings_for_kernel, train

__version__ = "0.1.0"
