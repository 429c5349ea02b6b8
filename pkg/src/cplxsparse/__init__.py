"""Sparsification of complex-valued neural networks.

Paired-real complex tensors with a tape-based reverse-mode autograd,
variational layers with local-reparameterization sampling, sparsity
penalties with relevance-based pruning, and a three-stage training
pipeline (pre-train, sparsify, fine-tune) behind a small CLI.
"""

from .ctensor import CTensor, RTensor, ShapeError
from .dist import CGaussScalar, dawson, digamma, ei, ein
from .varlayers import (PenaltySpec, Relu, AvgPool2d, Flatten, Sequential,
                        VarConv2d, VarLinear)
from .pruning import (SparsityMask, compression_limit, compression_rate,
                      compute_masks, threshold_for_tolerance)
from .pipeline import (AdamState, StagePlan, adam_step, build_model,
                       clip_global_norm, objective_sparsify, prepare_input,
                       run_replications, run_stage)
from .data import Dataset, featurize, load_idx, save_idx, subset, \
    synthetic_gaussians

__version__ = "0.1.0"

__all__ = [
    "CTensor", "RTensor", "ShapeError",
    "CGaussScalar", "dawson", "digamma", "ei", "ein",
    "PenaltySpec", "Relu", "AvgPool2d", "Flatten", "Sequential",
    "VarConv2d", "VarLinear",
    "SparsityMask", "compression_limit", "compression_rate",
    "compute_masks", "threshold_for_tolerance",
    "AdamState", "StagePlan", "adam_step", "build_model",
    "clip_global_norm", "objective_sparsify", "prepare_input",
    "run_replications", "run_stage",
    "Dataset", "featurize", "load_idx", "save_idx", "subset",
    "synthetic_gaussians",
    "__version__",
]
