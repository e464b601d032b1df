"""Mixed-precision bit allocation for quantized networks, searched with CMA-ES
and alternated with quantization-aware retraining."""
from .bitalloc import (ConstraintSet, LogPrecisionVector, encode_log_precision, evaluate_candidate,
                       extract_bits, model_size_mb)
from .cmaes import cma_init, cma_optimize
from .network import FULL_PRECISION, QUANTIZED, Model, build_model
from .superbatch import SuperBatch, synthetic_gaussian
from .trainer import AlternationConfig, TrainConfig, alternate, pretrain

__all__ = ["ConstraintSet", "LogPrecisionVector", "encode_log_precision", "evaluate_candidate",
           "extract_bits", "model_size_mb", "cma_init", "cma_optimize", "FULL_PRECISION",
           "QUANTIZED", "Model", "build_model", "SuperBatch", "synthetic_gaussian",
           "AlternationConfig", "TrainConfig", "alternate", "pretrain"]
__version__ = "0.1.0"
