"""CT classification guided by synthesized pathology features.

A radiological CNN encoder is fused with pathology-like features that a
conditional GAN generates from the CT volume alone, so no pathology is needed
at inference.  Everything runs on a small float64 autodiff engine and a
procedural paired-modality dataset; see the ``sghfnet`` command for the
experiment workflow.
"""

__version__ = "0.1.0"

from .config import RunConfig, preset
from .eval_harness import MetricsReport, run_experiment
from .sghf import FreezeViolation, build_model, predict, predict_proba, train_sghf
from .synth_data import DataConfig, Subject, generate_dataset
from .tensor_engine import Tensor, no_grad

__all__ = [
    "DataConfig", "FreezeViolation", "MetricsReport", "RunConfig", "Subject", "Tensor", "build_model",
    "generate_dataset", "no_grad", "predict", "predict_proba", "preset", "run_experiment", "train_sghf",
]
