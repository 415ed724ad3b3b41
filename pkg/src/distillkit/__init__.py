"""Dataset distillation with learnable soft labels, in pure NumPy.

A small reverse-mode autodiff engine with second-order support drives the
unrolled meta-gradient; around it sit the models, the distillation loops
for numeric and text data, soft-label kNN prototypes, reduced-set baselines,
metrics and file formats.
"""

from .data import DistilledDataset, LabeledData, load_dd, save_dd
from .distill import DistillConfig, DivergenceError, sldd, soft_to_hard, tdd
from .metrics import EvalReport, SizeCurve, distillation_ratio, distillation_size, evaluate
from .models import InitSource, ModelSpec

__version__ = "0.1.0"

__all__ = [
    "DistillConfig", "DistilledDataset", "DivergenceError", "EvalReport", "InitSource", "LabeledData",
    "ModelSpec", "SizeCurve", "distillation_ratio", "distillation_size", "evaluate", "load_dd", "save_dd",
    "sldd", "soft_to_hard", "tdd",
]
