"""traitfusion: text-centric multimodal fusion for HEXACO trait regression.

A small numpy-backed library implementing the fusion network (chunk-wise
projectors, cross-modal attention connectors, gated text-feature enhancer,
ensemble regression head) together with its training pipeline, ablation
harness, dataset tooling, and psychology-informed prompt builder.
"""

__version__ = "0.1.0"

from .tensor import ParamTensor, RngState, ShapeError, Tensor, no_grad
from .gradcheck import GradCheckReport, NondeterministicFunction, grad_check

__all__ = [
    "__version__",
    "Tensor", "ParamTensor", "RngState", "ShapeError", "no_grad",
    "GradCheckReport", "NondeterministicFunction", "grad_check",
]
