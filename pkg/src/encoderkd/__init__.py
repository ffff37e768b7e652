"""Knowledge distillation for transformer encoders on a small numpy autodiff engine."""

from .errors import DistillError
from .model import EncoderModel, ModelConfig, forward_with_trace
from .objectives import ObjectiveSpec, Term
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "DistillError",
    "EncoderModel",
    "ModelConfig",
    "ObjectiveSpec",
    "Tensor",
    "Term",
    "forward_with_trace",
    "no_grad",
]
