from src.autodiff import ops
from src.autodiff.gradcheck import GradcheckReport, gradcheck
from src.autodiff.tensor import ComputationRecord, Tensor, is_grad_enabled, no_grad

__all__ = [
    "ComputationRecord",
    "GradcheckReport",
    "Tensor",
    "gradcheck",
    "is_grad_enabled",
    "no_grad",
    "ops",
]
