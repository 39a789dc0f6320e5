"""UNeXt segmentation network on a small numpy autograd engine."""
from .arch import CANONICAL, Model, UNeXtConfig, build_model, forward, table2_variants
from .tensor import Tensor, backward, grad_check, no_grad, precision, tensor_from

__all__ = [
    "CANONICAL", "Model", "UNeXtConfig", "build_model", "forward", "table2_variants",
    "Tensor", "backward", "grad_check", "no_grad", "precision", "tensor_from",
]
