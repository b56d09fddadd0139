from dlif.tensor import ops
from dlif.tensor.core import (
    MissingProvenanceError,
    NonFiniteError,
    NonScalarLossError,
    Parameters,
    PrimitiveKind,
    ShapeError,
    Tensor,
    TensorError,
    apply_primitive,
    backward,
)
from dlif.tensor.gradcheck import GradCheckReport, finite_diff_check

__all__ = [
    "GradCheckReport",
    "MissingProvenanceError",
    "NonFiniteError",
    "NonScalarLossError",
    "Parameters",
    "PrimitiveKind",
    "ShapeError",
    "Tensor",
    "TensorError",
    "apply_primitive",
    "backward",
    "finite_diff_check",
    "ops",
]
