"""voxelseg: a self-contained 3D fully convolutional segmentation micro-framework.

Everything runs on a small numpy-backed tensor core with tape-based reverse-mode
autodiff; no deep-learning framework is involved. The package covers network
construction from declarative configs, masked above-threshold training
objectives with deep supervision, SGD training schedules, tiled whole-volume
inference, agreement statistics, and a deterministic synthetic phantom dataset.
"""

from .errors import (
    ConfigError,
    ContractViolationError,
    DegenerateVarianceError,
    DomainError,
    FormatError,
    GenerationError,
    NumericError,
    ShapeError,
    UndefinedIccError,
    VoxelSegError,
)
from .tensor import Tape, Tensor, backward, elementwise, finite_diff_check, reduce_sum

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "elementwise",
    "finite_diff_check",
    "reduce_sum",
    "VoxelSegError",
    "ContractViolationError",
    "ShapeError",
    "DomainError",
    "ConfigError",
    "FormatError",
    "NumericError",
    "GenerationError",
    "DegenerateVarianceError",
    "UndefinedIccError",
    "__version__",
]
