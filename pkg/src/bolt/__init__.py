"""Spectral-basis adaptation: orthogonal bases from fine-tuned checkpoints,
closed-form diagonal coefficients, sigma-only training and label-free TTA."""

from .adapt import TrainReport, evaluate, sigma_gradient, train_sigma
from .coefficients import (
    AlphaSweepResult,
    ProjectionMatrix,
    SigmaVector,
    alpha_sweep,
    compose_model,
    extract_diagonal,
    pool_diagonals,
    project,
    reconstruct_update,
)
from .errors import (
    ArchitectureError,
    BadMagicError,
    BoltError,
    DegenerateBasisError,
    FormatError,
    ManifestMismatchError,
    NumericError,
    TruncatedPayloadError,
    ValidationError,
)
from .optim import OptimState, adamw_step, lr_schedule
from .spectral import (
    SpectralBasis,
    StackedDirections,
    ThinSvd,
    build_bases,
    orthogonalize,
    stack_directions,
    thin_svd,
)
from .taskgen import (
    LabeledData,
    TaskFamily,
    ToyModel,
    UnlabeledData,
    kshot_support,
    make_task_family,
    sample_batch,
)
from .tensor_store import (
    TaskVector,
    TensorContainer,
    TensorEntry,
    apply_task_arithmetic,
    compute_task_vector,
    load_container,
    save_container,
)
from .tta import TrustedSet, TtaConfig, mine_trusted, sharpen, tta_run, ufm_loss

__version__ = "0.1.0"

__all__ = [
    "adamw_step",
    "alpha_sweep",
    "AlphaSweepResult",
    "apply_task_arithmetic",
    "ArchitectureError",
    "BadMagicError",
    "BoltError",
    "build_bases",
    "compose_model",
    "compute_task_vector",
    "DegenerateBasisError",
    "evaluate",
    "extract_diagonal",
    "FormatError",
    "kshot_support",
    "LabeledData",
    "load_container",
    "lr_schedule",
    "make_task_family",
    "ManifestMismatchError",
    "mine_trusted",
    "NumericError",
    "OptimState",
    "orthogonalize",
    "pool_diagonals",
    "project",
    "ProjectionMatrix",
    "reconstruct_update",
    "sample_batch",
    "save_container",
    "sharpen",
    "sigma_gradient",
    "SigmaVector",
    "SpectralBasis",
    "stack_directions",
    "StackedDirections",
    "TaskFamily",
    "TaskVector",
    "TensorContainer",
    "TensorEntry",
    "thin_svd",
    "ThinSvd",
    "ToyModel",
    "train_sigma",
    "TrainReport",
    "TruncatedPayloadError",
    "TrustedSet",
    "tta_run",
    "TtaConfig",
    "ufm_loss",
    "UnlabeledData",
    "ValidationError",
]
