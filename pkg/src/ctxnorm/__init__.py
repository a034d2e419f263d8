"""Context-aware activation normalization (ACN) with BN and mixture-normalization baselines.

Everything runs on numpy in float64 with hand-written backward passes, so the
normalizers can be finite-difference checked and trained at desk scale.
"""
__version__ = "0.1.0"

from .errors import (ConfigError, CtxNormError, DegenerateComponentError, DomainError,  # noqa: E402
                     FormatError, InternalError, NumericalError, ShapeError)
from .gmm import GmmModel, em_fit, responsibilities  # noqa: E402
from .norm import (BatchNorm, ContextNorm, ContextNormBase, ContextParamTable,  # noqa: E402
                   MixtureNorm, acn_backward, acn_forward, acn_inference_aggregate, bn_backward,
                   bn_forward, general_transform, mn_backward, mn_forward)
from .net import AdamW, Network, build_preset, finite_diff_check  # noqa: E402
from .metrics import compute_metrics, track_gradient_variance  # noqa: E402

__all__ = [
    "AdamW", "BatchNorm", "ConfigError", "ContextNorm", "ContextNormBase", "ContextParamTable",
    "CtxNormError", "DegenerateComponentError", "DomainError", "FormatError", "GmmModel",
    "InternalError", "MixtureNorm", "Network", "NumericalError", "ShapeError", "acn_backward",
    "acn_forward", "acn_inference_aggregate", "bn_backward", "bn_forward", "build_preset",
    "compute_metrics", "em_fit", "finite_diff_check", "general_transform", "mn_backward",
    "mn_forward", "responsibilities", "track_gradient_variance",
]
