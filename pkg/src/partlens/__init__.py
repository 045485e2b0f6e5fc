"""partlens: distill a frozen CNN's features into per-part interpretable filters.

A small trainable "performer" CNN provides a tapped conv feature map and two
FC feature targets. The "explainer" learns, with no part annotations, an
interpretable track of location-masked filters plus an ordinary residual
track, blended by a learned gate and decoded back into the performer's FC
features. Evaluation quantifies interpretability (location instability
against exact synthetic landmarks, grad-CAM) and fidelity (decoder
substitution agreement).
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    CorruptDataError,
    DivergenceError,
    FreezeViolationError,
    PartlensError,
)

__all__ = [
    "__version__",
    "PartlensError",
    "ContractError",
    "ConfigError",
    "CorruptDataError",
    "CheckpointError",
    "DivergenceError",
    "FreezeViolationError",
]
