"""Identity unlearning for embedding-conditioned diffusion models, at desk scale.

Modules: ``idspace`` (identity embeddings, anchors), ``diffusion`` (denoiser,
sampling, synthetic world), ``unlearn`` (anchor-guided fine-tuning), ``baselines``
(SISS, UCE, WID), ``metrics`` and ``harness`` (config-driven pipeline).
"""

from .errors import (
    ConfigError,
    DegenerateGradient,
    DegenerateSchedule,
    InvalidArgument,
    NoAnchorFound,
    PiuError,
    SingularSystem,
    TrainingDiverged,
    Unrecognizable,
)

__version__ = "0.1.0"
