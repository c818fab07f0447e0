"""mambadiff: selective-scan state-space diffusion models for images, on CPU.

A from-scratch stack: a numpy-backed tensor engine with a reverse-mode
tape, the selective-scan recurrence with exact zero-order-hold
discretization, a scan-direction-cycling backbone over 2D patch tokens,
and a discrete VP diffusion pipeline with classifier-free and
training-free upsample guidance.
"""

from .estimator import MambaDiffusion
from .model import Denoiser, ModelConfig, preset
from .diffusion import NoiseSchedule
from .tensor import Tensor, precision, set_default_dtype

__version__ = "0.1.0"

__all__ = [
    "MambaDiffusion",
    "Denoiser",
    "ModelConfig",
    "NoiseSchedule",
    "Tensor",
    "preset",
    "precision",
    "set_default_dtype",
    "__version__",
]
