"""zipkit: Zipformer mechanisms at desk scale.

ScaledAdam with the Eden schedule, BiasNorm, SwooshR/SwooshL, balancer and
whitener gradient constraints, and the downsampled U-Net encoder with
attention-weight sharing, all on a small float64 reverse-mode tape, with
finite-difference certification and synthetic-task training as the
verification surface.
"""

from ._kernels import BACKEND_NAME as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
