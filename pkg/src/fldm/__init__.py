"""Training-free latent fusion of image- and video-role diffusion denoisers at toy scale."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
