"""Speech spectrogram depression screening with a compact residual CNN."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
