"""T1 relaxometry, small 3D U-Net segmentation and MC-dropout channel saliency."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
