"""Koopman neural operators on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .kno import CompactKNO, CompactKNOConfig  # noqa: E402
from .vit import ViTKNO, ViTKNOConfig  # noqa: E402

__all__ = ["CompactKNO", "CompactKNOConfig", "ViTKNO", "ViTKNOConfig", "__version__"]
