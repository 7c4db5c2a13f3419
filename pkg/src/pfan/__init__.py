"""Position focused attention network for image-text matching."""
from .config import TrainConfig
from .geometry import BACKEND as GEOMETRY_BACKEND
from .model import PFAN

__all__ = ["PFAN", "TrainConfig", "GEOMETRY_BACKEND"]
__version__ = "0.1.0"
