"""Camera-LiDAR fusion in a shared BEV grid with a center-based 3D
detection head, plus the synthetic-scene harness around it."""

from .config import Config
from .geometry import Box3D
from .grids import BevGrid
from .model import FusionModel

__version__ = "0.1.0"

__all__ = ["BevGrid", "Box3D", "Config", "FusionModel", "__version__"]
