"""Two-stage 3D object detector for LiDAR point clouds with a voxel-to-point decoder
and IoU-guided box refinement, written on numpy with a small reverse-mode autodiff."""
from .config import Config, bundled, load, loads
from .model import Detections, Detector

__all__ = ["Config", "Detections", "Detector", "bundled", "load", "loads"]
__version__ = "0.1.0"
