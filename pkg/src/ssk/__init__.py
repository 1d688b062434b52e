"""ssk: two-stage voxel 3D object detection with multi-scale voting."""

from importlib.metadata import version

__version__ = version("ssk")
__author__ = "Abhishek Bhakat"
__description__ = "Two-stage voxel 3D object detection on desk-scale point clouds"

from ssk.core.config import PipelineConfig, load_config, tiny_config
from ssk.core.pipeline import Detector
from ssk.core.training import Trainer

__all__ = ["Detector", "Trainer", "PipelineConfig", "load_config", "tiny_config"]
