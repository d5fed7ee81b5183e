"""Slip, crumple and shape detection for teleoperated robotic grasping."""

from .dataio import Dataset, GraspLabel, TelemetryFrame, load_dataset, write_dataset
from .engine import InferenceEngine
from .shapenet import ShapeNet, ShapeNetConfig
from .sim import SimConfig, generate_dataset
from .slipnet import SlipNet, SlipNetConfig

__version__ = "0.1.0"

__all__ = [
    "Dataset", "GraspLabel", "TelemetryFrame", "load_dataset", "write_dataset",
    "InferenceEngine", "ShapeNet", "ShapeNetConfig", "SimConfig", "generate_dataset",
    "SlipNet", "SlipNetConfig",
]
