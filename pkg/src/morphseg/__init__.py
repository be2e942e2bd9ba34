"""Unsupervised 3D vessel segmentation with morphological active-contour losses."""

from .acwe import AcweParams, acwe_run, init_levelset
from .metrics import MetricsReport, evaluate
from .morphology import curvature_smooth, is_op, si, structuring_elements
from .network import NetworkConfig, build_network
from .train import InferenceConfig, TrainConfig, finetune, sliding_window_segment
from .volume import PhantomSpec, Volume3D, load_volume, make_phantom, normalize, save_volume

__version__ = "0.1.0"

__all__ = [
    "AcweParams",
    "InferenceConfig",
    "MetricsReport",
    "NetworkConfig",
    "PhantomSpec",
    "TrainConfig",
    "Volume3D",
    "acwe_run",
    "build_network",
    "curvature_smooth",
    "evaluate",
    "finetune",
    "init_levelset",
    "is_op",
    "load_volume",
    "make_phantom",
    "normalize",
    "save_volume",
    "si",
    "sliding_window_segment",
    "structuring_elements",
]
