"""Front-view image to bird's-eye-view layout estimation with cross-view
attention and dual cycle consistency."""
from .geometry import Camera, SceneSpec, generate_scene, rasterize_bev, render_front_view
from .data import DatasetConfig, LayoutDataset, build_dataset, supervise
from .model import DCTNet, ModelConfig
from .losses import FocalConfig, ObjectiveWeights, dual_cycle_loss, focal_loss, objective
from .metrics import MetricsReport, average_precision, evaluate
from .training import TrainConfig, load_config, lr_at, train

__all__ = [
    "Camera", "SceneSpec", "generate_scene", "rasterize_bev", "render_front_view",
    "DatasetConfig", "LayoutDataset", "build_dataset", "supervise",
    "DCTNet", "ModelConfig",
    "FocalConfig", "ObjectiveWeights", "dual_cycle_loss", "focal_loss", "objective",
    "MetricsReport", "average_precision", "evaluate",
    "TrainConfig", "load_config", "lr_at", "train",
]
