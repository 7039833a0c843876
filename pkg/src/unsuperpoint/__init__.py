"""Self-supervised interest point detection and descriptor learning."""
from .evaluation import EvalConfig, EvalReport, run_benchmark
from .geometry import Homography, HomographyParams, sample_homography, transform_points, warp_image
from .losses import LossWeights, total_loss
from .model import ModelConfig, PointSet, UnsuperPoint
from .siamese import PhotometricParams, make_branch_pair
from .training import TrainConfig, Trainer

__all__ = [
    "EvalConfig", "EvalReport", "run_benchmark",
    "Homography", "HomographyParams", "sample_homography", "transform_points", "warp_image",
    "LossWeights", "total_loss",
    "ModelConfig", "PointSet", "UnsuperPoint",
    "PhotometricParams", "make_branch_pair",
    "TrainConfig", "Trainer",
]
__version__ = "0.1.0"
