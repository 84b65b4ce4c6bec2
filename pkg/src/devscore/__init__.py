"""Few-shot anomaly detection by deviation learning against a Gaussian score prior."""

__version__ = "0.1.0"

from .bags import Bag, Geometry
from .losses import MilConfig, deviation, deviation_loss, focal_loss, topk_score
from .metrics import auc_roc, evaluate, f1_sweep, score_to_probability
from .network import NetworkParams, init_params, score_bag_instances
from .prior import PriorConfig, ReferenceStats, reference_stats, sample_reference_scores
from .training import TrainConfig, TrainHistory, train

__all__ = [
    "Bag", "Geometry", "MilConfig", "NetworkParams", "PriorConfig",
    "ReferenceStats", "TrainConfig", "TrainHistory", "auc_roc", "deviation",
    "deviation_loss", "evaluate", "f1_sweep", "focal_loss", "init_params",
    "reference_stats", "sample_reference_scores", "score_bag_instances",
    "score_to_probability", "topk_score", "train", "__version__",
]
