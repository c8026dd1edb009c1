"""Exit prediction: features, network, population tables and the hybrid combiner."""

from .features import FeatureSpec, SegmentRecord, StateBatch, build_features
from .hybrid import ConstantPredictor, HybridExitPredictor, predict, reweight_prior
from .net import ExitNet, cross_entropy, gradient_check
from .os_tables import OSTables
from .train import ExitNetClassifier, TrainingError, train_exit_net

__all__ = [
    "FeatureSpec", "SegmentRecord", "StateBatch", "build_features", "ConstantPredictor",
    "HybridExitPredictor", "predict", "reweight_prior", "ExitNet", "cross_entropy", "gradient_check", "OSTables",
    "ExitNetClassifier", "TrainingError", "train_exit_net",
]
