"""Text-enhanced temporal knowledge graph embeddings."""
from .data import AlignedSample, DatasetSplit, Quadruple, load_dataset
from .estimator import ECOLAEstimator
from .evaluator import RankingReport, evaluate, evaluate_with_text, predict_with_text
from .ktp import MaskingStrategy, joint_loss
from .tkge import ModelKind, TKGEModel, tke_loss
from .trainer import Checkpoint, TrainConfig, train_joint, train_tke_only
from .vocab import Vocabulary

__version__ = "0.1.0"

__all__ = [
    "AlignedSample", "Checkpoint", "DatasetSplit", "ECOLAEstimator", "MaskingStrategy",
    "ModelKind", "Quadruple", "RankingReport", "TKGEModel", "TrainConfig", "Vocabulary",
    "evaluate", "evaluate_with_text", "joint_loss", "load_dataset", "predict_with_text",
    "tke_loss", "train_joint", "train_tke_only",
]
