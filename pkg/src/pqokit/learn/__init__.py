"""Best-plan prediction with confidence-gated fallback."""

from .features import FeaturizerState, Vocabulary, build_vocabulary, fit_featurizer, vocabulary_scores
from .labels import LabelMatrix, build_labels, example_weight, label_near_optimal
from .model import ModelArtifact, PlanChoice, TrainConfig, train_model

__all__ = [
    "FeaturizerState",
    "LabelMatrix",
    "ModelArtifact",
    "PlanChoice",
    "TrainConfig",
    "Vocabulary",
    "build_labels",
    "build_vocabulary",
    "example_weight",
    "fit_featurizer",
    "label_near_optimal",
    "train_model",
    "vocabulary_scores",
]
