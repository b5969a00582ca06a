"""Context-object-aware grounding model: embedding, losses, inference, training."""

from .model import (
    DEFAULT_NEUTRAL_NAMES,
    ContrastiveSets,
    EncodedSample,
    GroundingModel,
    LinkContrast,
    ModelConfig,
    classification_logits,
    contrastive_loss_from_features,
    loss_cls,
    loss_con,
    loss_total,
    predict,
    select_context_objects,
    substitute_neutral_names,
)
from .train import TrainResult, TrainSchedule, build_vocab, make_batches, sequence_length, train

__all__ = [
    "ContrastiveSets", "DEFAULT_NEUTRAL_NAMES", "EncodedSample",
    "GroundingModel", "LinkContrast", "ModelConfig", "TrainResult",
    "TrainSchedule", "build_vocab", "classification_logits",
    "contrastive_loss_from_features", "loss_cls", "loss_con", "loss_total",
    "make_batches", "predict", "select_context_objects", "sequence_length",
    "substitute_neutral_names", "train",
]
