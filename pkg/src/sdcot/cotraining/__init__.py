"""Static-dynamic co-teaching: pseudo labels, the three losses, EMA teacher, training modes."""
from .losses import (
    DEFAULT_VARIANT,
    DistillVariant,
    LossWeights,
    consistency_loss,
    distillation_loss,
    supervised_loss,
)
from .pseudo import MixedLabels, PseudoLabelConfig, generate_pseudo_labels, mix_labels
from .schedule import EmaConfig, ema_update, ramp_up_weight
from .trainer import (
    INCREMENTAL_MODES,
    MODE_FLAGS,
    MODES,
    CoTeacher,
    IncrementalResult,
    Item,
    TrainConfig,
    items_for,
    sequential_round,
    train_base,
    train_incremental,
    train_step,
)

__all__ = [
    "DEFAULT_VARIANT", "DistillVariant", "LossWeights", "consistency_loss", "distillation_loss",
    "supervised_loss", "MixedLabels", "PseudoLabelConfig", "generate_pseudo_labels", "mix_labels",
    "EmaConfig", "ema_update", "ramp_up_weight", "INCREMENTAL_MODES", "MODE_FLAGS", "MODES",
    "CoTeacher", "IncrementalResult", "Item", "TrainConfig", "items_for", "sequential_round",
    "train_base", "train_incremental", "train_step",
]
