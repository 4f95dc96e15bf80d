"""Distillation objectives and the four training modes."""

from ..lora import LoraAdapter, LoraFeedForward, LoraLinear, lora_forward, lora_parameter_count
from .losses import js_loss, kd_loss, kl_loss, total_loss
from .training import (
    MODES,
    Adam,
    KdConfig,
    LossBreakdown,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    TrainingResult,
    linear_schedule,
    make_batches,
    run_training,
    train_step,
    write_metrics,
)
