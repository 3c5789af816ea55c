"""Self-supervised patch training: data, losses, optimizer and schedule."""

from .data import (
    CROP_FACTOR,
    PatchPair,
    Rect,
    Scene,
    gen_dataset,
    gen_synthetic_scene,
    load_dataset,
    sample_patch_pair,
    save_dataset,
)
from .losses import LossReport, LossWeights, loss_match
from .optim import Adam
from .train import (
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    TrainState,
    load_generator,
    pretrain_msca,
    train,
    train_iteration,
    train_step_cross,
    train_step_self,
)
