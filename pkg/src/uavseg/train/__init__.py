from .augment import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    Augmenter,
    adjust_brightness_contrast,
    build_augmenter,
    clahe,
    normalize,
)
from .config import TrainConfig
from .losses import UndefinedLossError, cross_entropy_loss, dice_loss, hybrid_loss
from .loop import EpochRecord, TrainResult, evaluate, train_loop
from .optim import (
    CONTINUE,
    STOP,
    EarlyStopState,
    NonFiniteGradientError,
    OptimizerState,
    adamw_step,
    early_stop_update,
    poly_lr,
)
