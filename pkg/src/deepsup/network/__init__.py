"""The deeply supervised keypoint network, its supervision schemes and training."""

from .encoding import decode_visibility, encode_pose, encode_visibility, pose_bin
from .model import (
    CUSTOM,
    DSN,
    LADDER,
    MULTITASK,
    REVERSED,
    SINGLE,
    ArchConfig,
    Assignment,
    Network,
    SchemeError,
    SupervisionScheme,
    build_network,
    even_depths,
    forward,
    init_network,
    make_scheme,
    predict,
    total_loss,
)
from .training import History, PlateauDetector, TrainConfig, TrainingError, evaluate_loss, train
