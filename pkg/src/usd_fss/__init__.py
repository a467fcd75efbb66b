"""Few-shot segmentation that decodes frozen promptable-segmenter features with
text-image guidance."""

from .config import LgmConfig, TextConfig, TrainConfig, VtpgConfig
from .encoders import EncoderConfig, EncoderError, FrozenBundle
from .episodes import (
    Dataset,
    DatasetError,
    Episode,
    FoldSplit,
    generate_synthetic_dataset,
    load_dataset,
    make_fold_split,
    sample_episode,
)
from .evaluation import MetricsReport, SweepResult, evaluate, fb_iou, iou, mean_iou, run_sweep
from .training import CheckpointError, TrainingError, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
