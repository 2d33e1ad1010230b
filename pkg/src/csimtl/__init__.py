"""Encoder-shared multi-task CSI feedback for FDD massive MIMO at desk scale."""
from .channels import (
    PRESETS,
    ScenarioDataset,
    ScenarioProfile,
    generate_channel,
    generate_dataset,
    get_profile,
    load_dataset,
    save_dataset,
)
from .config import ExperimentConfig, dump_config, load_config, parse_config
from .errors import (
    ConfigError,
    DegenerateScaleError,
    FormatError,
    IntegrityError,
    PayloadLengthError,
    ProfileError,
    ZeroReferenceError,
)
from .estimators import CsiAutoencoder, SharedEncoderFeedback
from .experiment import ExperimentReport, load_report, run_experiment
from .models import (
    CompressionConfig,
    FeedbackModel,
    build_model,
    count_params,
    load_checkpoint,
    save_checkpoint,
    ue_storage,
)
from .training import TrainConfig, combine_datasets, evaluate, finetune, pretrain, train_single_task
from .transforms import from_angular_delay, nmse, normalize, to_angular_delay, truncate

__version__ = "0.1.0"
