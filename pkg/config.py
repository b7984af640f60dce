import os

from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class Config:
    """Base configuration class."""

    DEFAULTS_VERSION = 'paper-defaults/1'
    PROFILE = 'base'

    LOG_LEVEL = os.environ.get('WEBERLINE_LOG_LEVEL', 'INFO')
    OUTPUT_DIR = os.environ.get('WEBERLINE_OUTPUT_DIR') or 'artifacts'
    SEED = int(os.environ.get('WEBERLINE_SEED', '0'))

    # ICP settings
    ICP_MAX_ITERATIONS = 50
    ICP_CONVERGENCE_EPSILON = 1e-8
    ICP_ALLOW_SCALE = False
    ICP_MAX_CORRESPONDENCE_DISTANCE = None

    # Preprocessing
    HU_WINDOW = (-1000.0, 1000.0)
    CROP_SIZE = (32, 32)

    # Phantom geometry
    PHANTOM_DIMS = (32, 32, 32)
    PHANTOM_SPACING = (1.75, 1.75, 1.0)

    # Dataset split sizes
    DATASET_LABELED = 90
    DATASET_UNLABELED = 60
    DATASET_TEST = 30

    # Semi-supervised training
    TRAIN_LEARNING_RATE = 1e-3
    TRAIN_MOMENTUM = 0.9
    TRAIN_BATCH_SIZE = 32
    TRAIN_EPOCHS = 500
    TRAIN_MMD_WEIGHT = 15.0
    TRAIN_CONFIDENCE_THRESHOLD = 0.5
    TRAIN_BUFFER_CAPACITY = 256
    TRAIN_LABELED_FRACTION = 0.2
    TRAIN_VALIDATION_FRACTION = 0.0
    TRAIN_WEIGHTING = 'logit'
    TRAIN_AUGMENT = True
    TRAIN_RWN_WIDTH = 64
    TRAIN_SE_REDUCTION = 4


class DeskConfig(Config):
    """Desk-scale configuration that runs on a laptop CPU."""

    PROFILE = 'desk'
    TRAIN_EPOCHS = 60
    TRAIN_LEARNING_RATE = 1e-2


class PaperConfig(Config):
    """Configuration pinned to the published experiment constants."""

    PROFILE = 'paper'
    CROP_SIZE = (512, 512)
    DATASET_LABELED = 285
    DATASET_UNLABELED = 282
    DATASET_TEST = 45
    TRAIN_VALIDATION_FRACTION = 0.1


class TestingConfig(Config):
    """Testing configuration."""

    PROFILE = 'testing'
    LOG_LEVEL = 'WARNING'
    CROP_SIZE = (16, 16)
    DATASET_LABELED = 12
    DATASET_UNLABELED = 6
    DATASET_TEST = 6
    TRAIN_EPOCHS = 2
    TRAIN_BATCH_SIZE = 8
    TRAIN_LEARNING_RATE = 1e-2
    TRAIN_BUFFER_CAPACITY = 16
    TRAIN_RWN_WIDTH = 8
    TRAIN_AUGMENT = False


config = {
    'desk': DeskConfig,
    'paper': PaperConfig,
    'testing': TestingConfig,
    'default': DeskConfig
}


def get_config(name=None):
    """Return the configuration class for a profile name."""
    name = name or os.environ.get('WEBERLINE_PROFILE', 'default')
    if name not in config:
        raise ValueError(f"Unknown configuration profile: {name}")
    return config[name]
