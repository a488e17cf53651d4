"""Identity-disentangled feature learning for person re-identification."""

__version__ = "0.1.0"

from .config import RunConfig
from .dataset import load_dataset, sample_pk_batch
from .encoders import FeatureBundle, concat_bundle
from .errors import ConfigError, DataError, IdShuffleError, TrainingFault
from .evaluation import EvalResult, evaluate, extract_features
from .losses import LossWeights, total_loss
from .model import DisentangleModel, build_model
from .shuffle import ShuffleMask, part_shuffle, sample_mask
from .synth import SyntheticIdentitySpec, synth_generate
from .training import run_training

__all__ = [
    "ConfigError",
    "DataError",
    "DisentangleModel",
    "EvalResult",
    "FeatureBundle",
    "IdShuffleError",
    "LossWeights",
    "RunConfig",
    "ShuffleMask",
    "SyntheticIdentitySpec",
    "TrainingFault",
    "__version__",
    "build_model",
    "concat_bundle",
    "evaluate",
    "extract_features",
    "load_dataset",
    "part_shuffle",
    "run_training",
    "sample_mask",
    "sample_pk_batch",
    "synth_generate",
    "total_loss",
]
