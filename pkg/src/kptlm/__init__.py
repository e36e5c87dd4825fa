"""Support-free keypoint localization with a small vision-language model that answers in digit tokens."""

from .data import Dataset, PoseSample, generate_synthetic, load_dataset, save_dataset
from .decoding import Contrastive, Greedy, Nucleus, Temperature, TopK, generate_answer, infer_keypoints
from .density import gaussian_baseline, kde, sample_keypoint
from .evaluation import evaluate
from .instructions import PromptStyle, Registry, builtin_registry
from .metrics import mpck, pck
from .model import ModelBundle, ModelConfig
from .tokenizer import Vocabulary, encode_coords, parse_coords
from .training import TrainConfig, build_epoch, pretrain_stage, train

__version__ = "0.1.0"

__all__ = [
    "Contrastive", "Dataset", "Greedy", "ModelBundle", "ModelConfig", "Nucleus", "PoseSample", "PromptStyle",
    "Registry", "Temperature", "TopK", "TrainConfig", "Vocabulary", "build_epoch", "builtin_registry",
    "encode_coords", "evaluate", "gaussian_baseline", "generate_answer", "generate_synthetic", "infer_keypoints",
    "kde", "load_dataset", "mpck", "parse_coords", "pck", "pretrain_stage", "sample_keypoint", "save_dataset",
    "train",
]
