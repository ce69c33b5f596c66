"""Self-training with a noised student at desk scale.

A supervised teacher labels an unlabeled pool, the pool is filtered by
confidence and class-balanced, and a noised student of equal or larger size
trains on labeled and pseudo-labeled images together. The student can then
relabel the pool and the loop repeats. Evaluation covers accuracy,
corruption error, flip rate under perturbation sequences and FGSM/PGD attacks.
"""
from .config import NoiseConfig, PseudoConfig, RandAugmentPolicy, RunConfig, TrainConfig, load_config
from .data import DatasetStore, batch_iterator, load_idx, split, synth_generate
from .errors import ConfigError, DivergenceError, SelfTrainError
from .kernels import BACKEND
from .nn import Model, build_model, forward, load_checkpoint, save_checkpoint
from .pseudo import PseudoPool, balance, filter_confidence, generate_pseudo_labels
from .robust import eval_topk, fgsm, mce, mfr, pgd
from .train import iterate_noisy_student, lr_at, make_pseudo_pool, train_student, train_supervised

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "DatasetStore",
    "DivergenceError",
    "Model",
    "NoiseConfig",
    "PseudoConfig",
    "PseudoPool",
    "RandAugmentPolicy",
    "RunConfig",
    "SelfTrainError",
    "TrainConfig",
    "balance",
    "batch_iterator",
    "build_model",
    "eval_topk",
    "fgsm",
    "filter_confidence",
    "forward",
    "generate_pseudo_labels",
    "iterate_noisy_student",
    "load_checkpoint",
    "load_config",
    "load_idx",
    "lr_at",
    "make_pseudo_pool",
    "mce",
    "mfr",
    "pgd",
    "save_checkpoint",
    "split",
    "synth_generate",
    "train_student",
    "train_supervised",
]
