"""Softmax policy gradient training for sequence generation at desk scale.

Modules: ``rewards`` (ROUGE-based main reward and per-step increments),
``model`` (tabular and GRU policies), ``samplers`` (MLE/RAML/PG/SPG targets),
``estimators`` (stochastic loss gradients), ``oracle`` (brute-force checks),
``data`` (synthetic tasks and TSV corpora), ``trainer`` and ``cli``.
"""
from .data import Dataset, Example, TaskSpec, Vocab, generate_task, load_dataset, save_dataset
from .estimators import EstimatorConfig, estimate
from .model import GRUModel, GradientBuffer, TabularModel, load_checkpoint, save_checkpoint
from .rewards import EOS_ID, PAD_ID, UNK_ID, RewardConfig, increment_row, main_reward, rouge_l_f1
from .samplers import RamlConfig, greedy_decode, sample_spg_target
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Example", "TaskSpec", "Vocab", "generate_task", "load_dataset", "save_dataset",
    "EstimatorConfig", "estimate",
    "GRUModel", "GradientBuffer", "TabularModel", "load_checkpoint", "save_checkpoint",
    "EOS_ID", "PAD_ID", "UNK_ID", "RewardConfig", "increment_row", "main_reward", "rouge_l_f1",
    "RamlConfig", "greedy_decode", "sample_spg_target",
    "TrainConfig", "evaluate", "train",
]
