"""Gradient-magnitude importance scores for training examples.

Train a classifier, score every training example by the norm of its own
loss gradient, subsample by those scores, retrain on the subsample, and
inspect the result through label-entropy, overlap, heatmap and bound
diagnostics.
"""

from gradscore.data import Dataset, SplitSpec, SynthSpec, load_idx, split, synth
from gradscore.importance import NormConfig, ScoreTable, gradient_norm, score_dataset
from gradscore.nn import Architecture, Model, init_model
from gradscore.sampling import SelectionPolicy, Subsample, select
from gradscore.training import TrainConfig, TrainLog, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "Dataset",
    "Model",
    "NormConfig",
    "ScoreTable",
    "SelectionPolicy",
    "SplitSpec",
    "Subsample",
    "SynthSpec",
    "TrainConfig",
    "TrainLog",
    "evaluate",
    "gradient_norm",
    "init_model",
    "load_idx",
    "score_dataset",
    "select",
    "split",
    "synth",
    "train",
]
