"""Variable-length many-images-to-one-diagnosis classifier (CNN encoder + LSTM)."""

from .data import AugmentParams, DatasetSplit, PatientRecord
from .metrics import ClassWeights, MetricCounts
from .model import Model, ModelConfig, SequencePrediction, forward_sequence, init_model
from .tensor import Tensor, backward
from .trainer import TrainConfig, TrainHistory, evaluate, train

__version__ = "0.1.0"
