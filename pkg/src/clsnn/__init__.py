"""Spiking neural network training with confidence-weighted curriculum loss."""

from .curriculum import (CurriculumConfig, ConfidenceRecord, cal_loss,
                         confidence, confidence_lambda_zero, cross_entropy,
                         lambert_w, resolve_epsilon)
from .data import (Dataset, NoiseManifest, batches, inject_label_noise,
                   load_idx_dataset, parse_idx, synth_rate_dataset, write_idx)
from .network import (Architecture, SpikingModel, load_model,
                      parse_architecture, render_architecture, save_model,
                      vote_readout)
from .spiking import NeuronConfig, SpikeTrain
from .tensor import Tape, Tensor, backward
from .trainer import (Adam, EpochReport, NonFiniteLossError, SGD, evaluate,
                      macro_metrics, make_optimizer, train_epoch)

__version__ = "0.1.0"

__all__ = [
    "Adam", "Architecture", "ConfidenceRecord", "CurriculumConfig", "Dataset",
    "EpochReport", "NeuronConfig", "NoiseManifest", "NonFiniteLossError",
    "SGD", "SpikeTrain", "SpikingModel", "Tape", "Tensor", "backward",
    "batches", "cal_loss", "confidence", "confidence_lambda_zero",
    "cross_entropy", "evaluate", "inject_label_noise", "lambert_w",
    "load_idx_dataset", "load_model", "macro_metrics", "make_optimizer",
    "parse_architecture", "parse_idx", "render_architecture",
    "resolve_epsilon", "save_model", "synth_rate_dataset", "train_epoch",
    "vote_readout", "write_idx",
]
