"""Waveform-domain music source separation with a non-causal Wavenet."""

from .bss_eval import Decomposition, EvalReport, Metrics, decompose, evaluate_dataset, sdr_sir_sar
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import TrackStems, load_stem_directory, read_wav, write_wav
from .model import (Model, ModelConfig, SourceEstimates, complete_sources, parameter_count,
                    receptive_field, separate_track)
from .training import LossConfig, SamplerConfig, TrainConfig, loss_mae, loss_total, train, voiced_regions

__version__ = "0.1.0"
