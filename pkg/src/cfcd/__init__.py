"""Coarse-to-fine retrieval training: adaptive-margin classification plus
matched local-descriptor triplets, on a numpy toy model."""

from .data import Dataset, SyntheticSpec, generate
from .evaluate import Benchmark, evaluate_benchmark, mean_average_precision
from .losses import MadaCosState, MarginParams, madacos_step, unified_margin_loss
from .matching import local_triplet_loss, match_pairs
from .model import ToyModel, backward, forward, init_model, load_checkpoint, save_checkpoint
from .sampler import TripletTuple, build_epoch_triplets
from .trainer import TrainConfig, TrainLog, train

__version__ = "0.1.0"
