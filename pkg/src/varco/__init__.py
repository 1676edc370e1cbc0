"""Distributed GNN training with scheduled random-subset compression of halo exchanges."""

from .codec import KeyContext, compress, decompress
from .graph import Graph, Partition, build_gso, synth_sbm
from .model import ModelParams, init_params, model_backward, model_forward
from .runtime import Cluster, CommLedger, MetricsRecord, NumericError, varco_epoch
from .scheduler import SchedulerSpec, ratio_at, validate_monotone

__version__ = "0.1.0"
