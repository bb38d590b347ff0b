"""Client selection for federated averaging.

Stratified client sampling over clusters of compressed gradients, with
Neyman-style sample-size re-allocation and within-cluster importance
sampling, plus a lab for measuring the selection variance of each scheme.
"""

from .aggregation import aggregate, full_aggregate
from .clustering import Clustering, cluster_clients, cohesion
from .compression import CompressedGradient, CompressionSpec, compress
from .dataset import ClientShard, LabeledDataset, PartitionSpec, partition, synth_classification
from .engine import DataConfig, RoundMetrics, RunConfig, RunDiverged, rounds_to_target, run
from .models import ModelSpec, TrainConfig
from .selection import Scheme, SelectionPlan

__all__ = [
    "ClientShard", "Clustering", "CompressedGradient", "CompressionSpec", "DataConfig", "LabeledDataset",
    "ModelSpec", "PartitionSpec", "RoundMetrics", "RunConfig", "RunDiverged", "Scheme", "SelectionPlan",
    "TrainConfig", "aggregate", "cluster_clients", "cohesion", "compress", "full_aggregate", "partition",
    "rounds_to_target", "run", "synth_classification",
]
__version__ = "0.1.0"
