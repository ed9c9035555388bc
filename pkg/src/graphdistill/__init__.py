"""Few-shot node classification by distilling a pluggable teacher model into
a graph convolutional network, with graph-aware active learning to choose
which nodes are worth the teacher's answers."""

from .errors import GraphDistillError
from .gnn import GcnModel, TrainBundle, forward, normalized_adjacency, train
from .graph_store import TextGraph, SplitSpec, load_dataset, make_split
from .pipeline import RunConfig, RunReport, evaluate, run
from .selector import run_active_loop
from .synth import make_planted_partition

__all__ = [
    "GraphDistillError",
    "GcnModel",
    "TrainBundle",
    "TextGraph",
    "SplitSpec",
    "RunConfig",
    "RunReport",
    "forward",
    "normalized_adjacency",
    "train",
    "load_dataset",
    "make_split",
    "evaluate",
    "run",
    "run_active_loop",
    "make_planted_partition",
]

__version__ = "0.1.0"
