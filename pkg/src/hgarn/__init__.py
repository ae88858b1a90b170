"""Hierarchical graph attention recurrent network for next-location prediction."""
from .dataset import Dataset, MobilityRecord, Trajectory, load_dataset, prepare, save_dataset
from .hiergraph import HierarchicalGraph, build_graph, load_graph, save_graph
from .model import HGARN, ModelConfig, build_variant
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"
