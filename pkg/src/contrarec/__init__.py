"""contrarec: a framework-free contrastive graph session recommender.

Sessions become small directed item-transition graphs, a gated graph
network propagates item states, attention pools them into a hybrid
session embedding, and next items are scored by scaled cosine
similarity. A contrastive objective with a memory bank pushes apart
sessions that end in the same item. Everything runs on a built-in
reverse-mode autodiff core over numpy float64 arrays.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor
from .data import Dataset, Session, Vocabulary, augment, generate_synthetic, preprocess
from .errors import (
    ContractError,
    ContrarecError,
    DataError,
    DivergenceError,
    EmptyDatasetError,
    ShapeError,
)
from .graph import SessionGraph, batch_graphs, build_graph
from .model import ModelConfig, ParameterStore, SessionGraphModel
from .optim import Adam
from .rng import SeededRng

__all__ = [
    "Adam",
    "ContractError",
    "ContrarecError",
    "DataError",
    "Dataset",
    "DivergenceError",
    "EmptyDatasetError",
    "ModelConfig",
    "ParameterStore",
    "SeededRng",
    "Session",
    "SessionGraph",
    "SessionGraphModel",
    "ShapeError",
    "Tape",
    "Tensor",
    "Vocabulary",
    "augment",
    "batch_graphs",
    "build_graph",
    "generate_synthetic",
    "preprocess",
]
