"""Inductive knowledge graph completion for out-of-knowledge-graph entities.

Rules and inter-rule correlations are mined from the observed graph, turned
into soft-labeled virtual neighbors, and fed to a graph encoder whose
embeddings extend to entities seen only through auxiliary triples.
"""

from .config import TrainConfig
from .evaluation import EvalReport, link_prediction_eval, triple_classification_eval
from .kg import SplitSpec, TripleStore, Vocab, load_store, make_ookg_split
from .model import ModelConfig, VNCModel
from .rules import RulePool, mine_rule_pool
from .trainer import train

__all__ = [
    "EvalReport",
    "ModelConfig",
    "RulePool",
    "SplitSpec",
    "TrainConfig",
    "TripleStore",
    "VNCModel",
    "Vocab",
    "link_prediction_eval",
    "load_store",
    "make_ookg_split",
    "mine_rule_pool",
    "train",
    "triple_classification_eval",
]

__version__ = "0.1.0"
