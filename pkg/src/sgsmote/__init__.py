"""Score graphs and the Stochastic GraphSMOTE cadence classifier."""

from .features import build_score_graph
from .graph import ScoreGraph, build_edges, load_graph, save_graph, to_graph
from .kern import parse_kern
from .score import Score, assign_labels, beat_of, parse_note_table, serialize_note_table
from .training import TrainConfig, evaluate, make_splits, predict, train

__all__ = [
    "Score", "ScoreGraph", "TrainConfig", "assign_labels", "beat_of", "build_edges",
    "build_score_graph", "evaluate", "load_graph", "make_splits", "parse_kern",
    "parse_note_table", "predict", "save_graph", "serialize_note_table", "to_graph", "train",
]
