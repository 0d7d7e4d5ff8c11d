"""Circuit discovery and comparison on toy transformers with an exact-patching oracle."""

from __future__ import annotations

from .attribution import ScoreTable, score, score_eap, score_eap_ig, score_exact
from .circuits import (CircuitEvaluator, FaithfulnessReport, SearchParams, apply_circuit, faithfulness,
                       find_minimal_circuit, select_top_n)
from .compare import Dendrogram, SimilarityMatrix, cluster, cross_task_faithfulness, iou, recall, similarity_matrix
from .config import ModelConfig
from .graph import Circuit, ComputationalGraph, EdgeId, NodeId, build_graph, prune
from .model import ActivationCache, Model, ModelParams, build_model, forward_with_cache, metric_gradients
from .stats import baseline_report, dummy_circuit, hypergeom, intersect_and_profile
from .tasks import TaskExample, TaskSpec, eval_accuracy, eval_metric, generate_task, load_task
from .training import train

__version__ = "0.1.0"
