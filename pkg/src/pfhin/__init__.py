"""Pretrain/finetune pipeline for heterogeneous information networks."""

from .centrality import (CentralityScores, NodeRanking, compute_centrality,
                         rank_nodes)
from .encoder import ModelConfig, encode_examples, init_params, load_params, \
    save_params
from .errors import PfhinError, ConfigError, DataError, NumericError, ShapeError
from .finetune import (FinetuneConfig, classify_nodes, cluster_nodes,
                       finetune_link, similarity)
from .graph import Hin, LinkSplit, load_hin, save_hin, make_hin, neighbors, \
    split_links
from .metrics import ari, f1_scores, group_auc, nmi, roc_auc
from .pretrain import PretrainConfig, run_pretrain
from .synth import SyntheticHinSpec, generate_hin
from .walker import WalkConfig, group_mini_sequences, sample_sequence

__version__ = "0.1.0"

__all__ = [
    "PfhinError", "ConfigError", "DataError", "NumericError", "ShapeError",
    "Hin", "LinkSplit", "load_hin", "save_hin", "make_hin", "neighbors",
    "split_links",
    "CentralityScores", "NodeRanking", "compute_centrality", "rank_nodes",
    "WalkConfig", "sample_sequence", "group_mini_sequences",
    "ModelConfig", "init_params", "encode_examples", "save_params",
    "load_params",
    "PretrainConfig", "run_pretrain",
    "FinetuneConfig", "finetune_link", "similarity", "classify_nodes",
    "cluster_nodes",
    "roc_auc", "group_auc", "f1_scores", "nmi", "ari",
    "SyntheticHinSpec", "generate_hin",
    "__version__",
]
