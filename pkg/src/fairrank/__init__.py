"""Fairness- and diversity-aware re-ranking engine and benchmark harness."""

from .core import (
    Catalog,
    DualState,
    GroupUtilityVector,
    Interaction,
    InteractionLog,
    RankingSlate,
    ScoreMatrix,
    group_utility,
    utility_evenness_gap,
)
from .fair_rerank import RerankContext, cpfair, fairrec, min_regularizer, pmmf, topk, welf
from .diverse_rerank import DiversifyContext, pm2, xquad
from .ingest import (
    IntentJudgments,
    RunList,
    SplitDataset,
    filter_and_split,
    parse_diversity_qrels,
    parse_interactions,
    parse_run_file,
    read_dataset,
    write_dataset,
)
from .trainer import MFModel, TrainConfig, TrainHooks, predict, train

__version__ = "0.1.0"

__all__ = [
    "Catalog",
    "DualState",
    "GroupUtilityVector",
    "Interaction",
    "InteractionLog",
    "IntentJudgments",
    "MFModel",
    "RankingSlate",
    "RerankContext",
    "DiversifyContext",
    "RunList",
    "ScoreMatrix",
    "SplitDataset",
    "TrainConfig",
    "TrainHooks",
    "cpfair",
    "fairrec",
    "filter_and_split",
    "group_utility",
    "min_regularizer",
    "parse_diversity_qrels",
    "parse_interactions",
    "parse_run_file",
    "pm2",
    "pmmf",
    "predict",
    "read_dataset",
    "topk",
    "train",
    "utility_evenness_gap",
    "welf",
    "write_dataset",
    "xquad",
]
