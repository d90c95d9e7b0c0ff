"""Layered run configuration: defaults, properties files, user overrides.

Resolution order is dataset defaults, then stage defaults, then model
defaults, then the user file; later layers override earlier ones key by key
(dicts merge recursively, scalars and lists are replaced whole).  The merged
mapping is validated into a :class:`RunConfig`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import yaml

from .errors import ConfigError, UnknownKeyError

TASKS = ("recommendation", "search")
STAGES = ("process", "pre-processing", "in-processing", "post-processing", "evaluate")

MODEL_REGISTRY: dict[tuple[str, str], tuple[str, ...]] = {
    ("recommendation", "process"): ("none",),
    ("recommendation", "in-processing"): ("bpr", "ips", "fairdual", "minmax_sgd", "focf", "reg"),
    ("recommendation", "post-processing"): ("topk", "min_regularizer", "cpfair", "fairrec", "pmmf", "welf"),
    ("recommendation", "evaluate"): ("topk",),
    ("search", "process"): ("none",),
    ("search", "post-processing"): ("xquad", "pm2"),
    ("search", "evaluate"): ("original",),
}

STAGE_DEFAULTS: dict[tuple[str, str], dict] = {
    ("recommendation", "process"): {"model": "none", "K": [10, 20]},
    ("recommendation", "in-processing"): {
        "model": "bpr",
        "K": [10, 20],
        "metrics": ["ndcg", "mrr", "hr", "mmf", "gini", "entropy"],
        "data_type": "pair",
        "fair_rank": True,
    },
    ("recommendation", "post-processing"): {
        "model": "topk",
        "K": [10, 20],
        "metrics": ["ndcg", "mrr", "hr", "mmf", "gini", "entropy", "r_ndcg", "u_loss", "min_max_ratio"],
        "mode": "exposure",
    },
    ("recommendation", "evaluate"): {
        "model": "topk",
        "K": [10, 20],
        "metrics": ["ndcg", "mrr", "hr", "mmf", "gini", "entropy"],
        "mode": "exposure",
    },
    ("search", "process"): {"model": "none", "K": [5, 10, 20]},
    ("search", "post-processing"): {
        "model": "xquad",
        "K": [5, 10, 20],
        "metrics": ["err_ia", "alpha_ndcg", "s_rec"],
        "alpha": 0.5,
        "pool_size": 50,
    },
    ("search", "evaluate"): {
        "model": "original",
        "K": [5, 10, 20],
        "metrics": ["err_ia", "alpha_ndcg", "s_rec"],
        "alpha": 0.5,
        "pool_size": 50,
    },
}

MODEL_DEFAULTS: dict[str, dict] = {
    "bpr": {"params": {"bpr": {"dim": 32, "epochs": 30, "lr": 0.05, "l2": 1e-4, "batch_size": 256}}},
    "ips": {"params": {"ips": {"dim": 32, "epochs": 30, "lr": 0.05, "l2": 1e-4, "batch_size": 256, "smooth": 1.0}}},
    "fairdual": {
        "params": {
            "fairdual": {
                "dim": 32,
                "epochs": 30,
                "lr": 0.05,
                "l2": 1e-4,
                "batch_size": 256,
                "dual_budget": 1.0,
                "dual_step": 0.1,
            }
        }
    },
    "minmax_sgd": {
        "params": {
            "minmax_sgd": {"dim": 32, "epochs": 30, "lr": 0.05, "l2": 1e-4, "batch_size": 256, "sampler_step": 1.0}
        }
    },
    "focf": {
        "params": {"focf": {"dim": 32, "epochs": 30, "lr": 0.05, "l2": 1e-4, "batch_size": 256, "reg_weight": 1.0}}
    },
    "reg": {
        "params": {"reg": {"dim": 32, "epochs": 30, "lr": 0.05, "l2": 1e-4, "batch_size": 256, "reg_weight": 1.0}}
    },
    "topk": {"params": {"topk": {}}},
    "min_regularizer": {"params": {"min_regularizer": {"lam": 1.0}}},
    "cpfair": {"params": {"cpfair": {"lam": 1.0, "swap_budget": 20}}},
    "fairrec": {"params": {"fairrec": {"phi": 0.5}}},
    "pmmf": {"params": {"pmmf": {"lam": 1.0, "eta": 0.1}}},
    "welf": {"params": {"welf": {"lam": 1.0, "alpha": 0.5, "iters": 50}}},
    "xquad": {"params": {"xquad": {"lam": 0.5}}},
    "pm2": {"params": {"pm2": {"lam": 0.5}}},
    "original": {"params": {"original": {}}},
    "none": {"params": {}},
}

KNOWN_KEYS = frozenset(
    {
        "task",
        "stage",
        "dataset",
        "model",
        "models",
        "K",
        "metrics",
        "params",
        "log_name",
        "seed",
        "data_type",
        "fair_rank",
        "mode",
        "alpha",
        "pool_size",
        "arrival",
        "target_shares",
        "strict",
        # dataset properties
        "type",
        "interactions",
        "item_groups",
        "user_groups",
        "columns",
        "min_interactions",
        "ratios",
        "run_file",
        "qrels",
        "scores",
    }
)

BASE_DEFAULTS = {"seed": 42, "log_name": "run", "arrival": "sorted"}


@dataclass
class RunConfig:
    """Validated run description consumed by the pipeline driver."""

    task: str
    stage: str
    dataset: str
    models: list[str]
    k_values: list[int]
    metrics: list[str]
    params: dict
    log_name: str
    seed: int
    raw: dict = field(default_factory=dict, compare=False)


def config_merge(*layers: Mapping, strict: bool = False, known: frozenset[str] = KNOWN_KEYS) -> dict:
    """Merge configuration layers; later layers win key by key.

    Nested dicts merge recursively; scalars and lists are replaced whole.
    The merge is associative as long as every key keeps one shape (mapping
    vs. scalar) across layers, which the flat-with-one-nesting config format
    guarantees.  Unknown top-level keys raise :class:`UnknownKeyError` in
    strict mode and warn otherwise.
    """

    def merge_into(base: dict, overlay: Mapping) -> dict:
        out = dict(base)
        for key, value in overlay.items():
            if isinstance(value, Mapping) and isinstance(out.get(key), dict):
                out[key] = merge_into(out[key], value)
            elif isinstance(value, Mapping):
                out[key] = merge_into({}, value)
            else:
                out[key] = value
        return out

    merged: dict = {}
    for layer in layers:
        if layer is None:
            continue
        for key in layer:
            if key not in known:
                if strict:
                    raise UnknownKeyError(f"unknown configuration key {key!r}")
                warnings.warn(f"unknown configuration key {key!r}", stacklevel=2)
        merged = merge_into(merged, layer)
    return merged


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return data


def validate_config(merged: Mapping, task: str, stage: str, dataset: str) -> RunConfig:
    """Check RunConfig invariants on a merged mapping."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    registry = MODEL_REGISTRY.get((task, stage))
    if registry is None and stage != "pre-processing":
        raise ConfigError(f"stage {stage!r} not available for task {task!r}")

    models_raw = merged.get("models", merged.get("model", "none"))
    models = [models_raw] if isinstance(models_raw, str) else list(models_raw)
    if registry is not None:
        for m in models:
            if m not in registry:
                raise ConfigError(f"model {m!r} not registered for ({task}, {stage})")

    k_values = merged.get("K", [10])
    if isinstance(k_values, int):
        k_values = [k_values]
    if not k_values or any((not isinstance(k, int)) or k < 1 for k in k_values):
        raise ConfigError("K entries must be positive integers")

    log_name = merged.get("log_name", "")
    if not log_name:
        raise ConfigError("log_name must be non-empty")

    if merged.get("data_type", "pair") != "pair":
        raise ConfigError("only pairwise sampling (data_type: pair) is supported")

    return RunConfig(
        task=task,
        stage=stage,
        dataset=dataset,
        models=models,
        k_values=list(k_values),
        metrics=list(merged.get("metrics", [])),
        params=dict(merged.get("params", {})),
        log_name=str(log_name),
        seed=int(merged.get("seed", 42)),
        raw=dict(merged),
    )


def resolve_config(
    task: str,
    stage: str,
    dataset: str,
    user_config: Mapping | None,
    data_root: Path,
    strict: bool = False,
) -> RunConfig:
    """Layer defaults, properties files, and the user config into a RunConfig."""
    dataset_props: dict = {}
    props_path = data_root / "properties" / "dataset" / f"{dataset}.yaml"
    if props_path.exists():
        dataset_props = load_config_file(props_path)

    stage_defaults = STAGE_DEFAULTS.get((task, stage), {})
    user_config = dict(user_config or {})
    models_raw = user_config.get("models", user_config.get("model", stage_defaults.get("model", "none")))
    models = [models_raw] if isinstance(models_raw, str) else list(models_raw)

    model_layers = []
    for m in models:
        defaults = MODEL_DEFAULTS.get(m, {"params": {m: {}}})
        model_layers.append(defaults)
        model_props = data_root / "properties" / "models" / f"{m}.yaml"
        if model_props.exists():
            model_layers.append({"params": {m: load_config_file(model_props)}})

    merged = config_merge(
        BASE_DEFAULTS,
        dataset_props,
        stage_defaults,
        *model_layers,
        user_config,
        strict=strict,
    )
    merged["models"] = models
    return validate_config(merged, task, stage, dataset)
