"""Run configuration: one declarative JSON file with sections, flag-overridable.

``default_run_config`` carries desk-scale settings sized for quick synthetic
experiments. ``reference_model_config`` and ``reference_grids`` hold the
full-scale field caps and the canonical hyperparameter search sets, which any
config file can state verbatim.
"""

from __future__ import annotations

import json
from pathlib import Path

from .corpus import SyntheticConfig
from .errors import ConfigError
from .model import FieldConfig, ModelConfig, QueryTowerConfig
from .training import LossConfig, TrainSchedule

CONFIG_SECTIONS = ("seed", "synthetic", "model", "loss", "train", "split", "eval", "grids")


def reference_grids() -> dict:
    """The canonical hyperparameter search sets, stated verbatim.

    Convolution strides are relative to the window size; use
    ``stride_options`` to resolve them for a concrete window.
    """
    return {
        "learning_rate": [1e-3, 5e-4, 1e-4, 5e-5, 1e-5],
        "layer_sizes": [100, 300, 500],
        "conv_windows_long_text": [1, 3, 10, 20, 50],
        "conv_windows_short_text": [1, 3, 5, 10],
        "conv_strides": ["1", "ws/4", "ws/2", "ws"],
        "keep_probs": [0.5, 0.8, 1.0],
    }


def stride_options(window: int) -> list[int]:
    """Resolve the stride grid {1, floor(ws/4), floor(ws/2), ws} for a window."""
    if window < 1:
        raise ConfigError("window must be >= 1")
    return [1, max(1, window // 4), max(1, window // 2), window]


def expand_grid(grid: dict[str, list]) -> list[dict]:
    """Explicit cartesian product of a named grid."""
    combos: list[dict] = [{}]
    for key in sorted(grid):
        values = grid[key]
        if not isinstance(values, (list, tuple)) or not values:
            raise ConfigError(f"grid entry {key!r} must be a nonempty list")
        combos = [dict(c, **{key: v}) for c in combos for v in values]
    return combos


def reference_model_config() -> ModelConfig:
    """Full-scale wiring: canonical field caps, 300-wide layers, 5 instances."""
    def fc(name, max_instances, max_tokens, w1, s1, w2, s2, keep, splitter="text"):
        return FieldConfig(name=name, max_instances=max_instances, max_tokens=max_tokens,
                           conv1_window=w1, conv1_stride=s1, conv2_window=w2,
                           conv2_stride=s2, conv_channels=300, pooling="max",
                           output_dim=300, keep_prob=keep, splitter=splitter)

    return ModelConfig(
        fields=(
            fc("title", 1, 20, 3, 1, 3, 1, 1.0),
            fc("url", 1, 10, 3, 1, 3, 1, 1.0, splitter="url"),
            fc("body", 1, 1000, 10, 5, 3, 1, 0.8),
            fc("anchors", 5, 10, 3, 1, 3, 1, 0.8),
            fc("clicked_queries", 5, 10, 3, 1, 3, 1, 0.5),
        ),
        query=QueryTowerConfig(max_tokens=10, conv1_window=3, conv1_stride=1,
                               conv2_window=3, conv2_stride=1, conv_channels=300,
                               pooling="max"),
        embed_dim=300,
        matching_hidden_dim=300,
        dropout_keep_prob=0.8,
    )


def desk_model_config() -> ModelConfig:
    """Small wiring sized so synthetic experiments run in minutes on a CPU."""
    def fc(name, max_instances, max_tokens, w1, s1, w2, s2, keep, splitter="text"):
        return FieldConfig(name=name, max_instances=max_instances, max_tokens=max_tokens,
                           conv1_window=w1, conv1_stride=s1, conv2_window=w2,
                           conv2_stride=s2, conv_channels=24, pooling="max",
                           output_dim=10, keep_prob=keep, splitter=splitter)

    return ModelConfig(
        fields=(
            fc("title", 1, 10, 3, 1, 2, 1, 1.0),
            fc("url", 1, 8, 2, 1, 2, 1, 1.0, splitter="url"),
            fc("body", 1, 48, 5, 2, 3, 1, 1.0),
            fc("anchors", 2, 8, 2, 1, 2, 1, 0.9),
            fc("clicked_queries", 2, 8, 2, 1, 2, 1, 0.8),
        ),
        query=QueryTowerConfig(max_tokens=8, conv1_window=3, conv1_stride=1,
                               conv2_window=2, conv2_stride=1, conv_channels=24,
                               pooling="max"),
        embed_dim=24,
        matching_hidden_dim=48,
        dropout_keep_prob=1.0,
    )


def default_run_config() -> dict:
    return {
        "seed": None,
        "synthetic": {
            "n_queries": 2000,
            "docs_per_query": 10,
            "vocab_size": 900,
            "topic_count": 40,
            "words_per_topic": 16,
            "anchor_coverage": 0.61,
            "clicked_query_coverage": 0.73,
            "noise_rate": 0.15,
            "grade_bin_edges": [0.2, 0.4, 0.6, 0.8],
        },
        "model": desk_model_config().to_dict(),
        "loss": {"gain_base": 2.0, "batch_size": 64},
        "train": {
            "learning_rate": 3e-3,
            "epochs": 1,
            "triples_per_query": 30,
            "patience": 2,
            "checkpoint_every": 50,
            "max_steps": 0,
            "adam_beta1": 0.9,
            "adam_beta2": 0.999,
            "adam_epsilon": 1e-8,
        },
        "split": {"ratios": [0.8, 0.1, 0.1]},
        "eval": {
            "shuffles": 10,
            "bm25": {"k1": 1.2, "b": 0.75},
            "bm25f": {
                "field_weights": {"title": 2.0, "url": 1.0, "body": 0.5,
                                  "anchors": 1.5, "clicked_queries": 2.5},
                "length_norms": {"title": 0.5, "url": 0.5, "body": 0.75,
                                 "anchors": 0.5, "clicked_queries": 0.5},
                "k1": 1.2,
            },
        },
        "grids": reference_grids(),
    }


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: str | Path | None) -> dict:
    """Defaults merged with the given JSON file; unknown sections are errors."""
    cfg = default_run_config()
    if path is None:
        return cfg
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path}: expected a JSON object")
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return _deep_merge(cfg, raw)


def synthetic_config_from(cfg: dict, seed: int) -> SyntheticConfig:
    section = dict(cfg.get("synthetic", {}))
    section["grade_bin_edges"] = tuple(section.get("grade_bin_edges", (0.2, 0.4, 0.6, 0.8)))
    try:
        out = SyntheticConfig(seed=seed, **section)
    except TypeError as exc:
        raise ConfigError(f"bad synthetic config: {exc}") from None
    out.validate()
    return out


def model_config_from(cfg: dict) -> ModelConfig:
    if "model" not in cfg:
        raise ConfigError("config missing required section 'model'")
    return ModelConfig.from_dict(cfg["model"])


def loss_config_from(cfg: dict) -> LossConfig:
    try:
        out = LossConfig(**cfg.get("loss", {}))
    except TypeError as exc:
        raise ConfigError(f"bad loss config: {exc}") from None
    out.validate()
    return out


def schedule_from(cfg: dict, seed: int) -> TrainSchedule:
    try:
        out = TrainSchedule(seed=seed, **cfg.get("train", {}))
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from None
    out.validate()
    return out


def split_ratios_from(cfg: dict) -> tuple[float, float, float]:
    ratios = cfg.get("split", {}).get("ratios", [0.8, 0.1, 0.1])
    if len(ratios) != 3:
        raise ConfigError("split.ratios must have exactly 3 entries")
    return tuple(float(r) for r in ratios)
