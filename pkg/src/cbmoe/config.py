"""Experiment configuration: nested JSON document, two named presets, and
fail-closed parsing (any unrecognized key aborts before compute).

Resolution order: preset defaults, then the config document's own fields,
then explicit CLI overrides. The fully resolved config is embedded in
every artifact and must re-parse to an equivalent config.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .concepts import parse_variant
from .synthcohort import CohortConfig
from .trainer import TrainConfig

PRESETS = ("pbt-default", "tcga-default")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 256
    d_c: int = 16
    gnn_layers: int = 3
    gnn_hidden: int = 256
    gnn_dropout: float = 0.1
    patch_cap: int = 16
    perturb_sigma_scale: float = 1.0
    neutral_state: str = "negative"   # logit-ablation neutral: negative | mean

    def __post_init__(self):
        if self.neutral_state not in ("negative", "mean"):
            raise ConfigError("neutral_state must be 'negative' or 'mean'")


@dataclass
class LossConfig:
    lambda1: float = 0.5
    lambda2: float = 0.3
    lambda_int: float = 0.1


@dataclass
class SubsampleConfig:
    sizes: list[int] | None = None    # None: scale {50,100,150,164} to the pool
    repeats: int = 5


@dataclass
class ExperimentConfig:
    preset: str = "pbt-default"
    seed: int = 0
    folds: int = 5
    variant: str = "hier-morph+bio"
    cohort: CohortConfig = field(default_factory=CohortConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    subsample: SubsampleConfig = field(default_factory=SubsampleConfig)

    def to_dict(self) -> dict:
        def jsonish(value):
            if isinstance(value, tuple):
                return [jsonish(v) for v in value]
            if isinstance(value, dict):
                return {k: jsonish(v) for k, v in value.items()}
            if isinstance(value, list):
                return [jsonish(v) for v in value]
            return value

        return jsonish(asdict(self))

    def validate(self) -> "ExperimentConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        try:
            parse_variant(self.variant)
            self.cohort.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _preset_overrides(name: str) -> dict:
    # the two hyperparameter columns: shared architecture, dataset-specific
    # regularization (lighter GNN, heavier dropout and L1 weight for the
    # external two-class cohort)
    if name == "pbt-default":
        return {}
    if name == "tcga-default":
        return {
            "cohort": {"num_classes": 2},
            "model": {"gnn_layers": 2, "gnn_hidden": 128, "gnn_dropout": 0.5},
            "loss": {"lambda1": 0.9, "lambda2": 0.0, "lambda_int": 0.01},
            "train": {"lr": 1e-4, "batch_size": 8, "dropout": 0.6},
            "variant": "flat-morph",
        }
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


_SECTIONS = {
    "cohort": CohortConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "subsample": SubsampleConfig,
}
_SCALARS = ("preset", "seed", "folds", "variant")


def _build_section(cls, base: dict, updates: dict, path: str) -> dict:
    allowed = {f.name for f in fields(cls)}
    for key in updates:
        if key not in allowed:
            raise ConfigError(f"unknown key {path}.{key!r}")
    merged = dict(base)
    merged.update(updates)
    return merged


def resolve_config(document: dict | None = None, *, preset: str | None = None,
                   overrides: dict | None = None) -> ExperimentConfig:
    """Merge preset defaults, a config document, and CLI overrides.

    Unknown keys anywhere fail closed with ConfigError.
    """
    document = dict(document or {})
    for key in document:
        if key not in _SECTIONS and key not in _SCALARS:
            raise ConfigError(f"unknown key {key!r}")

    preset_name = preset or document.get("preset", "pbt-default")
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}; choose from {PRESETS}")
    preset_doc = _preset_overrides(preset_name)

    sections = {}
    for name, cls in _SECTIONS.items():
        base = asdict(cls())
        base = _build_section(cls, base, preset_doc.get(name, {}), name)
        user = document.get(name, {})
        if not isinstance(user, dict):
            raise ConfigError(f"section {name!r} must be an object")
        base = _build_section(cls, base, user, name)
        if name == "cohort":
            base["patches_per_slide_range"] = tuple(base["patches_per_slide_range"])
            base["graph_nodes_range"] = tuple(base["graph_nodes_range"])
        if name == "subsample" and base.get("sizes") is not None:
            base["sizes"] = [int(s) for s in base["sizes"]]
        try:
            sections[name] = cls(**base)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} section: {exc}") from exc

    scalars = {
        "preset": preset_name,
        "seed": document.get("seed", 0),
        "folds": document.get("folds", 5),
        "variant": document.get("variant",
                                preset_doc.get("variant", "hier-morph+bio")),
    }
    overrides = overrides or {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _SCALARS:
            raise ConfigError(f"unknown override {key!r}")
        scalars[key] = value

    # all randomness flows from the root seed: the cohort substream shares it
    sections["cohort"] = replace(sections["cohort"], seed=int(scalars["seed"]))
    cfg = ExperimentConfig(**scalars, **sections)
    return cfg.validate()


def load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            document = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ConfigError("config document must be a JSON object")
    return document


def config_from_artifact(embedded: dict) -> ExperimentConfig:
    """Re-parse a resolved config embedded in an artifact."""
    return resolve_config(embedded)
