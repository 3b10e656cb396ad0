"""Experiment configuration: JSON schema, resolution to dataclasses, hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .continuum import REC_FAMILIES, ArchitectureSpec
from .data import Dataset, SyntheticSpec, generate_synthetic, load_dataset
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_ENCODER = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["hashed_ngram", "embed_pool"]},
        "output_dim": {"type": "integer", "minimum": 2},
        "vocab_or_bucket_size": {"type": "integer", "minimum": 1},
        "ngram_range": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
        "max_tokens": {"type": "integer", "minimum": 1},
    },
}

EXPERIMENT_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "perspectra experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["data", "architecture"],
    "properties": {
        "name": {"type": "string"},
        "task": {"type": "string"},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "synthetic": {"type": "object"},
                "seed": {"type": "integer"},
            },
            "oneOf": [{"required": ["path"]}, {"required": ["synthetic"]}],
        },
        "architecture": {
            "type": "object",
            "additionalProperties": False,
            "required": ["family"],
            "properties": {
                "family": {"enum": ["majority", "per_annotator", "sep_heads", "share_rec", "sep_rec"]},
                "n_annotators": {"type": "integer", "minimum": 1},
                "k": {"type": "integer", "minimum": 2},
                "lambda": {"type": "number"},
                "plus_shared": {"type": "boolean"},
                "text_encoder": _ENCODER,
                "annotator_encoder": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "variant": {"enum": ["one_hot", "simple", "complex"]},
                        "embedding_dim": {"type": ["integer", "null"], "minimum": 1},
                        "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    },
                },
                "combiner": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "variant": {"enum": ["simple", "medium", "complex", "deepcross"]},
                        "layers": {"type": ["integer", "null"], "minimum": 1},
                        "activation": {"enum": ["none", "relu", "tanh", None]},
                        "deep_branch_features": {"type": "integer", "minimum": 1},
                        "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    },
                },
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": ["integer", "null"], "minimum": 1},
                "epochs": {"type": ["integer", "null"], "minimum": 0},
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "beta1": {"type": "number"},
                "beta2": {"type": "number"},
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "checked": {"type": "boolean"},
            },
        },
        "output": {"type": "string"},
        "formats": {"type": "array", "items": {"enum": ["json", "csv", "md"]}},
    },
}


def validate(raw: Mapping) -> None:
    try:
        jsonschema.validate(raw, EXPERIMENT_SCHEMA)
    except jsonschema.ValidationError as e:
        loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {loc}: {e.message}") from None


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class ExperimentConfig:
    raw: dict
    dataset: Dataset
    architecture: ArchitectureSpec
    training: TrainConfig
    output: Path
    formats: tuple[str, ...] = ("json", "csv", "md")
    name: str = ""
    task: str = ""
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw, self.architecture, self.training)


def config_hash(raw: Mapping, arch: ArchitectureSpec, training: TrainConfig) -> str:
    """Hash of everything that determines a run except the seed and output location."""
    train = training.to_dict()
    train.pop("seeds")
    payload = {"data": raw["data"], "architecture": arch.to_dict(), "training": train}
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:12]


def load_data(data: Mapping, base_dir: Path) -> Dataset:
    if "path" in data:
        p = Path(data["path"])
        return load_dataset(p if p.is_absolute() else base_dir / p)
    spec = SyntheticSpec.from_dict(data["synthetic"])
    return generate_synthetic(spec, int(data.get("seed", 0)))[0]


def resolve(raw: Mapping, base_dir: Path | None = None, dataset: Dataset | None = None) -> ExperimentConfig:
    raw = copy.deepcopy(dict(raw))
    validate(raw)
    base_dir = Path(base_dir) if base_dir else Path.cwd()
    try:
        if dataset is None:
            dataset = load_data(raw["data"], base_dir)
        arch = dict(raw["architecture"])
        arch.setdefault("n_annotators", dataset.meta.n_annotators)
        arch.setdefault("k", dataset.meta.k)
        spec = ArchitectureSpec.from_dict(arch)
        training = TrainConfig(**raw.get("training", {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config error: {e}") from e
    return ExperimentConfig(
        raw=raw,
        dataset=dataset,
        architecture=spec,
        training=training,
        output=Path(raw.get("output", "out")),
        formats=tuple(raw.get("formats", ("json", "csv", "md"))),
        name=raw.get("name") or spec.family,
        task=raw.get("task", ""),
        base_dir=base_dir,
    )


def read_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None


# ---------------------------------------------------------------------------
# sweeps

_REC_ONLY = ("annotator_encoder", "combiner")
_SEP_REC_ONLY = ("lambda", "plus_shared")


def set_path(raw: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    if parts[0] not in ("architecture", "training", "data") or len(parts) < 2:
        raise ConfigError(f"unknown sweep axis {dotted!r}")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"unknown sweep axis {dotted!r}")
    node[parts[-1]] = value


def normalize_family(raw: dict) -> None:
    """Drop architecture keys that the selected family does not accept."""
    arch = raw["architecture"]
    fam = arch.get("family")
    if fam not in REC_FAMILIES:
        for key in _REC_ONLY:
            arch.pop(key, None)
    if fam != "sep_rec":
        for key in _SEP_REC_ONLY:
            arch.pop(key, None)


def check_axis(dotted: str) -> None:
    """Reject axis keys that name no config field."""
    parts = dotted.split(".")
    schema = EXPERIMENT_SCHEMA
    for p in parts:
        props = schema.get("properties", {})
        if p not in props:
            if parts[0] == "data" and len(parts) > 2 and parts[1] == "synthetic":
                return
            raise ConfigError(f"unknown sweep axis {dotted!r}")
        schema = props[p]
