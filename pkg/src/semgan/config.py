"""Layered run configuration: defaults <- YAML file <- command-line sets.

The resolved tree is plain dicts/lists/scalars so it round-trips through
YAML unchanged; typed views (TrainConfig, LossWeights) are built on demand.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .errors import ValidationError
from .losses import LossWeights
from .pipeline import METHODS, TrainConfig

DEFAULTS: dict = {
    "scenegen": {
        "style": "synthetic",
        "count": 60,
        "canvas_size": 64,
        "seed": 0,
    },
    "data": {
        "source": None,
        "target": None,
        "test": None,
        "out_root": ".",
    },
    "arch": {
        "generator": {"base_width": 32, "res_blocks": 4},
        "discriminator": {"base_width": 32, "n_down": 3},
        "detector": {"base_width": 16, "num_classes": 1},
    },
    "train": {
        "gan_steps": 3000,
        "detector_steps": 1500,
        "finetune_steps": 500,
        "lr_gan": 2.0e-4,
        "lr_detector": 1.0e-3,
        "batch_size": 8,
        "gan_batch_size": 1,
        "seed": 0,
        "pool_size": 50,
        "patience": 0,
        "checkpoint_every": 500,
        "val_fraction": 0.2,
        "eval_every": 2,
        "finetune_include_real": False,
    },
    "weights": {
        "lambda_cycle": 10.0,
        "lambda_identity": 5.0,
        "lambda_task": 1.0,
        "adv_form": "least_squares",
    },
    "eval": {
        "conf_threshold": 0.1,
        "nms_threshold": 0.45,
    },
    "experiment": {
        "k_list": [2, 5, 9, 14, 19, 30, 40, 50],
        "methods": list(METHODS),
        "seeds": [0, 1, 2],
        "jobs": 1,
    },
}


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    merged = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key in merged and isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(where, f"expected a mapping, got {type(value).__name__}")
            merged[key] = _deep_merge(merged[key], value, where)
        else:
            merged[key] = value
    return merged


def _apply_set(tree: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ValidationError("set", f"expected key.path=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    node = tree
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            node[key] = {}
        node = node[key]
    node[keys[-1]] = yaml.safe_load(raw)


class RunConfig:
    """Resolved configuration tree with typed accessors."""

    def __init__(self, values: dict):
        for section in values:
            if section not in DEFAULTS:
                raise ValidationError(
                    "config", f"unknown section {section!r}; known: {sorted(DEFAULTS)}"
                )
        self.values = _deep_merge(copy.deepcopy(DEFAULTS), values)

    @classmethod
    def load(cls, path: Path | str | None = None, sets: list[str] | None = None) -> "RunConfig":
        tree: dict = {}
        if path is not None:
            text = Path(path).read_text()
            loaded = yaml.safe_load(text)
            if loaded is None:
                loaded = {}
            if not isinstance(loaded, dict):
                raise ValidationError("config", f"{path} must contain a mapping at the top level")
            tree = loaded
        for assignment in sets or []:
            _apply_set(tree, assignment)
        return cls(tree)

    def section(self, name: str) -> dict:
        return self.values[name]

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.values["weights"])

    def train_config(self, seed: int | None = None) -> TrainConfig:
        train = dict(self.values["train"])
        if seed is not None:
            train["seed"] = seed
        return TrainConfig(weights=self.loss_weights(), **train)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.values, sort_keys=True, default_flow_style=False)

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml())
