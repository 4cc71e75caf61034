"""JSON run configuration with strict validation.

Every error carries the dotted path of the offending field, e.g.
``hmmoe.r``. Unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigurationError
from .harness import ABLATION_KINDS, FUSION_RULES, SyntheticTaskSpec, TrainingSpec
from .layer import HmmoeConfig

DEFAULT_GRIDS: dict[str, list] = {
    "expert_type": [["single"], ["single", "cross"], ["single", "cross", "channel"]],
    "rank": [2, 4, 8, 16, 32],
    "expert_count": [1, 2, 3, 4],
    "heterogeneous": [1],
}


@dataclass(frozen=True)
class ModelSpec:
    layers: int = 2
    dim: int = 32
    classes: int = 2


def _section(d: Mapping, name: str, allowed: set[str], required: bool = True) -> dict:
    if name not in d:
        if required:
            raise ConfigurationError(f"missing required section '{name}'", name)
        return {}
    sec = d[name]
    if not isinstance(sec, Mapping):
        raise ConfigurationError(f"'{name}' must be an object", name)
    for key in sec:
        if key not in allowed:
            raise ConfigurationError(f"unknown key '{name}.{key}'", f"{name}.{key}")
    return dict(sec)


def _get(sec: Mapping, prefix: str, key: str, kind, default: Any = ..., positive: bool = False):
    path = f"{prefix}.{key}"
    if key not in sec:
        if default is ...:
            raise ConfigurationError(f"missing required field '{path}'", path)
        return default
    value = sec[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(value, bool) and kind is not bool or not isinstance(value, kind):
        raise ConfigurationError(f"'{path}' must be of type {kind.__name__}, got {value!r}", path)
    if positive and value <= 0:
        raise ConfigurationError(f"'{path}' must be positive, got {value!r}", path)
    return value


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    hmmoe: HmmoeConfig
    task: SyntheticTaskSpec
    training: TrainingSpec
    ablation: dict = field(default_factory=dict)
    output_dir: str | None = None

    def ablation_grid(self, kind: str) -> list:
        if kind not in ABLATION_KINDS:
            raise ConfigurationError(f"unknown ablation kind {kind!r}", "ablation.kind")
        return self.ablation.get(kind, DEFAULT_GRIDS[kind])

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, training=replace(self.training, seeds=(seed,)),
                       task=replace(self.task, seed=seed))

    def to_dict(self) -> dict:
        t, tr = self.task, self.training
        return {
            "model": {"L": self.model.layers, "D": self.model.dim, "C": self.model.classes},
            "hmmoe": self.hmmoe.to_dict(),
            "task": {"S_V": t.seq_v, "S_A": t.seq_a, "fusion_rule": t.fusion_rule,
                     "noise_std": t.noise_std, "seed": t.seed,
                     "n_train": t.n_train, "n_test": t.n_test},
            "training": {"steps": tr.steps, "batch_size": tr.batch_size, "lr": tr.lr,
                         "optimizer": tr.optimizer, "seeds": list(tr.seeds),
                         "eval_every": tr.eval_every, "zero_modality": tr.zero_modality},
            "ablation": self.ablation,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        if not isinstance(d, Mapping):
            raise ConfigurationError("config must be a JSON object", "")
        top = {"model", "hmmoe", "task", "training", "ablation", "output_dir"}
        for key in d:
            if key not in top:
                raise ConfigurationError(f"unknown key '{key}'", key)

        m = _section(d, "model", {"L", "D", "C"})
        model = ModelSpec(layers=_get(m, "model", "L", int, positive=True),
                          dim=_get(m, "model", "D", int, positive=True),
                          classes=_get(m, "model", "C", int, 2, positive=True))
        if model.classes < 2:
            raise ConfigurationError("'model.C' must be at least 2", "model.C")

        h = _section(d, "hmmoe", {"r", "groups", "k", "share_across_modalities"})
        hmmoe = HmmoeConfig.from_dict(h, model.dim)

        t = _section(d, "task", {"S_V", "S_A", "fusion_rule", "noise_std", "seed",
                                 "n_train", "n_test"}, required=False)
        rule = _get(t, "task", "fusion_rule", str, "xor_latent")
        if rule not in FUSION_RULES:
            raise ConfigurationError(f"'task.fusion_rule' must be one of {FUSION_RULES}",
                                     "task.fusion_rule")
        noise = _get(t, "task", "noise_std", float, 0.1)
        if noise < 0:
            raise ConfigurationError("'task.noise_std' must be non-negative", "task.noise_std")
        task = SyntheticTaskSpec(
            seq_v=_get(t, "task", "S_V", int, 6, positive=True),
            seq_a=_get(t, "task", "S_A", int, 4, positive=True),
            dim=model.dim, classes=model.classes, fusion_rule=rule, noise_std=noise,
            seed=_get(t, "task", "seed", int, 0),
            n_train=_get(t, "task", "n_train", int, 4096, positive=True),
            n_test=_get(t, "task", "n_test", int, 2000, positive=True))

        tr = _section(d, "training", {"steps", "batch_size", "lr", "optimizer", "seeds",
                                      "eval_every", "zero_modality"}, required=False)
        optimizer = _get(tr, "training", "optimizer", str, "adam")
        if optimizer not in ("adam", "sgd"):
            raise ConfigurationError("'training.optimizer' must be 'adam' or 'sgd'",
                                     "training.optimizer")
        seeds = _get(tr, "training", "seeds", list, [0, 1, 2])
        if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigurationError("'training.seeds' must be a non-empty list of integers",
                                     "training.seeds")
        zero = tr.get("zero_modality")
        if zero not in (None, "v", "a"):
            raise ConfigurationError("'training.zero_modality' must be null, 'v' or 'a'",
                                     "training.zero_modality")
        training = TrainingSpec(
            steps=_get(tr, "training", "steps", int, 2000, positive=True),
            batch_size=_get(tr, "training", "batch_size", int, 32, positive=True),
            lr=_get(tr, "training", "lr", float, 1e-3),
            optimizer=optimizer, seeds=tuple(seeds),
            eval_every=_get(tr, "training", "eval_every", int, 100, positive=True),
            zero_modality=zero)
        if training.lr < 0:
            raise ConfigurationError("'training.lr' must be non-negative", "training.lr")

        ab = _section(d, "ablation", set(ABLATION_KINDS), required=False)
        for kind, grid in ab.items():
            if not isinstance(grid, list) or not grid:
                raise ConfigurationError(f"'ablation.{kind}' must be a non-empty list",
                                         f"ablation.{kind}")
        out = d.get("output_dir")
        if out is not None and not isinstance(out, str):
            raise ConfigurationError("'output_dir' must be a string", "output_dir")
        return cls(model, hmmoe, task, training, ab, out)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e.strerror}", "") from e
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config {path} is not valid JSON: {e}", "") from e
        return cls.from_dict(data)
