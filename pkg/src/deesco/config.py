"""Experiment configuration (JSON) with lossless round-tripping."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .branches import BranchConfig, ConfigError


@dataclass
class TrainSchedule:
    base_lr: float = 2e-4
    total_steps: int | None = None
    power: float = 1.0
    batch_size: int = 32
    epochs: int = 10

    def resolve_total_steps(self, n_train):
        if self.total_steps is not None:
            return int(self.total_steps)
        return -(-n_train * self.epochs // self.batch_size)


@dataclass
class ExperimentConfig:
    branches: list
    nu: float = 1.0
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    fold_scheme: str = "loso"
    kfold_k: int | None = None
    max_folds: int | None = None
    seed: int = 0
    dataset: str | None = None
    output_dir: str = "runs/deesco"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    metric: str | None = None
    paper_literal_gaze_vector: bool = False

    def validate(self):
        if not self.branches:
            raise ConfigError("config lists no branches")
        for b in self.branches:
            b.validate()
        sizes = {b.heatmap_size for b in self.branches}
        if len(sizes) != 1:
            raise ConfigError(f"all branches must share heatmap_size, got {sorted(sizes)}")
        if self.nu < 0:
            raise ConfigError("nu must be non-negative")
        if self.fold_scheme not in ("loso", "kfold"):
            raise ConfigError(f"unknown fold scheme {self.fold_scheme!r}")
        if self.fold_scheme == "kfold" and (self.kfold_k is None or self.kfold_k < 2):
            raise ConfigError("kfold needs kfold_k >= 2")
        if self.schedule.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch norm)")
        if self.metric not in (None, "3d", "2d"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["branches"] = [b.to_dict() for b in self.branches]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        d = dict(d)
        if "branches" not in d:
            raise ConfigError("config needs a 'branches' list")
        d["branches"] = [b if isinstance(b, BranchConfig) else BranchConfig.from_dict(b) for b in d["branches"]]
        sched = d.get("schedule", {})
        d["schedule"] = sched if isinstance(sched, TrainSchedule) else TrainSchedule(**sched)
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except (TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_json())
