"""Heatmap ensembling: learned linear mixtures over the full branch set and
every strict non-empty subset, decoded by spatial softmax + soft-argmax."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .branches import BranchConfig, ConfigError, build_branch
from .tensor import Parameter


def enumerate_subsets(n):
    """All strict non-empty subsets of range(n), ordered by size then lexicographically."""
    if n < 1:
        raise ValueError("need at least one branch")
    return [list(c) for k in range(1, n) for c in itertools.combinations(range(n), k)]


def subset_key(subset):
    return ",".join(str(i) for i in subset)


class SubsetCombiner:
    """A 1x1 linear mix of the member heatmaps, without bias."""

    def __init__(self, subset, n_total):
        self.subset = tuple(sorted(subset))
        if not self.subset:
            raise ValueError("a combiner needs at least one member")
        self.is_full = len(self.subset) == n_total
        name = f"combiner/{subset_key(self.subset)}/lambda"
        self.lambdas = Parameter(np.full(len(self.subset), 1.0 / len(self.subset)), name=name)

    @property
    def key(self):
        return subset_key(self.subset)


def merge_heatmaps(combiner, heatmaps):
    """Weighted pixelwise sum of the member heatmaps; ``heatmaps`` is indexable by branch id."""
    try:
        members = [heatmaps[i] for i in combiner.subset]
    except (IndexError, KeyError) as exc:
        raise ValueError(f"missing heatmap for a member of subset {combiner.subset}") from exc
    return T.linear_mix(combiner.lambdas, members)


def decode(heatmap):
    """Heatmap (B, S, S) -> normalised (B, 2) estimate (x moment, y moment)."""
    return T.soft_argmax(T.spatial_softmax(heatmap))


@dataclass
class EnsembleOutput:
    heatmaps: list
    full: T.Tensor
    subsets: dict = field(default_factory=dict)
    merged: dict = field(default_factory=dict)
    full_merged: T.Tensor | None = None


class EnsembleModel:
    def __init__(self, branch_configs, seed=0):
        if not branch_configs:
            raise ConfigError("an ensemble needs at least one branch")
        sizes = {c.heatmap_size for c in branch_configs}
        if len(sizes) != 1:
            raise ConfigError(f"all branches must share heatmap_size, got {sorted(sizes)}")
        self.heatmap_size = sizes.pop()
        init = np.random.SeedSequence(seed).spawn(len(branch_configs))
        self.predictors = [
            build_branch(cfg, rng_seed=int(ss.generate_state(1)[0]), index=i)
            for i, (cfg, ss) in enumerate(zip(branch_configs, init))
        ]
        n = len(self.predictors)
        self.full = SubsetCombiner(range(n), n)
        self.subset_combiners = [SubsetCombiner(s, n) for s in enumerate_subsets(n)]
        self._check_names()

    @property
    def n(self):
        return len(self.predictors)

    @property
    def combiners(self):
        return [self.full] + self.subset_combiners

    def _check_names(self):
        names = [p.name for p in self.parameters().values()]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in model")

    def parameters(self):
        out = {}
        for pred in self.predictors:
            out.update(pred.params)
        for comb in self.combiners:
            out[comb.lambdas.name] = comb.lambdas
        return out

    def subset_lambda_names(self):
        return [c.lambdas.name for c in self.subset_combiners]

    def num_parameters(self):
        return sum(p.size for p in self.parameters().values())

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.parameters().items()}
        for pred in self.predictors:
            for name, bn in pred.bn.items():
                state[f"{name}/running_mean"] = bn.running_mean.copy()
                state[f"{name}/running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state):
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        if missing:
            raise ConfigError(f"checkpoint does not match model architecture: missing {missing[:3]}")
        extra = sorted(k for k in set(state) - set(expected) if not k.startswith("adam/"))
        if extra:
            raise ConfigError(f"checkpoint does not match model architecture: unexpected {extra[:3]}")
        for name, value in expected.items():
            if state[name].shape != value.shape:
                raise ConfigError(f"checkpoint does not match model architecture: {name} has shape "
                                  f"{state[name].shape}, model expects {value.shape}")
        params = self.parameters()
        for name, p in params.items():
            p.data = np.array(state[name], dtype=np.float64)
        for pred in self.predictors:
            for name, bn in pred.bn.items():
                bn.running_mean = np.array(state[f"{name}/running_mean"])
                bn.running_var = np.array(state[f"{name}/running_var"])

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def forward(self, batch, mode="train"):
        return ensemble_forward(self, batch, mode)

    __call__ = forward


def ensemble_forward(model, batch, mode="train"):
    """Run each branch once and decode the full mixture and every subset mixture."""
    heatmaps = [pred.forward(batch, mode) for pred in model.predictors]
    full_map = merge_heatmaps(model.full, heatmaps)
    out = EnsembleOutput(heatmaps=heatmaps, full=decode(full_map), full_merged=full_map)
    for comb in model.subset_combiners:
        merged = merge_heatmaps(comb, heatmaps)
        out.merged[comb.key] = merged
        out.subsets[comb.key] = decode(merged)
    return out


def branch_configs_from_preset(preset, **overrides):
    """``"Rh+Ou+Fc"`` -> list of BranchConfig sharing ``overrides``."""
    kinds = [k.strip() for k in preset.replace("-", "+").split("+") if k.strip()]
    if not kinds:
        raise ConfigError(f"empty architecture preset {preset!r}")
    configs = []
    for k in kinds:
        eyes = overrides.get("eyes", "both")
        if "(" in k:
            k, eye = k.rstrip(")").split("(")
            eyes = {"l": "left", "r": "right", "l+r": "both"}.get(eye, eye)
        configs.append(BranchConfig(kind=k, **{**overrides, "eyes": eyes}).validate())
    return configs
