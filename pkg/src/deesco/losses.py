"""Gaze losses: the full-ensemble L2 loss, per-subset losses and the
stochastic combinatory mixture of them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


def l2_gaze_loss(pred, truth):
    """Batch mean of squared Euclidean error between (B, 2) predictions and targets."""
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise T.ShapeError(f"prediction {pred.shape} and target {truth.shape} differ")
    diff = pred - truth
    return T.mean(T.tsum(T.square(diff), axis=-1))


@dataclass
class MuWeights:
    weights: dict
    batch_id: int = 0

    def __getitem__(self, key):
        return self.weights[key]

    def __len__(self):
        return len(self.weights)


def sample_mu(rng, subsets, batch_id=0):
    """Independent U(0, 1) draws per subset, normalised to sum to one."""
    keys = [s if isinstance(s, str) else ",".join(map(str, s)) for s in subsets]
    if not keys:
        return MuWeights({}, batch_id)
    u = rng.uniform(0.0, 1.0, size=len(keys))
    while u.sum() == 0.0:
        u = rng.uniform(0.0, 1.0, size=len(keys))
    mu = u / u.sum()
    return MuWeights(dict(zip(keys, mu.tolist())), batch_id)


def combinatory_loss(per_subset_preds, truth, mu):
    """Returns (L_comb tensor, {subset key: L^I tensor})."""
    if set(per_subset_preds) != set(mu.weights):
        raise KeyError(
            f"subset predictions {sorted(per_subset_preds)} do not match mu weights {sorted(mu.weights)}"
        )
    per_subset = {k: l2_gaze_loss(p, truth) for k, p in per_subset_preds.items()}
    if not per_subset:
        return T.Tensor(0.0), per_subset
    total = None
    for k, loss in per_subset.items():
        term = loss * mu.weights[k]
        total = term if total is None else total + term
    return total, per_subset


def total_loss(l0, l_comb, nu):
    if nu < 0:
        raise ValueError(f"nu must be non-negative, got {nu}")
    return l0 + l_comb * float(nu)


@dataclass
class LossBreakdown:
    l0: float
    l_comb: float
    l_tot: float
    nu: float
    per_subset: dict = field(default_factory=dict)
    mu: dict = field(default_factory=dict)
