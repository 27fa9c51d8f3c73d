"""ADAM with polynomial learning-rate decay and the per-batch training loop.

Randomness comes from labelled substreams of the master seed: model init,
data order and mu draws never share a generator, so switching the
combinatory loss off leaves data order untouched. Data order for epoch
``e`` and the mu draw for step ``t`` are pure functions of the seed, which
makes the step counter the only RNG state a checkpoint needs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, kernels
from .branches import ConfigError
from .ensemble import EnsembleModel
from .losses import LossBreakdown, combinatory_loss, l2_gaze_loss, sample_mu, total_loss

log = logging.getLogger(__name__)

INIT, DATA, MU = 0, 1, 2


class TrainingError(RuntimeError):
    pass


def substream_seed(seed, label, fold_id=0, *extra):
    return [int(seed), label, int(fold_id), *[int(e) for e in extra]]


def build_model(config, fold_id=0):
    seed = np.random.SeedSequence(substream_seed(config.seed, INIT, fold_id)).generate_state(1)[0]
    return EnsembleModel(config.branches, seed=int(seed))


def poly_lr(schedule, t, total_steps=None):
    total = schedule.total_steps if total_steps is None else total_steps
    if t >= total:
        return 0.0
    return schedule.base_lr * (1.0 - max(t, 0) / total) ** schedule.power


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def state_dict(self):
        out = {"adam/step": np.array(float(self.step))}
        for name in self.m:
            out[f"adam/m/{name}"] = self.m[name].copy()
            out[f"adam/v/{name}"] = self.v[name].copy()
        return out

    def load_state_dict(self, state):
        self.step = int(state["adam/step"])
        self.m = {k[len("adam/m/"):]: v.copy() for k, v in state.items() if k.startswith("adam/m/")}
        self.v = {k[len("adam/v/"):]: v.copy() for k, v in state.items() if k.startswith("adam/v/")}


def adam_step(params, state, lr, grad_clip=None):
    """Bias-corrected ADAM update of every parameter in ``params`` (name -> Parameter)."""
    for name, p in params.items():
        if p.grad is None:
            raise TrainingError(f"parameter {name} received no gradient")
    grads = {name: p.grad for name, p in params.items()}
    if grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > grad_clip:
            grads = {k: g * (grad_clip / norm) for k, g in grads.items()}
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, p in params.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        kernels.adam_update(p.data, grads[name], m, state.v[name], lr, b1, b2, c1, c2, state.eps)


class BatchStream:
    """Endless stream of full batches over per-epoch permutations."""

    def __init__(self, indices, batch_size, seed, fold_id):
        self.indices = np.asarray(indices)
        self.n = len(self.indices)
        if self.n == 0:
            raise TrainingError("training split is empty")
        self.batch_size = batch_size
        self.seed, self.fold_id = seed, fold_id
        self._perm_epoch, self._perm = None, None

    def _epoch_perm(self, e):
        if self._perm_epoch != e:
            rng = np.random.default_rng(substream_seed(self.seed, DATA, self.fold_id, e))
            self._perm, self._perm_epoch = rng.permutation(self.n), e
        return self._perm

    def batch(self, step):
        start = step * self.batch_size
        out = []
        for pos in range(start, start + self.batch_size):
            e, k = divmod(pos, self.n)
            out.append(self.indices[self._epoch_perm(e)[k]])
        return np.array(out)

    def epoch_of(self, step):
        """Number of complete epochs after ``step`` batches."""
        return step * self.batch_size // self.n


@dataclass
class TrainResult:
    model: EnsembleModel
    adam: AdamState
    steps: int
    log: list


def training_step(model, batch, config, mu_rng, step):
    """Forward, losses and backward for one batch; returns (loss tensor, breakdown)."""
    model.zero_grad()
    try:
        out = model.forward(batch, mode="train")
    except FloatingPointError as exc:
        raise TrainingError(f"non-finite values at step {step}: {exc}") from exc
    l0 = l2_gaze_loss(out.full, batch.targets)
    mu = sample_mu(mu_rng, list(out.subsets), batch_id=step)
    l_comb, per_subset = combinatory_loss(out.subsets, batch.targets, mu)
    l_tot = total_loss(l0, l_comb, config.nu)
    if not np.isfinite(l_tot.data):
        raise TrainingError(f"non-finite loss at step {step}: l0={l0.item()}, l_comb={float(l_comb.data)}")
    l_tot.backward()
    return l_tot, LossBreakdown(
        l0=l0.item(), l_comb=float(l_comb.data), l_tot=l_tot.item(), nu=float(config.nu),
        per_subset={k: v.item() for k, v in per_subset.items()}, mu=dict(mu.weights),
    )


def save_checkpoint(path, model, adam):
    state = model.state_dict()
    state.update(adam.state_dict())
    checkpoint.save(path, state)


def load_checkpoint(path, model, adam=None):
    state = checkpoint.load(path)
    model.load_state_dict(state)
    if adam is not None:
        if "adam/step" not in state:
            raise checkpoint.CheckpointError(f"{path} holds no optimizer state")
        adam.load_state_dict(state)
    return state


def fit(model, dataset, train_indices, config, fold_id=0, log_path=None, checkpoint_dir=None,
        resume_from=None, stop_at=None):
    """Train ``model`` on ``train_indices`` of ``dataset``.

    ``stop_at`` ends the run early after that many total steps (used to
    split a run around a checkpoint); the learning-rate schedule is always
    computed against the full step budget.
    """
    sched = config.schedule
    stream = BatchStream(train_indices, sched.batch_size, config.seed, fold_id)
    total = sched.resolve_total_steps(stream.n)
    adam = AdamState(config.beta1, config.beta2, config.adam_eps)
    if resume_from is not None:
        load_checkpoint(resume_from, model, adam)
    start = adam.step
    end = total if stop_at is None else min(stop_at, total)
    params = model.parameters()
    records = []
    log_fh = open(log_path, "a") if log_path is not None else None
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    try:
        for t in range(start, end):
            batch = dataset.batch(stream.batch(t))
            mu_rng = np.random.default_rng(substream_seed(config.seed, MU, fold_id, t))
            _, bd = training_step(model, batch, config, mu_rng, t)
            lr = poly_lr(sched, t, total)
            adam_step(params, adam, lr, config.grad_clip)
            rec = {"fold": fold_id, "step": t, "lr": lr, "l0": bd.l0, "l_comb": bd.l_comb,
                   "l_tot": bd.l_tot, "nu": bd.nu, "per_subset": bd.per_subset, "mu": bd.mu}
            records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if checkpoint_dir is not None and stream.epoch_of(t + 1) > stream.epoch_of(t):
                save_checkpoint(Path(checkpoint_dir) / f"fold{fold_id}_last.ckpt", model, adam)
            if t % 100 == 0:
                log.info("fold %d step %d/%d l0=%.4f l_tot=%.4f", fold_id, t, total, bd.l0, bd.l_tot)
    finally:
        if log_fh is not None:
            log_fh.close()
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / f"fold{fold_id}.ckpt", model, adam)
    return TrainResult(model, adam, end, records)

