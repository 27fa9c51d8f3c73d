"""Randomised finite-difference checks for every differentiable primitive.

Each case builder takes an integer seed and returns ``(f, inputs)`` for
:func:`deesco.gradcheck.grad_check`. Shapes are drawn from the seed so the
suite covers a spread of geometries.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .branches import coords_to_gaussian_heatmap
from .gradcheck import grad_check
from .losses import combinatory_loss, l2_gaze_loss, sample_mu, total_loss
from .tensor import BatchNormState, Tensor


def _leaf(rng, *shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        # keep relu inputs clear of the kink by more than the FD step
        x = np.where(np.abs(x) < 0.05, np.sign(x + 1e-12) * 0.05 + x, x)
    return Tensor(x, requires_grad=True)


def _probe(rng, shape):
    """Fixed random weights turning an output into a scalar with generic gradients."""
    return rng.standard_normal(shape)


def _scalar(out, w):
    return T.tsum(out * w)


def case_conv2d(seed):
    rng = np.random.default_rng(seed)
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    stride, pad = (int(rng.integers(1, 3)), int(rng.integers(1, 3))), int(rng.integers(0, 2))
    h, w = int(rng.integers(k, 8)), int(rng.integers(k, 8))
    x, wt, b = _leaf(rng, n, c, h, w), _leaf(rng, o, c, k, k), _leaf(rng, o)
    probe = _probe(rng, T.conv2d(x, wt, b, stride, pad).shape)
    return (lambda: _scalar(T.conv2d(x, wt, b, stride, pad), probe)), {"input": x, "weight": wt, "bias": b}


def case_transposed_conv2d(seed):
    rng = np.random.default_rng(seed)
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k, stride, pad = [(2, 2, 0), (4, 2, 1), (3, 1, 1), (3, 2, 0)][seed % 4]
    h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    x, wt, b = _leaf(rng, n, c, h, w), _leaf(rng, c, o, k, k), _leaf(rng, o)
    probe = _probe(rng, T.transposed_conv2d(x, wt, b, stride, pad).shape)
    return (lambda: _scalar(T.transposed_conv2d(x, wt, b, stride, pad), probe)), {"input": x, "weight": wt, "bias": b}


def case_dense(seed):
    rng = np.random.default_rng(seed)
    n, fi, fo = rng.integers(1, 5), rng.integers(1, 7), rng.integers(1, 7)
    x, wt, b = _leaf(rng, n, fi), _leaf(rng, fo, fi), _leaf(rng, fo)
    probe = _probe(rng, (n, fo))
    return (lambda: _scalar(T.dense(x, wt, b), probe)), {"input": x, "weight": wt, "bias": b}


def case_batch_norm(seed):
    rng = np.random.default_rng(seed)
    n, c = int(rng.integers(2, 4)), int(rng.integers(1, 4))
    shape = (n, c, int(rng.integers(1, 4)), int(rng.integers(1, 4))) if seed % 3 else (n + 1, c)
    x = _leaf(rng, *shape)
    gamma = Tensor(rng.uniform(0.5, 1.5, c), requires_grad=True)
    beta = _leaf(rng, c)
    probe = _probe(rng, shape)
    training = seed % 4 != 3

    def f():
        state = BatchNormState(c)
        state.running_mean = np.linspace(-0.2, 0.2, c)
        state.running_var = np.linspace(0.5, 1.5, c)
        return _scalar(T.batch_norm(x, gamma, beta, state, training=training), probe)

    return f, {"input": x, "gamma": gamma, "beta": beta}


def case_relu(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, *rng.integers(1, 6, size=3), away_from_zero=True)
    probe = _probe(rng, x.shape)
    return (lambda: _scalar(T.relu(x), probe)), {"input": x}


def case_concat(seed):
    rng = np.random.default_rng(seed)
    n, h, w = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
    a, b = _leaf(rng, n, int(rng.integers(1, 4)), h, w), _leaf(rng, n, int(rng.integers(1, 4)), h, w)
    probe = _probe(rng, T.concat_channels(a, b).shape)
    return (lambda: _scalar(T.concat_channels(a, b), probe)), {"a": a, "b": b}


def case_reshape(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, 2, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    probe = _probe(rng, (x.size,))
    return (lambda: _scalar(T.reshape(x, (x.size,)), probe)), {"input": x}


def case_outer_product(seed):
    rng = np.random.default_rng(seed)
    n, w, h = rng.integers(1, 4), rng.integers(1, 7), rng.integers(1, 7)
    a, b = _leaf(rng, n, w), _leaf(rng, n, h)
    probe = _probe(rng, (n, h, w))
    return (lambda: _scalar(T.outer_product(a, b), probe)), {"a": a, "b": b}


def case_spatial_softmax(seed):
    rng = np.random.default_rng(seed)
    n, s = rng.integers(1, 3), rng.integers(2, 7)
    h = Tensor(2.0 * rng.standard_normal((n, s, s)), requires_grad=True)
    probe = _probe(rng, h.shape)
    return (lambda: _scalar(T.spatial_softmax(h), probe)), {"heatmap": h}


def case_soft_argmax(seed):
    rng = np.random.default_rng(seed)
    n, s = rng.integers(1, 3), rng.integers(2, 7)
    p = Tensor(rng.dirichlet(np.ones(s * s), size=n).reshape(n, s, s), requires_grad=True)
    probe = _probe(rng, (n, 2))
    return (lambda: _scalar(T.soft_argmax(p), probe)), {"prob": p}


def case_merge(seed):
    rng = np.random.default_rng(seed)
    k, n, s = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(2, 6))
    lam = _leaf(rng, k)
    maps = [_leaf(rng, n, s, s) for _ in range(k)]
    probe = _probe(rng, (n, s, s))
    inputs = {"lambda": lam, **{f"map{i}": m for i, m in enumerate(maps)}}
    return (lambda: _scalar(T.linear_mix(lam, maps), probe)), inputs


def case_gaussian_render(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 3))
    coords = Tensor(rng.uniform(-0.8, 0.8, (n, 2)), requires_grad=True)
    s, sigma = int(rng.choice([8, 16])), float(rng.uniform(0.2, 0.5))
    probe = _probe(rng, (n, s, s))
    return (lambda: _scalar(coords_to_gaussian_heatmap(coords, s, sigma, 2.0), probe)), {"coords": coords}


def case_l2_loss(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    pred = _leaf(rng, n, 2)
    truth = rng.uniform(-1, 1, (n, 2))
    return (lambda: l2_gaze_loss(pred, truth)), {"pred": pred}


def _subset_preds(rng, n_branches, n):
    from .ensemble import enumerate_subsets, subset_key

    keys = [subset_key(s) for s in enumerate_subsets(n_branches)]
    return {k: _leaf(rng, n, 2) for k in keys}


def case_combinatory_loss(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    preds = _subset_preds(rng, int(rng.integers(2, 4)), n)
    truth = rng.uniform(-1, 1, (n, 2))
    mu = sample_mu(rng, list(preds))
    return (lambda: combinatory_loss(preds, truth, mu)[0]), dict(preds)


def case_total_loss(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    full = _leaf(rng, n, 2)
    preds = _subset_preds(rng, 3, n)
    truth = rng.uniform(-1, 1, (n, 2))
    mu = sample_mu(rng, list(preds))
    nu = float(rng.choice([0.1, 1.0, 5.0]))

    def f():
        return total_loss(l2_gaze_loss(full, truth), combinatory_loss(preds, truth, mu)[0], nu)

    return f, {"full": full, **preds}


def case_elementwise(seed):
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, 3, 4), _leaf(rng, 1, 4)
    probe = _probe(rng, (3, 4))

    def f():
        y = T.exp(a * 0.3) * b + T.square(a) - b
        return _scalar(y, probe) + T.mean(T.tsum(a, axis=0)) + T.tsum(a[1:, :2])

    return f, {"a": a, "b": b}


CASES = {
    "conv2d": case_conv2d,
    "transposed_conv2d": case_transposed_conv2d,
    "dense": case_dense,
    "batch_norm": case_batch_norm,
    "relu": case_relu,
    "concat": case_concat,
    "reshape": case_reshape,
    "outer_product": case_outer_product,
    "spatial_softmax": case_spatial_softmax,
    "soft_argmax": case_soft_argmax,
    "merge": case_merge,
    "gaussian_render": case_gaussian_render,
    "l2_loss": case_l2_loss,
    "combinatory_loss": case_combinatory_loss,
    "total_loss": case_total_loss,
    "elementwise": case_elementwise,
}


def faulty_square(x):
    """Squaring with a deliberately wrong adjoint; negative control only."""
    return Tensor._make(x.data * x.data, (x,), lambda g: (3.0 * x.data * g,), "faulty_square")


def case_faulty(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, 4)
    return (lambda: T.tsum(faulty_square(x))), {"input": x}


def run_case(name, seed, eps=1e-4, tol=1e-3, inject_fault=False):
    builder = case_faulty if inject_fault else CASES[name]
    f, inputs = builder(seed)
    return grad_check(f, inputs, eps=eps, tol=tol)


def run_suite(ops=None, seeds=20, eps=1e-4, tol=1e-3, inject_fault=False):
    """Returns {op: [(seed, report), ...]}."""
    ops = list(CASES) if ops is None else ops
    unknown = [o for o in ops if o not in CASES]
    if unknown:
        raise KeyError(f"unknown primitive(s) {unknown}; choose from {sorted(CASES)}")
    return {op: [(s, run_case(op, s, eps, tol, inject_fault)) for s in range(seeds)] for op in ops}
