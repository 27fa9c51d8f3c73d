"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad

# Gradients smaller than this are compared in absolute terms.
SCALE_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    tol: float
    errors: dict = field(default_factory=dict)

    @property
    def failures(self):
        return [name for name, err in self.errors.items() if not err < self.tol]

    @property
    def passed(self):
        return not self.failures

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def __str__(self):
        lines = [f"{'PASS' if err < self.tol else 'FAIL'} {name}: {err:.3e}" for name, err in self.errors.items()]
        return "\n".join(lines)


def relative_error(analytic, numeric):
    """Max abs deviation relative to the gradient's own scale."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), SCALE_FLOOR)
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(f, tensor, eps=1e-4, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``tensor.data``."""
    flat = tensor.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = np.zeros(len(indices))
    with no_grad():
        for k, i in enumerate(indices):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            out[k] = (fp - fm) / (2 * eps)
    return out


def grad_check(f, inputs, eps=1e-4, tol=1e-3, max_entries=None, seed=0):
    """Compare analytic and central-difference gradients of scalar ``f()``.

    ``inputs`` maps names to the tensors ``f`` reads; their ``.data`` is
    perturbed in place and restored. With ``max_entries`` set, a random
    subset of entries per tensor is checked.
    """
    rng = np.random.default_rng(seed)
    for t in inputs.values():
        t.grad = None
    loss = f()
    loss.backward()
    report = GradCheckReport(tol=tol)
    for name, t in inputs.items():
        n = t.data.size
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        num = numeric_grad(f, t, eps, idx)
        report.errors[name] = relative_error(analytic.reshape(-1)[idx], num)
    return report
