"""Weak-predictor branches: a convolutional trunk followed by one of four heads.

``Ba`` regresses a 2-vector and renders it as a Gaussian heatmap, ``Rh``
reshapes a wide dense layer into the heatmap, ``Fc`` upsamples the trunk
features with transposed convolutions and ``Ou`` takes the outer product
of two dense marginals.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Parameter

KINDS = ("Ba", "Rh", "Fc", "Ou")
EYES = ("left", "right", "both")
MASK_SIZE = 16


class ConfigError(ValueError):
    """Invalid or geometrically impossible model configuration."""


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class BranchConfig:
    kind: str
    eyes: str = "both"
    crop_size: tuple = (128, 128)
    heatmap_size: int = 128
    conv_channels: list = field(default_factory=lambda: [16, 32, 64])
    fc_widths: list = field(default_factory=lambda: [256])
    up_channels: list | None = None
    gaussian_sigma: float = 0.05
    gaussian_scale: float = 50.0

    def __post_init__(self):
        self.crop_size = tuple(int(v) for v in self.crop_size)
        self.conv_channels = [int(c) for c in self.conv_channels]
        self.fc_widths = [int(c) for c in self.fc_widths]
        if self.up_channels is not None:
            self.up_channels = [int(c) for c in self.up_channels]

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown branch kind {self.kind!r}; expected one of {KINDS}")
        if self.eyes not in EYES:
            raise ConfigError(f"unknown eyes option {self.eyes!r}; expected one of {EYES}")
        s = self.heatmap_size
        if s < 8 or not _is_pow2(s):
            raise ConfigError(f"heatmap_size must be a power of two >= 8, got {s}")
        if self.kind == "Fc" and s < MASK_SIZE:
            raise ConfigError(f"Fc branch cannot upsample 16x16 features to {s}x{s}")
        if self.kind == "Ba" and self.gaussian_sigma <= 0:
            raise ConfigError("gaussian_sigma must be positive")
        if not self.conv_channels:
            raise ConfigError("conv_channels must list at least one layer")
        trunk_strides(self.input_size, len(self.conv_channels))
        if self.kind == "Fc":
            n_up = int(math.log2(s // MASK_SIZE))
            if self.up_channels is not None and len(self.up_channels) != n_up:
                raise ConfigError(f"Fc with heatmap {s} needs {n_up} up_channels entries, got {len(self.up_channels)}")
        return self

    @property
    def input_size(self):
        h, w = self.crop_size
        return (h, 2 * w) if self.eyes == "both" else (h, w)

    def to_dict(self):
        d = asdict(self)
        d["crop_size"] = list(self.crop_size)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def trunk_strides(input_size, n_layers):
    """Per-layer (sh, sw) strides that bring ``input_size`` down to 16x16."""
    per_axis = []
    for size in input_size:
        if size % MASK_SIZE or not _is_pow2(size // MASK_SIZE):
            raise ConfigError(f"crop extent {size} is not 16 times a power of two")
        halvings = int(math.log2(size // MASK_SIZE))
        base, extra = divmod(halvings, n_layers)
        per_axis.append([2 ** (base + (1 if i < extra else 0)) for i in range(n_layers)])
    return list(zip(*per_axis))


def _trunc_normal(rng, shape, std):
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2
    while bad.any():
        z[bad] = rng.standard_normal(bad.sum())
        bad = np.abs(z) > 2
    return z * std


class WeakPredictor:
    """One configured branch with its parameters and batch-norm statistics."""

    def __init__(self, config, index=0, rng_seed=0):
        self.config = config.validate()
        self.index = index
        self.params = {}
        self.bn = {}
        self.forward_calls = 0
        self._rng = np.random.default_rng(rng_seed)
        self._build()
        del self._rng

    # -- construction -------------------------------------------------------
    @property
    def prefix(self):
        return f"branch{self.index}"

    def _param(self, name, value):
        full = f"{self.prefix}/{name}"
        self.params[full] = Parameter(value, name=full)
        return self.params[full]

    def _conv(self, name, c_out, c_in, k):
        fan_in = c_in * k * k
        self._param(f"{name}/weight", _trunc_normal(self._rng, (c_out, c_in, k, k), math.sqrt(2.0 / fan_in)))
        self._param(f"{name}/bias", np.zeros(c_out))

    def _deconv(self, name, c_in, c_out, k, stride):
        # each output pixel receives c_in * (k / stride)^2 contributions
        fan_in = c_in * (k // stride) ** 2
        self._param(f"{name}/weight", _trunc_normal(self._rng, (c_in, c_out, k, k), math.sqrt(2.0 / fan_in)))
        self._param(f"{name}/bias", np.zeros(c_out))

    def _dense(self, name, n_out, n_in, gain=2.0):
        self._param(f"{name}/weight", _trunc_normal(self._rng, (n_out, n_in), math.sqrt(gain / n_in)))
        self._param(f"{name}/bias", np.zeros(n_out))

    def _bn(self, name, c):
        self._param(f"{name}/gamma", np.ones(c))
        self._param(f"{name}/beta", np.zeros(c))
        self.bn[f"{self.prefix}/{name}"] = BatchNormState(c)

    def _build(self):
        cfg = self.config
        self.strides = trunk_strides(cfg.input_size, len(cfg.conv_channels))
        c_in = 3
        for i, c in enumerate(cfg.conv_channels):
            self._conv(f"conv{i}", c, c_in, 3)
            self._bn(f"bn{i}", c)
            c_in = c
        feat_c = c_in + 1  # position mask channel
        s = cfg.heatmap_size
        if cfg.kind == "Fc":
            n_up = int(math.log2(s // MASK_SIZE))
            widths = cfg.up_channels
            if widths is None:
                widths = [max(c_in // 2 ** (i + 1), 4) for i in range(n_up)]
            c = feat_c
            for i, w in enumerate(widths):
                self._deconv(f"up{i}", c, w, 4, 2)
                self._bn(f"upbn{i}", w)
                c = w
            self._conv("head", 1, c, 1)
            return
        n = feat_c * MASK_SIZE * MASK_SIZE
        for i, w in enumerate(cfg.fc_widths):
            self._dense(f"fc{i}", w, n)
            n = w
        if cfg.kind == "Ba":
            self._dense("out", 2, n, gain=1.0)
        elif cfg.kind == "Rh":
            self._dense("out", s * s, n, gain=1.0)
        else:
            self._dense("out_a", s, n, gain=1.0)
            self._dense("out_b", s, n, gain=1.0)

    # -- forward ------------------------------------------------------------
    def p(self, name):
        return self.params[f"{self.prefix}/{name}"]

    def select_input(self, batch):
        cfg = self.config
        if cfg.eyes == "left":
            x = batch.left
        elif cfg.eyes == "right":
            x = batch.right
        else:
            x = np.concatenate([batch.left, batch.right], axis=3)
        if x.shape[2:] != cfg.input_size:
            raise T.ShapeError(f"{self.prefix}: expected input {cfg.input_size}, got {x.shape[2:]}")
        return x

    def features(self, batch, training):
        x = T.Tensor(self.select_input(batch))
        for i, stride in enumerate(self.strides):
            x = T.conv2d(x, self.p(f"conv{i}/weight"), self.p(f"conv{i}/bias"), stride=stride, pad=1)
            x = T.batch_norm(x, self.p(f"bn{i}/gamma"), self.p(f"bn{i}/beta"), self.bn[f"{self.prefix}/bn{i}"], training)
            x = T.relu(x)
        return T.concat_channels(x, T.Tensor(batch.mask))

    def forward(self, batch, mode="train"):
        """Raw (pre-softmax) heatmaps of shape (B, S, S)."""
        training = mode == "train"
        self.forward_calls += 1
        cfg = self.config
        s = cfg.heatmap_size
        feat = self.features(batch, training)
        nb = feat.shape[0]
        if cfg.kind == "Fc":
            x = feat
            i = 0
            while f"{self.prefix}/up{i}/weight" in self.params:
                x = T.transposed_conv2d(x, self.p(f"up{i}/weight"), self.p(f"up{i}/bias"), stride=2, pad=1)
                x = T.batch_norm(x, self.p(f"upbn{i}/gamma"), self.p(f"upbn{i}/beta"), self.bn[f"{self.prefix}/upbn{i}"], training)
                x = T.relu(x)
                i += 1
            x = T.conv2d(x, self.p("head/weight"), self.p("head/bias"))
            return T.reshape(x, (nb, s, s))
        x = T.reshape(feat, (nb, -1))
        for i in range(len(cfg.fc_widths)):
            x = T.relu(T.dense(x, self.p(f"fc{i}/weight"), self.p(f"fc{i}/bias")))
        if cfg.kind == "Ba":
            coords = T.dense(x, self.p("out/weight"), self.p("out/bias"))
            return coords_to_gaussian_heatmap(coords, s, cfg.gaussian_sigma, cfg.gaussian_scale)
        if cfg.kind == "Rh":
            return T.reshape(T.dense(x, self.p("out/weight"), self.p("out/bias")), (nb, s, s))
        a = T.dense(x, self.p("out_a/weight"), self.p("out_a/bias"))
        b = T.dense(x, self.p("out_b/weight"), self.p("out_b/bias"))
        return T.outer_product(a, b)

    __call__ = forward

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def head_parameters(self):
        """Parameter count excluding the shared-design convolutional trunk."""
        trunk = {f"{self.prefix}/{k}" for i in range(len(self.config.conv_channels)) for k in
                 (f"conv{i}/weight", f"conv{i}/bias", f"bn{i}/gamma", f"bn{i}/beta")}
        return sum(p.size for name, p in self.params.items() if name not in trunk)


def build_branch(config, rng_seed=0, index=0):
    return WeakPredictor(config, index=index, rng_seed=rng_seed)


def coords_to_gaussian_heatmap(coords, size, sigma, scale=1.0):
    """Render normalised (u, v) rows of ``coords`` as ``scale`` times an isotropic Gaussian.

    The Gaussian is separable, so it is built as the outer product of two
    1-D profiles and stays differentiable w.r.t. the coordinates.
    """
    coords = coords if isinstance(coords, T.Tensor) else T.Tensor(np.atleast_2d(coords))
    grid = T.pixel_grid(size)[None, :]
    nb = coords.shape[0]
    u = T.reshape(coords[:, 0], (nb, 1))
    v = T.reshape(coords[:, 1], (nb, 1))
    k = -1.0 / (2.0 * sigma * sigma)
    gx = T.exp(T.square(u - grid) * k)
    gy = T.exp(T.square(v - grid) * k)
    return T.outer_product(gx * scale, gy)
