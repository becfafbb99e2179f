"""Patch-based feature extraction for one node window.

Shape chain for ``R`` stacked node windows::

    [R, L] -> patchify -> [R, N, W] -> embed -> [R, N, D]
           -> depthwise -> [R, N, D] -> pointwise -> [R, A, D] -> flatten -> [R, A*D]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hierflow import autograd as ag
from hierflow.autograd import ParameterStore, Tensor, uniform_init
from hierflow.errors import ConfigError, DimensionError


@dataclass(frozen=True)
class PatchConfig:
    W: int = 36
    S: int = 8
    D: int = 72
    Q: int = 8
    A: int = 8

    def validate(self, L: int) -> None:
        if self.S < 1 or self.W < 1 or self.D < 1 or self.A < 1 or self.Q < 1:
            raise ConfigError(f"patch sizes must be positive: {self}")
        if self.W > L:
            raise ConfigError(f"window W={self.W} exceeds lookback L={L}")
        if self.Q > self.D:
            raise ConfigError(f"depthwise kernel Q={self.Q} exceeds embedding width D={self.D}")

    def n_patches(self, L: int) -> int:
        return (L - self.W) // self.S + 1

    def features(self) -> int:
        return self.A * self.D


def patchify(x, cfg: PatchConfig) -> np.ndarray:
    """Cut ``[..., L]`` windows into ``[..., N, W]`` patches; leftover tail slots are dropped."""
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[-1]
    if L < cfg.W:
        raise ConfigError(f"lookback L={L} is shorter than window W={cfg.W}")
    n = cfg.n_patches(L)
    idx = np.arange(n)[:, None] * cfg.S + np.arange(cfg.W)[None, :]
    return x[..., idx]


def embed(patches, weight, bias) -> Tensor:
    """Apply one affine map to every patch row: ``[R, N, W] -> [R, N, D]``."""
    p = ag.constant(patches)
    if p.ndim == 2:
        p = ag.reshape(p, (1,) + p.shape)
    R, N, W = p.shape
    if weight.shape[0] != W:
        raise DimensionError(f"embedding weight {list(weight.shape)} does not take patches of width {W}")
    flat = ag.linear(ag.reshape(p, (R * N, W)), weight, bias)
    return ag.reshape(flat, (R, N, weight.shape[1]))


def depthwise_conv(x, kernel) -> Tensor:
    """Shared ``1 x Q`` kernel slid along the embedding axis of every patch."""
    x, kernel = ag.constant(x), ag.constant(kernel)
    if kernel.shape[0] > x.shape[-1]:
        raise ConfigError(f"depthwise kernel Q={kernel.shape[0]} exceeds embedding width {x.shape[-1]}")
    return ag.conv1d_same(x, kernel)


def depthwise(x, kernel) -> Tensor:
    return ag.relu(depthwise_conv(x, kernel))


def pointwise_conv(x, kernels, bias=None) -> Tensor:
    """Mix the ``N`` patch rows into ``A`` channels: ``[R, N, D] -> [R, A, D]``."""
    x, kernels = ag.constant(x), ag.constant(kernels)
    R, N, D = x.shape
    A = kernels.shape[0]
    if kernels.shape[1] != N:
        raise DimensionError(f"pointwise kernels {list(kernels.shape)} expect {kernels.shape[1]} patches, got {N}")
    xt = ag.reshape(ag.transpose(x, (0, 2, 1)), (R * D, N))
    mixed = ag.linear(xt, ag.transpose(kernels), bias)
    return ag.transpose(ag.reshape(mixed, (R, D, A)), (0, 2, 1))


def pointwise(x, kernels, bias=None) -> Tensor:
    return ag.relu(pointwise_conv(x, kernels, bias))


class PatchEncoder:
    """Encoder parameters for one graph layer, registered under ``prefix``."""

    def __init__(self, store: ParameterStore, prefix: str, cfg: PatchConfig, L: int,
                 rng: np.random.Generator):
        cfg.validate(L)
        self.cfg = cfg
        self.L = L
        N = cfg.n_patches(L)
        self.embed_w = store.add(f"{prefix}.embed.weight", uniform_init(rng, (cfg.W, cfg.D), cfg.W))
        self.embed_b = store.add(f"{prefix}.embed.bias", uniform_init(rng, (cfg.D,), cfg.W))
        self.depth_k = store.add(f"{prefix}.depthwise.kernel", uniform_init(rng, (cfg.Q,), cfg.Q))
        self.point_k = store.add(f"{prefix}.pointwise.kernel", uniform_init(rng, (cfg.A, N), N))
        self.point_b = store.add(f"{prefix}.pointwise.bias", uniform_init(rng, (cfg.A,), N))

    def __call__(self, windows) -> Tensor:
        """``[R, L]`` raw (normalized) windows -> ``[R, A*D]`` node features."""
        w = np.asarray(windows, dtype=np.float64)
        if w.ndim == 1:
            w = w[None, :]
        if w.shape[1] != self.L:
            raise DimensionError(f"encoder expects windows of length {self.L}, got {w.shape[1]}")
        x = embed(patchify(w, self.cfg), self.embed_w, self.embed_b)
        x = depthwise(x, self.depth_k)
        x = pointwise(x, self.point_k, self.point_b)
        return ag.flatten(x)
