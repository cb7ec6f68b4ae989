"""Non-KAN building blocks with hand-written backward passes.

Each op works on arrays whose last two axes are (joints, features); any
leading axes are treated as a batch.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ShapeMismatchError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_dim(H, dim, what):
    if H.shape[-1] != dim:
        raise ShapeMismatchError(f"{what}: feature axis {H.shape[-1]} != {dim}")


class LayerNorm:
    """Per-joint normalization over the feature axis."""

    param_names = ("scale", "shift")

    def __init__(self, dim, epsilon=1e-5):
        self.dim = int(dim)
        self.epsilon = float(epsilon)
        self.scale = np.ones(dim)
        self.shift = np.zeros(dim)
        self.grads = {"scale": np.zeros(dim), "shift": np.zeros(dim)}

    def params(self):
        return {"scale": self.scale, "shift": self.shift}

    def forward(self, H):
        H = np.asarray(H, dtype=np.float64)
        _check_dim(H, self.dim, "layernorm")
        mu = H.mean(axis=-1, keepdims=True)
        xc = H - mu
        inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.epsilon)
        xhat = xc * inv_std
        return xhat * self.scale + self.shift, (xhat, inv_std)

    def backward(self, cache, upstream):
        xhat, inv_std = cache
        lead = tuple(range(upstream.ndim - 1))
        self.grads["scale"] += (upstream * xhat).sum(axis=lead)
        self.grads["shift"] += upstream.sum(axis=lead)
        g = upstream * self.scale
        return inv_std * (
            g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)
        )


def layernorm_forward(params, H):
    return params.forward(H)


def gelu(x):
    """Exact GELU ``x * Phi(x)``."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


class GRN:
    """Global response normalization over joints.

    For each channel ``f`` the L2 norm over joints ``g_f`` is divided by
    the channel-mean norm; the output is
    ``gamma * H * n + beta + H``. With ``gamma = beta = 0`` (the
    initial state) it is the identity.
    """

    param_names = ("gamma", "beta")

    def __init__(self, dim, epsilon=1e-6):
        self.dim = int(dim)
        self.epsilon = float(epsilon)
        self.gamma = np.zeros(dim)
        self.beta = np.zeros(dim)
        self.grads = {"gamma": np.zeros(dim), "beta": np.zeros(dim)}

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, H):
        H = np.asarray(H, dtype=np.float64)
        if H.ndim < 2:
            raise ShapeMismatchError("grn needs a (joints, features) matrix")
        _check_dim(H, self.dim, "grn")
        g = np.sqrt((H * H).sum(axis=-2, keepdims=True))
        denom = g.mean(axis=-1, keepdims=True) + self.epsilon
        n = g / denom
        out = self.gamma * (H * n) + self.beta + H
        return out, (H, g, denom, n)

    def backward(self, cache, upstream):
        H, g, denom, n = cache
        lead = tuple(range(upstream.ndim - 1))
        self.grads["gamma"] += (upstream * H * n).sum(axis=lead)
        self.grads["beta"] += upstream.sum(axis=lead)
        dH = upstream * (1.0 + self.gamma * n)
        dn = (upstream * self.gamma * H).sum(axis=-2, keepdims=True)
        dg = dn / denom - (dn * g).sum(axis=-1, keepdims=True) / (denom**2 * self.dim)
        safe = np.where(g > 0.0, g, 1.0)
        dH += np.where(g > 0.0, dg / safe, 0.0) * H
        return dH


def grn_forward(params, H):
    return params.forward(H)


def dropout_forward(H, rate, train, rng):
    """Inverted dropout. Returns ``(output, mask)``; ``mask`` is ``None`` in
    eval mode or when ``rate == 0``."""
    H = np.asarray(H, dtype=np.float64)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return H, None
    mask = (rng.random(H.shape) >= rate) / (1.0 - rate)
    return H * mask, mask


def dropout_backward(mask, upstream):
    return upstream if mask is None else upstream * mask
