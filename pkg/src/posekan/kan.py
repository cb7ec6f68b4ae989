"""B-spline bases and the Kolmogorov-Arnold layer.

A KAN layer holds one learnable univariate function per (output, input)
pair::

    phi_qp(x) = base_weight[q, p] * silu(x)
              + spline_weight[q, p] * sum_i spline_coeffs[q, p, i] * B_i(x)

and computes ``y_q = sum_p phi_qp(x_p)``. The same function matrix is
applied to every row (joint) of the input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import (
    BadDimensionsError,
    IndexOutOfRangeError,
    NonFiniteInputError,
    ShapeMismatchError,
    StaleCacheError,
)


@dataclass(frozen=True)
class SplineGrid:
    """Uniform knot grid of ``grid_size`` intervals over ``[lo, hi]``,
    padded with ``order`` knots of the same spacing on each side."""

    grid_size: int = 5
    order: int = 3
    domain_lo: float = -1.0
    domain_hi: float = 1.0

    def __post_init__(self):
        if self.grid_size < 1 or self.order < 0:
            raise BadDimensionsError(
                f"need grid_size >= 1 and order >= 0, got {self.grid_size}, {self.order}"
            )
        if not self.domain_lo < self.domain_hi:
            raise BadDimensionsError("domain_lo must be below domain_hi")

    @property
    def spacing(self):
        return (self.domain_hi - self.domain_lo) / self.grid_size

    @property
    def knots(self):
        idx = np.arange(-self.order, self.grid_size + self.order + 1)
        return self.domain_lo + idx * self.spacing

    @property
    def n_basis(self):
        return self.grid_size + self.order


def local_basis(grid, x):
    """Nonzero bases at ``x`` in compact form.

    Uses the triangular form of the Cox-de Boor recursion: on a uniform
    grid only the ``k + 1`` bases covering the knot span of ``x`` can be
    nonzero, and every recursion denominator reduces to ``d * spacing``.

    Returns ``(index, valid, values, derivs)``, each of shape
    ``(k+1,) + x.shape`` (slot axis first keeps the elementwise work on long
    contiguous rows): basis indices clipped into range, a mask of slots whose
    true index lies in ``[0, G+k)``, values and x-derivatives. Invalid slots
    carry zero value and derivative.
    """
    x = np.asarray(x, dtype=np.float64)
    k, G, h = grid.order, grid.grid_size, grid.spacing
    n_spans = G + 2 * k
    y = (x - grid.domain_lo) * (1.0 / h) + k
    inside = (y >= 0.0) & (y < n_spans)
    span = np.floor(y)
    np.clip(span, 0, n_spans - 1, out=span)
    tau = y - span
    span = span.astype(np.intp)

    # row r of level d holds the basis with index span - d + r
    N = np.empty((k + 1,) + x.shape)
    N[0] = inside
    prev = N[:1]
    for d in range(1, k + 1):
        r = np.arange(d).reshape((d,) + (1,) * x.ndim)
        scaled = N[:d] * (1.0 / d)
        if d == k:
            prev = N[:k].copy()
        right = (r + 1 - tau) * scaled
        left = (tau + (d - 1 - r)) * scaled
        N[d] = left[-1]
        N[1:d] = left[:-1] + right[1:]
        N[0] = right[0]
    dN = np.zeros_like(N)
    if k > 0:
        dN[1:] += prev
        dN[:k] -= prev
        dN *= 1.0 / h

    index = span + np.arange(-k, 1).reshape((k + 1,) + (1,) * x.ndim)
    valid = (index >= 0) & (index < grid.n_basis)
    N *= valid
    dN *= valid
    np.clip(index, 0, grid.n_basis - 1, out=index)
    return index, valid, N, dN


def flat_index(index, n_basis, valid=None):
    """Positions of compact slots inside a flattened dense ``(..., n_basis)``
    array; invalid slots point one past the end."""
    n_points = index[0].size
    flat = index.reshape(len(index), -1) + np.arange(n_points) * n_basis
    if valid is not None:
        flat = np.where(valid.reshape(len(index), -1), flat, n_points * n_basis)
    return flat


def densify(index, values, n_basis, valid=None):
    """Scatter compact basis values into a dense ``x.shape + (n_basis,)``
    array. Slots not flagged in ``valid`` land in a discarded extra cell."""
    buf = np.zeros(index[0].size * n_basis + 1)
    buf[flat_index(index, n_basis, valid)] = values.reshape(len(index), -1)
    return buf[:-1].reshape(index.shape[1:] + (n_basis,))


def basis_and_derivative(grid, x):
    """Dense basis values and x-derivatives, shape ``x.shape + (G+k,)``."""
    x = np.asarray(x, dtype=np.float64)
    index, valid, values, derivs = local_basis(grid, x.reshape(-1))
    nb = grid.n_basis
    shape = x.shape + (nb,)
    return (densify(index, values, nb, valid).reshape(shape),
            densify(index, derivs, nb, valid).reshape(shape))


def bspline_basis(grid, x):
    """Values of the ``G + k`` basis functions at ``x`` (scalar or array)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInputError("bspline_basis received a non-finite input")
    return basis_and_derivative(grid, x)[0]


def silu(x):
    """``x * sigmoid(x)``; ``expit`` keeps large |x| from overflowing."""
    return np.asarray(x, dtype=np.float64) * expit(x)


def silu_grad(x):
    sig = expit(x)
    return sig * (1.0 + x * (1.0 - sig))


class KanLayer:
    """Matrix of learnable edge functions mapping ``in_dim`` to ``out_dim``
    features, shared over all leading (batch, joint) axes."""

    param_names = ("spline_coeffs", "base_weight", "spline_weight")

    def __init__(self, in_dim, out_dim, grid=None):
        if in_dim < 1 or out_dim < 1:
            raise BadDimensionsError(f"bad layer dims {in_dim} -> {out_dim}")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.grid = grid if grid is not None else SplineGrid()
        nb = self.grid.n_basis
        self.spline_coeffs = np.zeros((out_dim, in_dim, nb))
        self.base_weight = np.zeros((out_dim, in_dim))
        self.spline_weight = np.ones((out_dim, in_dim))
        self.grads = {n: np.zeros_like(getattr(self, n)) for n in self.param_names}

    def params(self):
        return {n: getattr(self, n) for n in self.param_names}

    @property
    def parameter_count(self):
        return self.out_dim * self.in_dim * (self.grid.n_basis + 2)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def forward(self, H):
        H = np.asarray(H, dtype=np.float64)
        if H.ndim < 1 or H.shape[-1] != self.in_dim:
            raise ShapeMismatchError(
                f"input last axis {H.shape[-1:]} does not match in_dim={self.in_dim}"
            )
        lead = H.shape[:-1]
        x = H.reshape(-1, self.in_dim)
        index, valid, values, derivs = local_basis(self.grid, x)
        nb = self.grid.n_basis
        slots = flat_index(index, nb, valid)
        buf = np.zeros(x.size * nb + 1)
        buf[slots] = values.reshape(len(values), -1)
        B = buf[:-1].reshape(len(x), -1)
        s = silu(x)
        coef = (self.spline_weight[:, :, None] * self.spline_coeffs).reshape(self.out_dim, -1)
        y = s @ self.base_weight.T + B @ coef.T
        cache = (lead, x, s, B, slots, derivs, coef)
        return y.reshape(lead + (self.out_dim,)), cache

    def backward(self, cache, upstream):
        """Accumulate parameter gradients and return d(loss)/d(input)."""
        lead, x, s, B, slots, derivs, coef = cache
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != lead + (self.out_dim,):
            raise StaleCacheError(
                f"upstream shape {upstream.shape} does not match cached "
                f"forward output {lead + (self.out_dim,)}"
            )
        dy = upstream.reshape(-1, self.out_dim)
        M, nb = len(x), self.grid.n_basis
        self.grads["base_weight"] += dy.T @ s
        d_coef = (dy.T @ B).reshape(self.out_dim, self.in_dim, nb)
        self.grads["spline_coeffs"] += d_coef * self.spline_weight[:, :, None]
        self.grads["spline_weight"] += np.einsum("qpi,qpi->qp", d_coef, self.spline_coeffs)
        dx = (dy @ self.base_weight) * silu_grad(x)
        ds = np.append((dy @ coef).ravel(), 0.0)
        dx += (ds[slots] * derivs.reshape(len(derivs), -1)).sum(axis=0).reshape(M, self.in_dim)
        return dx.reshape(lead + (self.in_dim,))

    def edge_activation(self, q, p, x):
        if not (0 <= q < self.out_dim and 0 <= p < self.in_dim):
            raise IndexOutOfRangeError(f"edge ({q}, {p}) outside {self.out_dim}x{self.in_dim}")
        spline = bspline_basis(self.grid, x) @ self.spline_coeffs[q, p]
        return self.base_weight[q, p] * silu(x) + self.spline_weight[q, p] * spline


def kan_init(in_dim, out_dim, grid_size=5, order=3, seed=0, domain=(-1.0, 1.0)):
    """Seeded initialization: uniform Glorot base weights, unit spline
    weights and small Gaussian spline coefficients (drawn in that order)."""
    grid = SplineGrid(grid_size, order, *domain)
    layer = KanLayer(in_dim, out_dim, grid)
    rng = np.random.default_rng(seed)
    bound = math.sqrt(6.0 / (in_dim + out_dim))
    layer.base_weight[...] = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    layer.spline_weight[...] = 1.0
    layer.spline_coeffs[...] = rng.normal(
        0.0, 0.1 / math.sqrt(grid.n_basis), size=layer.spline_coeffs.shape
    )
    return layer


def kan_forward(layer, H):
    return layer.forward(H)


def kan_backward(layer, cache, upstream):
    return layer.backward(cache, upstream)


def edge_activation(layer, q, p, x):
    return layer.edge_activation(q, p, x)
