"""Self-check suites behind ``posekan verify``.

Each suite returns a list of :class:`Check` rows; a suite passes when every
row does.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcheck import FunctionOp, grad_check
from .graph import build_graph, load_skeleton, verify_filter_identities
from .kan import SplineGrid, bspline_basis, kan_init
from .model import ModelConfig, PoseKanModel
from .nn import GRN, LayerNorm, gelu, gelu_grad
from .training import elastic_loss


@dataclass
class Check:
    suite: str
    name: str
    residual: float
    tol: float

    @property
    def passed(self):
        return bool(self.residual <= self.tol)

    def __str__(self):
        flag = "ok  " if self.passed else "FAIL"
        return f"{flag} {self.suite:<9s} {self.name:<44s} {self.residual:.3e} (tol {self.tol:.0e})"


def random_connected_graph(J, rng, extra_edges=None):
    """Random spanning tree plus a few random chords."""
    edges = [(int(rng.integers(0, j)), j) for j in range(1, J)]
    n_extra = rng.integers(0, J) if extra_edges is None else extra_edges
    for _ in range(int(n_extra)):
        i, j = rng.choice(J, size=2, replace=False)
        edges.append((int(i), int(j)))
    return build_graph(J, edges)


def filter_suite(n_graphs=50, scalings=None, seed=0, tol=1e-10):
    """Identity residuals, worst case over random graphs for each identity."""
    rng = np.random.default_rng(seed)
    scalings = np.linspace(0.05, 0.95, 10) if scalings is None else scalings
    graphs = [load_skeleton()] + [
        random_connected_graph(int(rng.integers(2, 13)), rng) for _ in range(n_graphs)
    ]
    worst = None
    for g in graphs:
        for s in scalings:
            res = [c.residual for c in verify_filter_identities(g, s, tol).checks]
            worst = res if worst is None else np.maximum(worst, res)
    names = [c.name for c in verify_filter_identities(graphs[0], 0.2).checks]
    return [Check("filters", n, float(r), tol) for n, r in zip(names, worst)]


def spline_suite(n_points=1000, seed=0, tol=1e-10):
    rng = np.random.default_rng(seed)
    rows = []
    for G in (3, 5, 8):
        for k in (1, 2, 3):
            grid = SplineGrid(G, k)
            x = rng.uniform(grid.domain_lo, grid.domain_hi, n_points)
            B = bspline_basis(grid, x)
            tag = f"G={G} k={k}"
            rows.append(Check("splines", f"partition of unity {tag}",
                              float(np.abs(B.sum(axis=1) - 1.0).max()), tol))
            rows.append(Check("splines", f"non-negativity {tag}",
                              float(max(0.0, -B.min())), 0.0))
            excess = int(max(0, (B > 0).sum(axis=1).max() - (k + 1)))
            rows.append(Check("splines", f"local support <= k+1 {tag}", float(excess), 0.0))
    return rows


class _LossOp:
    def __init__(self, Y, alpha):
        self.Y, self.alpha = Y, alpha

    def forward(self, Y_hat):
        loss, grad = elastic_loss(self.Y, Y_hat, self.alpha)
        return np.float64(loss), grad

    def backward(self, grad, upstream):
        return upstream * grad


class _GeluLinear:
    """``gelu(H @ W)``; exercises GELU inside a composite with parameters."""

    param_names = ("W",)

    def __init__(self, W):
        self.W = W
        self.grads = {"W": np.zeros_like(W)}

    def params(self):
        return {"W": self.W}

    def forward(self, H):
        Z = H @ self.W
        return gelu(Z), (H, Z)

    def backward(self, cache, upstream):
        H, Z = cache
        dZ = upstream * gelu_grad(Z)
        self.grads["W"] += H.T @ dZ
        return dZ @ self.W.T


def gradient_checks(seed=0, h=1e-5, tol=1e-4):
    """Ops and inputs for the finite-difference suite, as (name, op, inputs)."""
    rng = np.random.default_rng(seed)
    kan = kan_init(4, 3, 5, 3, seed=seed)
    kan.spline_weight[...] = rng.uniform(0.5, 1.5, kan.spline_weight.shape)
    ln = LayerNorm(6)
    ln.scale[...] = rng.normal(1.0, 0.3, 6)
    ln.shift[...] = rng.normal(0.0, 0.3, 6)
    grn = GRN(6)
    grn.gamma[...] = rng.normal(0.0, 0.5, 6)
    grn.beta[...] = rng.normal(0.0, 0.5, 6)
    Y = rng.normal(size=(2, 4, 3))
    Y_hat = Y + rng.choice([-1.0, 1.0], size=Y.shape) * rng.uniform(1e-2, 0.5, Y.shape)

    graph = random_connected_graph(5, np.random.default_rng(seed + 1), extra_edges=1)
    model = PoseKanModel(graph, ModelConfig(embed_dim=8, blocks=1, seed=seed))
    for comp in (model.grn, model.blocks[0].norm):
        for p in comp.params().values():
            p += rng.normal(0.0, 0.2, p.shape)

    return [
        ("kan_layer", kan, [rng.uniform(-1.2, 1.2, (3, 4))]),
        ("layernorm", ln, [rng.normal(size=(4, 6))]),
        ("grn", grn, [rng.normal(size=(4, 6))]),
        ("gelu", FunctionOp(gelu, gelu_grad), [rng.normal(size=(4, 6))]),
        ("gelu_composite", _GeluLinear(rng.normal(size=(6, 5))), [rng.normal(size=(4, 6))]),
        ("elastic_loss", _LossOp(Y, 0.03), [Y_hat]),
        ("model J=5 F=8 1 block", model, [rng.uniform(-0.8, 0.8, (2, 5, 2))]),
    ]


def gradient_suite(seed=0, h=1e-5, tol=1e-4):
    rows = []
    for name, op, inputs in gradient_checks(seed, h, tol):
        rep = grad_check(op, inputs, h=h, tol_rel=tol, seed=seed, name=name)
        rows.append(Check("gradients", name, rep.max_rel_error, tol))
    return rows


SUITES = {
    "filters": filter_suite,
    "splines": spline_suite,
    "gradients": gradient_suite,
}


def run_suites(names):
    rows = []
    for name in names:
        rows.extend(SUITES[name]())
    return rows
