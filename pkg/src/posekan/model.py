"""The PoseKAN network.

Layout (``F`` = embed_dim)::

    X (J x 2) -> start unit -> X~ (J x F)
              -> blocks: H + GELU(tail(LayerNorm(unit_5(...unit_1(H)))))
              -> GRN -> end unit -> Y (J x 3)

Every unit computes ``KAN(P H + X~)``, where ``P`` is the two-hop
propagation matrix and ``X~`` the start-unit output (the start unit itself
injects the raw 2D input). With ``irc=False`` the injected term is dropped
everywhere.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import BadConfigError, ShapeMismatchError, StaleCacheError
from .graph import propagation_matrix
from .kan import kan_init
from .nn import GRN, LayerNorm, dropout_backward, dropout_forward, gelu, gelu_grad


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 240
    scaling: float = 0.2
    grid_size: int = 5
    order: int = 3
    dropout: float = 0.2
    blocks: int = 4
    stack_depth: int = 5
    irc: bool = True
    seed: int = 0
    domain_lo: float = -1.0
    domain_hi: float = 1.0

    def validate(self):
        checks = [
            (self.embed_dim >= 1, "embed_dim", "must be >= 1"),
            (0.0 < self.scaling < 1.0, "s", "must lie in (0, 1)"),
            (self.grid_size >= 1, "grid_size", "must be >= 1"),
            (self.order >= 0, "order", "must be >= 0"),
            (0.0 <= self.dropout < 1.0, "dropout", "must lie in [0, 1)"),
            (self.blocks >= 0, "blocks", "must be >= 0"),
            (self.stack_depth >= 0, "stack_depth", "must be >= 0"),
            (self.seed >= 0, "seed", "must be >= 0"),
            (self.domain_lo < self.domain_hi, "domain_lo", "must be below domain_hi"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise BadConfigError(f"{key}={getattr(self, key, None)!r}: {msg}")
        return self


class PoseKanUnit:
    """One propagation + KAN step followed by (optional) dropout."""

    def __init__(self, kan, uses_irc, dropout_rate, layer_id):
        self.kan = kan
        self.uses_irc = uses_irc
        self.dropout_rate = dropout_rate
        self.layer_id = layer_id

    def forward(self, P, H, X_inj, train=False, dropout_key=None):
        G = P.apply(H)
        if self.uses_irc:
            G = G + X_inj
        y, kcache = self.kan.forward(G)
        rng = None
        if train and self.dropout_rate > 0.0:
            rng = np.random.default_rng([*dropout_key, self.layer_id])
        y, mask = dropout_forward(y, self.dropout_rate, train, rng)
        return y, (kcache, mask)

    def backward(self, P, cache, upstream):
        """Returns (d/dH, d/dX_inj or None)."""
        kcache, mask = cache
        dG = self.kan.backward(kcache, dropout_backward(mask, upstream))
        # P is symmetric, so P^T dG is another right-to-left application
        return P.apply(dG), (dG if self.uses_irc else None)


class ResidualBlock:
    def __init__(self, units, norm, tail):
        self.units = units
        self.norm = norm
        self.tail = tail

    def forward(self, P, H, X_inj, train=False, dropout_key=None):
        caches = []
        h = H
        for unit in self.units:
            h, c = unit.forward(P, h, X_inj, train, dropout_key)
            caches.append(c)
        n, ncache = self.norm.forward(h)
        t, tcache = self.tail.forward(P, n, X_inj, train, dropout_key)
        return H + gelu(t), (caches, ncache, tcache, t)

    def backward(self, P, cache, upstream):
        caches, ncache, tcache, t = cache
        dn, dx = self.tail.backward(P, tcache, upstream * gelu_grad(t))
        dX = dx if dx is not None else 0.0
        dh = self.norm.backward(ncache, dn)
        for unit, c in zip(reversed(self.units), reversed(caches)):
            dh, dx = unit.backward(P, c, dh)
            if dx is not None:
                dX = dX + dx
        return upstream + dh, dX


class PoseKanModel:
    in_dim = 2
    out_dim = 3

    def __init__(self, graph, config=None):
        config = (config or ModelConfig()).validate()
        self.graph = graph
        self.config = config
        self.P = propagation_matrix(graph, config.scaling)
        F = config.embed_dim
        ids = iter(range(1_000_000))

        def unit(i, o, rate):
            lid = next(ids)
            kan = kan_init(
                i, o, config.grid_size, config.order,
                seed=[config.seed, lid], domain=(config.domain_lo, config.domain_hi),
            )
            return PoseKanUnit(kan, config.irc, rate, lid)

        self.start = unit(self.in_dim, F, config.dropout)
        self.blocks = [
            ResidualBlock(
                [unit(F, F, config.dropout) for _ in range(config.stack_depth)],
                LayerNorm(F),
                unit(F, F, config.dropout),
            )
            for _ in range(config.blocks)
        ]
        self.grn = GRN(F)
        # no dropout on the regression output
        self.end = unit(F, self.out_dim, 0.0)

    # -- parameters --------------------------------------------------------

    def _components(self):
        yield "start.kan", self.start.kan
        for b, block in enumerate(self.blocks):
            for u, un in enumerate(block.units):
                yield f"blocks.{b}.units.{u}.kan", un.kan
            yield f"blocks.{b}.norm", block.norm
            yield f"blocks.{b}.tail.kan", block.tail.kan
        yield "grn", self.grn
        yield "end.kan", self.end.kan

    def params(self):
        """Ordered name -> array mapping (live views, declaration order)."""
        return {
            f"{prefix}.{name}": arr
            for prefix, comp in self._components()
            for name, arr in comp.params().items()
        }

    @property
    def grads(self):
        return {
            f"{prefix}.{name}": comp.grads[name]
            for prefix, comp in self._components()
            for name in comp.param_names
        }

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    @property
    def parameter_count(self):
        return sum(p.size for p in self.params().values())

    # -- forward / backward ------------------------------------------------

    def _check_input(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim < 2 or X.shape[-2:] != (self.graph.joint_count, self.in_dim):
            raise ShapeMismatchError(
                f"expected (..., {self.graph.joint_count}, {self.in_dim}) input, got {X.shape}"
            )
        return X

    def embed(self, X, train=False, dropout_key=None):
        X = self._check_input(X)
        return self.start.forward(self.P, X, X, train, dropout_key)

    def embed_backward(self, cache, dXt):
        dX, dinj = self.start.backward(self.P, cache, dXt)
        return dX + dinj if dinj is not None else dX

    def trunk(self, Xt, train=False, dropout_key=None):
        """Everything after the start unit, as a function of ``X~``."""
        h = Xt
        bcaches = []
        for block in self.blocks:
            h, c = block.forward(self.P, h, Xt, train, dropout_key)
            bcaches.append(c)
        g, gcache = self.grn.forward(h)
        y, ecache = self.end.forward(self.P, g, Xt, train, dropout_key)
        return y, (bcaches, gcache, ecache, y.shape)

    def trunk_backward(self, cache, dY):
        """Returns d/dX~, summed over the direct path and every injection site."""
        bcaches, gcache, ecache, yshape = cache
        if np.shape(dY) != yshape:
            raise StaleCacheError(f"upstream {np.shape(dY)} vs cached output {yshape}")
        dg, dXt = self.end.backward(self.P, ecache, dY)
        dXt = 0.0 if dXt is None else dXt
        dh = self.grn.backward(gcache, dg)
        for block, c in zip(reversed(self.blocks), reversed(bcaches)):
            dh, dx = block.backward(self.P, c, dh)
            dXt = dXt + dx
        return dh + dXt

    def forward(self, X, train=False, dropout_key=None):
        if train and dropout_key is None:
            dropout_key = (self.config.seed, 0)
        Xt, scache = self.embed(X, train, dropout_key)
        y, tcache = self.trunk(Xt, train, dropout_key)
        return y, (scache, tcache)

    def backward(self, cache, dY):
        """Accumulate parameter gradients; returns d/dX."""
        scache, tcache = cache
        return self.embed_backward(scache, self.trunk_backward(tcache, dY))

    def predict(self, X, batch_size=256):
        X = self._check_input(X)
        if X.ndim == 2:
            return self.forward(X)[0]
        out = [self.forward(X[i : i + batch_size])[0] for i in range(0, len(X), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros(X.shape[:-1] + (3,))

    def config_dict(self):
        return asdict(self.config)


def build_model(graph, config=None, **overrides):
    cfg = config or ModelConfig()
    if overrides:
        cfg = ModelConfig(**{**asdict(cfg), **overrides})
    return PoseKanModel(graph, cfg)


def closed_form_parameter_count(config):
    nb2 = config.grid_size + config.order + 2
    F = config.embed_dim
    kan = 2 * F + config.blocks * (config.stack_depth + 1) * F * F + F * 3
    return kan * nb2 + 2 * F * (config.blocks + 1)


def model_forward(model, X, train=False, dropout_key=None):
    return model.forward(X, train, dropout_key)


def model_backward(model, cache, dY):
    return model.backward(cache, dY)
