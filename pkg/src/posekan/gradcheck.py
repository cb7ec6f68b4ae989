"""Central finite-difference checker for ops with hand-written backward.

An op exposes ``forward(*inputs) -> (out, cache)`` and
``backward(cache, upstream) -> input gradient(s)``. Ops with parameters
also expose ``params()`` (name -> array, mutated in place by the checker)
and a ``grads`` dict that backward accumulates into.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol_rel: float
    per_tensor: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_error <= self.tol_rel

    def __str__(self):
        flag = "ok  " if self.passed else "FAIL"
        return f"{flag} {self.name:<28s} max rel err {self.max_rel_error:.3e}"


class FunctionOp:
    """Wrap a parameter-free elementwise function and its derivative."""

    def __init__(self, f, df):
        self.f, self.df = f, df

    def forward(self, x):
        return self.f(x), x

    def backward(self, cache, upstream):
        return upstream * self.df(cache)


def rel_error(analytic, numeric, abs_floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, abs_floor)``."""
    diff = np.abs(analytic - numeric)
    return diff / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)


def grad_check(op, inputs, h=1e-5, tol_rel=1e-4, seed=0, name=None, abs_floor=1e-8):
    """Compare ``op``'s backward against central differences of
    ``sum(forward(*inputs) * R)`` for a fixed random projection ``R``.

    The difference quotient carries roughly ``eps * sum|out * R| / h`` of
    rounding error, so entries smaller than that divided by ``tol_rel``
    cannot be judged relatively; the floor is raised to that level.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    params = op.params() if hasattr(op, "params") else {}

    def scalar():
        out, _ = op.forward(*inputs)
        return float(np.sum(out * R))

    out, cache = op.forward(*inputs)
    R = np.random.default_rng(seed).standard_normal(np.shape(out))
    roundoff = np.finfo(np.float64).eps * float(np.abs(out * R).sum()) / h
    floor = max(abs_floor, roundoff / tol_rel)
    if params:
        for g in op.grads.values():
            g.fill(0.0)
    dinputs = op.backward(cache, R)
    if not isinstance(dinputs, (tuple, list)):
        dinputs = (dinputs,)

    targets = [(f"input{i}", x, np.asarray(d)) for i, (x, d) in enumerate(zip(inputs, dinputs))]
    targets += [(n, p, op.grads[n].copy()) for n, p in params.items()]

    per_tensor = {}
    for tname, arr, analytic in targets:
        numeric = np.empty(arr.shape)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar()
            flat[i] = orig - h
            fm = scalar()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        err = rel_error(analytic, numeric, floor)
        per_tensor[tname] = float(err.max()) if err.size else 0.0

    worst = max(per_tensor.values()) if per_tensor else 0.0
    return GradCheckReport(name or type(op).__name__, worst, tol_rel, per_tensor)
