"""Skeleton graph algebra: normalized adjacency, multi-hop propagation and
the rational spectral filter it is derived from.

All matrices are dense float64; skeletons have at most a few dozen joints.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import (
    IndexOutOfRangeError,
    IsolatedJointError,
    ParseError,
    ScalingOutOfRangeError,
    SelfLoopError,
    ShapeMismatchError,
    SingularFrequencyError,
)


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SkeletonGraph:
    joint_count: int
    edges: tuple
    adjacency: np.ndarray = field(repr=False)
    normalized_adjacency: np.ndarray = field(repr=False)
    laplacian: np.ndarray = field(repr=False)

    @property
    def degrees(self):
        return self.adjacency.sum(axis=1)


def build_graph(joint_count, edges):
    """Build a :class:`SkeletonGraph` from an undirected edge list.

    Duplicate edges (in either orientation) collapse to one.
    """
    J = int(joint_count)
    if J < 1:
        raise IndexOutOfRangeError(f"joint_count must be positive, got {joint_count}")
    edges = [tuple(int(v) for v in e) for e in edges]
    if not edges:
        raise IsolatedJointError("edge list is empty")
    A = np.zeros((J, J))
    canon = []
    for i, j in edges:
        if not (0 <= i < J and 0 <= j < J):
            raise IndexOutOfRangeError(f"edge ({i}, {j}) outside [0, {J})")
        if i == j:
            raise SelfLoopError(f"self-loop at joint {i}")
        key = (min(i, j), max(i, j))
        if A[i, j] == 0.0:
            canon.append(key)
        A[i, j] = A[j, i] = 1.0
    deg = A.sum(axis=1)
    isolated = np.flatnonzero(deg == 0)
    if isolated.size:
        raise IsolatedJointError(f"joint(s) {isolated.tolist()} have no edges")
    d = 1.0 / np.sqrt(deg)
    A_hat = d[:, None] * A * d[None, :]
    L = np.eye(J) - A_hat
    return SkeletonGraph(J, tuple(canon), _frozen(A), _frozen(A_hat), _frozen(L))


def _check_scaling(s):
    s = float(s)
    if not (0.0 <= s <= 1.0) or not np.isfinite(s):
        raise ScalingOutOfRangeError(f"scaling s={s} outside [0, 1]")
    return s


@dataclass(frozen=True)
class PropagationMatrix:
    """``P = (1 - s) A_hat + s A_hat^2`` plus the factor needed to apply it
    without forming ``A_hat^2``."""

    matrix: np.ndarray = field(repr=False)
    scaling: float
    normalized_adjacency: np.ndarray = field(repr=False)

    def apply(self, H):
        """``P @ H`` right-to-left. ``H`` may carry leading batch axes."""
        return _apply_two_hop(self.normalized_adjacency, self.scaling, H)


def propagation_matrix(graph, s):
    s = _check_scaling(s)
    A = graph.normalized_adjacency
    P = (1.0 - s) * A + s * (A @ A)
    return PropagationMatrix(_frozen(P), s, A)


def _apply_two_hop(A, s, H):
    H = np.asarray(H, dtype=np.float64)
    if H.ndim < 2 or H.shape[-2] != A.shape[0]:
        raise ShapeMismatchError(
            f"feature matrix with shape {H.shape} does not have {A.shape[0]} rows"
        )
    AH = np.matmul(A, H)
    return (1.0 - s) * AH + s * np.matmul(A, AH)


def apply_propagation(P, H, X):
    """Return ``P H + X`` computed as ``(1-s) A H + s A (A H) + X``."""
    H = np.asarray(H, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if H.shape != X.shape:
        raise ShapeMismatchError(f"H {H.shape} and X {X.shape} differ")
    return P.apply(H) + X


def fixed_point_step(graph, s, H, X):
    """One step ``((1-s) I + s A) A H + X`` of the filter's fixed-point
    iteration. The iteration matrix has spectral radius 1 on connected
    graphs, so only single steps are exposed."""
    s = _check_scaling(s)
    A = graph.normalized_adjacency
    H = np.asarray(H, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if H.shape != X.shape:
        raise ShapeMismatchError(f"H {H.shape} and X {X.shape} differ")
    if H.ndim < 2 or H.shape[-2] != graph.joint_count:
        raise ShapeMismatchError(f"H {H.shape} has wrong joint axis")
    AH = np.matmul(A, H)
    return (1.0 - s) * AH + s * np.matmul(A, AH) + X


@dataclass(frozen=True)
class SpectralFilter:
    scaling: float

    def __call__(self, lam):
        return spectral_response(self, lam)


def spectral_response(filt, lam, tol=1e-12):
    """Frequency response ``1 / ((1+s) lam - s lam^2)``."""
    s = float(filt.scaling)
    lam = float(lam)
    den = (1.0 + s) * lam - s * lam * lam
    if abs(den) <= tol:
        raise SingularFrequencyError(f"response is singular at lambda={lam} (s={s})")
    return 1.0 / den


@dataclass
class IdentityCheck:
    name: str
    residual: float
    passed: bool


@dataclass
class FilterReport:
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def max_residual(self):
        return max(c.residual for c in self.checks)


def verify_filter_identities(graph, s, tol=1e-10):
    """Check the algebra linking the Laplacian-domain filter to the
    propagation matrix, using an eigendecomposition as the oracle for the
    spectral identity."""
    s = _check_scaling(s)
    J = graph.joint_count
    I = np.eye(J)
    L = graph.laplacian
    A = graph.normalized_adjacency
    lhs = (I - s * L) @ (I - L)
    r1 = np.linalg.norm(lhs - (I - (1.0 + s) * L + s * (L @ L)), "fro")
    r2 = np.linalg.norm(lhs - ((1.0 - s) * I + s * A) @ A, "fro")
    P = propagation_matrix(graph, s).matrix
    mu, V = np.linalg.eigh(A)
    r3 = 0.0
    for k in range(J):
        v = V[:, k]
        expected = ((1.0 - s) * mu[k] + s * mu[k] ** 2) * v
        r3 = max(r3, np.linalg.norm(P @ v - expected) / np.linalg.norm(v))
    checks = [
        IdentityCheck("(I-sL)(I-L) = I-(1+s)L+sL^2", float(r1), r1 <= tol),
        IdentityCheck("(I-sL)(I-L) = ((1-s)I+sA)A", float(r2), r2 <= tol),
        IdentityCheck("P v = ((1-s)mu+s mu^2) v", float(r3), r3 <= tol),
    ]
    return FilterReport(checks)


# -- skeleton files ---------------------------------------------------------

def parse_skeleton(text, source="<string>"):
    joints = None
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ParseError(f"{source}: expected 'key = value'", line=lineno)
        try:
            if key == "joints":
                joints = int(value)
            elif key == "edge":
                i, j = value.split()
                edges.append((int(i), int(j)))
            else:
                raise ParseError(f"{source}: unknown key {key!r}", line=lineno)
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"{source}: bad value {value.strip()!r}", line=lineno) from None
    if joints is None:
        raise ParseError(f"{source}: missing 'joints = <J>' line")
    return build_graph(joints, edges)


def load_skeleton(path=None):
    """Load a skeleton file; ``None`` or ``"h36m16"`` gives the shipped
    16-joint Human3.6M topology."""
    if path is None or str(path) in ("h36m16", "h36m16.skel"):
        text = resources.files("posekan").joinpath("skeletons/h36m16.skel").read_text()
        return parse_skeleton(text, "h36m16.skel")
    with open(os.fspath(path)) as fh:
        return parse_skeleton(fh.read(), os.fspath(path))


def format_skeleton(graph):
    lines = [f"joints = {graph.joint_count}"]
    lines += [f"edge = {i} {j}" for i, j in graph.edges]
    return "\n".join(lines) + "\n"
