"""Directed road networks and their discrete calculus operators.

A network is a directed graph with dense, stable edge ids (file order).
Node fields (one value per node, d channels) and edge fields (one value per
edge) are connected by three linear operators:

    gradient:   (grad z)_e = z_i - z_j          for edge e = (i, j)
    divergence: (div q)_i  = sum(q out of i) - sum(q into i)
    laplacian:  div(grad z), equal to B @ B.T @ z for the incidence matrix
                B with +1 at the source and -1 at the destination of each edge

With these sign conventions the Laplacian is positive semidefinite, constants
lie in its kernel, and per channel the entries of laplacian_apply sum to zero.
Operators are unweighted by default; `weighted=True` scales the gradient by
sqrt(w_e) per edge so that the composition equals B @ diag(w) @ B.T.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GraphFormatError",
    "RoadNetwork",
    "NodeField",
    "EdgeField",
    "load_network",
    "save_network",
    "gradient",
    "divergence",
    "laplacian_apply",
    "gradient_values",
    "divergence_values",
    "laplacian_values",
]


class GraphFormatError(ValueError):
    """Malformed graph file or violated network invariant."""


class RoadNetwork:
    """Immutable directed graph; edge id = position in the edge list."""

    def __init__(self, node_count, edges):
        n = int(node_count)
        if n < 1:
            raise GraphFormatError(f"node count must be positive, got {n}")
        src, dst, wts = [], [], []
        for k, edge in enumerate(edges):
            if len(edge) == 2:
                i, j = edge
                w = 1.0
            else:
                i, j, w = edge
            i, j, w = int(i), int(j), float(w)
            if not (0 <= i < n and 0 <= j < n):
                raise GraphFormatError(f"edge {k}: index ({i}, {j}) out of range for n={n}")
            if i == j:
                raise GraphFormatError(f"edge {k}: self-loop at node {i}")
            if not (w > 0.0 and np.isfinite(w)):
                raise GraphFormatError(f"edge {k}: weight must be positive and finite, got {w}")
            src.append(i)
            dst.append(j)
            wts.append(w)
        if not src:
            raise GraphFormatError("network has no edges")
        self.node_count = n
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.weights = np.asarray(wts, dtype=np.float64)
        self._check_connected()

    @property
    def edge_count(self):
        return self.src.shape[0]

    @property
    def edges(self):
        return list(zip(self.src.tolist(), self.dst.tolist(), self.weights.tolist()))

    def _check_connected(self):
        # connectivity of the underlying undirected graph, by BFS
        n = self.node_count
        adj = [[] for _ in range(n)]
        for i, j in zip(self.src, self.dst):
            adj[i].append(j)
            adj[j].append(i)
        seen = np.zeros(n, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        if not seen.all():
            missing = int(np.flatnonzero(~seen)[0])
            raise GraphFormatError(f"graph is disconnected: node {missing} unreachable")

    def incidence(self):
        """Dense incidence matrix B, shape (n, |E|): +1 at src, -1 at dst."""
        B = np.zeros((self.node_count, self.edge_count))
        cols = np.arange(self.edge_count)
        B[self.src, cols] += 1.0
        B[self.dst, cols] -= 1.0
        return B

    def __eq__(self, other):
        if not isinstance(other, RoadNetwork):
            return NotImplemented
        return (
            self.node_count == other.node_count
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.weights, other.weights)
        )

    def __repr__(self):
        return f"RoadNetwork(n={self.node_count}, edges={self.edge_count})"


def _as_field_values(values, rows, what):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != rows:
        raise ValueError(f"{what} must have shape ({rows}, d), got {np.shape(values)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class NodeField:
    """Per-node values, shape (n, d). 1-d input is lifted to a single channel."""

    values: np.ndarray

    @classmethod
    def of(cls, net, values):
        return cls(_as_field_values(values, net.node_count, "node field"))

    @property
    def channels(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class EdgeField:
    """Per-edge values, shape (|E|, d)."""

    values: np.ndarray

    @classmethod
    def of(cls, net, values):
        return cls(_as_field_values(values, net.edge_count, "edge field"))

    @property
    def channels(self):
        return self.values.shape[1]


# -- array kernels ---------------------------------------------------------
# The NodeField/EdgeField wrappers below delegate here; the simulator and the
# test oracles use these directly on plain (rows, d) arrays.


def _check_shape(arr, rows, what):
    if arr.ndim != 2 or arr.shape[0] != rows:
        raise ValueError(f"{what}: expected shape ({rows}, d), got {arr.shape}")


def gradient_values(net, z, weighted=False):
    z = np.asarray(z, dtype=np.float64)
    _check_shape(z, net.node_count, "gradient")
    out = z[net.src] - z[net.dst]
    if weighted:
        out = out * np.sqrt(net.weights)[:, None]
    return out


def divergence_values(net, q, weighted=False):
    q = np.asarray(q, dtype=np.float64)
    _check_shape(q, net.edge_count, "divergence")
    if weighted:
        q = q * np.sqrt(net.weights)[:, None]
    out = np.zeros((net.node_count, q.shape[1]))
    np.add.at(out, net.src, q)
    np.subtract.at(out, net.dst, q)
    return out


def laplacian_values(net, z, weighted=False):
    # composed operationally so laplacian == divergence(gradient(.)) bit for bit
    return divergence_values(net, gradient_values(net, z, weighted), weighted)


# -- field-level operators ---------------------------------------------------


def gradient(net, z, weighted=False):
    """Edge differences of a node field: row e of the result is z_src - z_dst."""
    return EdgeField(gradient_values(net, z.values, weighted))


def divergence(net, q, weighted=False):
    """Net outflow per node of an edge field."""
    return NodeField(divergence_values(net, q.values, weighted))


def laplacian_apply(net, z, weighted=False):
    """Graph Laplacian applied to a node field (divergence of the gradient)."""
    return NodeField(laplacian_values(net, z.values, weighted))


# -- file format -------------------------------------------------------------
# Line 1: integer node count. Each later non-empty line: "src dst weight"
# (weight optional, default 1.0). '#' starts a comment line. Edge id = order
# of appearance.


def load_network(stream) -> RoadNetwork:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    lines = []
    for lineno, raw in enumerate(stream, start=1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        lines.append((lineno, text))
    if not lines:
        raise GraphFormatError("empty graph file")
    first_no, first = lines[0]
    try:
        n = int(first)
    except ValueError:
        raise GraphFormatError(f"line {first_no}: expected node count, got {first!r}") from None
    edges = []
    for lineno, text in lines[1:]:
        parts = text.split()
        if len(parts) not in (2, 3):
            raise GraphFormatError(f"line {lineno}: expected 'src dst [weight]', got {text!r}")
        try:
            i, j = int(parts[0]), int(parts[1])
            w = float(parts[2]) if len(parts) == 3 else 1.0
        except ValueError:
            raise GraphFormatError(f"line {lineno}: cannot parse {text!r}") from None
        edges.append((i, j, w))
    return RoadNetwork(n, edges)


def save_network(net, stream):
    if isinstance(stream, io.IOBase) or hasattr(stream, "write"):
        out = stream
        close = False
    else:
        out = open(stream, "w", encoding="utf-8")
        close = True
    try:
        out.write(f"{net.node_count}\n")
        for i, j, w in zip(net.src, net.dst, net.weights):
            out.write(f"{i} {j} {w:.17g}\n")
    finally:
        if close:
            out.close()
