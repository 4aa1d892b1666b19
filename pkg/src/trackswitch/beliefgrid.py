"""Simplex lattice over the belief space and piecewise-linear interpolation on it.

Nodes are the beliefs (k_1/N, ..., k_m/N) with nonnegative integers k summing to N,
ordered lexicographically in k. Interpolation uses the Freudenthal triangulation in
cumulative coordinates w_r = N * (pi_r + ... + pi_m), r = 2..m: a point is located by
flooring w and sorting the fractional parts in decreasing order (ties by index).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import combinations
import logging
import math
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
import pandas as pd
from scipy import sparse

from .errors import GridError, ResolutionTooLarge
from .problem import Belief, as_belief

logger = logging.getLogger(__name__)

DEFAULT_NODE_CAP = 250_000


def node_count(m: int, N: int) -> int:
    return math.comb(N + m - 1, m - 1)


def default_resolution(m: int) -> int:
    if m <= 2:
        return 200
    if m == 3:
        return 60
    return max(4, int(round(60 / (m - 2))))


@dataclass(frozen=True, eq=False)
class SimplexLattice:
    m: int
    N: int
    counts: NDArray[np.int64]

    @property
    def size(self) -> int:
        return int(self.counts.shape[0])

    @cached_property
    def points(self) -> NDArray[np.float64]:
        pts = self.counts / float(self.N)
        pts.setflags(write=False)
        return pts

    @cached_property
    def _binom(self) -> NDArray[np.int64]:
        # table[n, r] = C(n, r) for n <= N + m, r <= m
        table = np.zeros((self.N + self.m + 1, self.m + 1), dtype=np.int64)
        table[:, 0] = 1
        for n in range(1, table.shape[0]):
            table[n, 1:] = table[n - 1, 1:] + table[n - 1, :-1]
        return table

    def index_of(self, counts: ArrayLike) -> NDArray[np.int64]:
        """Flat lexicographic index of integer compositions, vectorized over rows."""
        k = np.atleast_2d(np.asarray(counts, dtype=np.int64))
        if k.shape[1] != self.m:
            raise GridError(f"Compositions must have {self.m} parts")
        index = np.zeros(k.shape[0], dtype=np.int64)
        remaining = np.full(k.shape[0], self.N, dtype=np.int64)
        binom = self._binom
        for position in range(self.m - 1):
            rest = self.m - position - 1
            # compositions with a smaller entry at this position come first
            index += binom[remaining + rest, rest] - binom[remaining - k[:, position] + rest, rest]
            remaining -= k[:, position]
        return index

    def vertex(self, i: int) -> int:
        counts = np.zeros(self.m, dtype=np.int64)
        counts[i] = self.N
        return int(self.index_of(counts)[0])

    def nearest(self, pi: Belief | ArrayLike) -> int:
        """Index of the lattice node closest to pi (largest-remainder rounding)."""
        p = as_belief(pi).pi * self.N
        counts = np.floor(p).astype(np.int64)
        short = self.N - int(counts.sum())
        order = np.argsort(-(p - counts), kind="stable")
        counts[order[:short]] += 1
        return int(self.index_of(counts)[0])


def _compositions(m: int, N: int) -> NDArray[np.int64]:
    # stars and bars in lexicographic order of the bar positions equals lex order of k
    rows = []
    for bars in combinations(range(N + m - 1), m - 1):
        edges = (-1, *bars, N + m - 1)
        rows.append([edges[r + 1] - edges[r] - 1 for r in range(m)])
    return np.asarray(rows, dtype=np.int64).reshape(-1, m)


def build_lattice(m: int, N: int, node_cap: int = DEFAULT_NODE_CAP) -> SimplexLattice:
    """Lattice of all beliefs with denominators N on the (m-1)-simplex."""
    if m < 1 or N < 1:
        raise GridError(f"Need m >= 1 and N >= 1, got m={m}, N={N}")
    total = node_count(m, N)
    if total > node_cap:
        raise ResolutionTooLarge(f"Lattice with m={m}, N={N} has {total} nodes (cap {node_cap})")
    counts = np.array([[N]], dtype=np.int64) if m == 1 else _compositions(m, N)
    counts.setflags(write=False)
    logger.debug("Built lattice m=%d N=%d with %d nodes", m, N, total)
    return SimplexLattice(m=m, N=N, counts=counts)


def interpolation_weights(
    lattice: SimplexLattice, points: ArrayLike
) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Cell vertices and barycentric weights for a batch of beliefs.

    Returns (nodes, weights), both of shape (n, m); weights are nonnegative and sum to 1.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, m = pts.shape
    if m != lattice.m:
        raise GridError(f"Points have {m} coordinates, lattice has {lattice.m}")
    N = lattice.N
    if m == 1:
        return np.zeros((n, 1), dtype=np.int64), np.ones((n, 1))
    tail = np.cumsum(pts[:, ::-1], axis=1)[:, ::-1]
    w = np.clip(N * tail[:, 1:] / tail[:, :1], 0.0, float(N))
    base = np.minimum(np.floor(w), N - 1).astype(np.int64)
    frac = w - base
    order = np.argsort(-frac, axis=1, kind="stable")
    sorted_frac = np.take_along_axis(frac, order, axis=1)

    weights = np.empty((n, m))
    weights[:, 0] = 1.0 - sorted_frac[:, 0]
    weights[:, 1:-1] = sorted_frac[:, :-1] - sorted_frac[:, 1:]
    weights[:, -1] = sorted_frac[:, -1]

    rows = np.arange(n)
    cumulative = np.empty((n, m, m - 1), dtype=np.int64)
    cumulative[:, 0] = base
    step = base.copy()
    for r in range(1, m):
        step[rows, order[:, r - 1]] += 1
        cumulative[:, r] = step
    top = np.full((n, m, 1), N, dtype=np.int64)
    full = np.concatenate([top, cumulative, np.zeros((n, m, 1), dtype=np.int64)], axis=2)
    counts = full[:, :, :-1] - full[:, :, 1:]
    # zero-weight vertices may fall off the lattice; pin them to the base vertex
    invalid = (counts < 0).any(axis=2)
    if np.any(invalid):
        counts = np.where(invalid[:, :, None], counts[:, :1, :], counts)
    nodes = lattice.index_of(counts.reshape(-1, m)).reshape(n, m)
    return nodes, np.clip(weights, 0.0, 1.0)


def interpolation_matrix(lattice: SimplexLattice, points: ArrayLike) -> sparse.csr_matrix:
    """Sparse operator mapping nodal values to interpolated values at `points`."""
    nodes, weights = interpolation_weights(lattice, points)
    n = nodes.shape[0]
    rows = np.repeat(np.arange(n), lattice.m)
    matrix = sparse.csr_matrix(
        (weights.ravel(), (rows, nodes.ravel())), shape=(n, lattice.size)
    )
    matrix.sum_duplicates()
    return matrix


@dataclass(frozen=True, eq=False)
class NodeFunction:
    """Per-policy values on every lattice node, stored as an (n_nodes, |A|) array."""

    lattice: SimplexLattice
    values: NDArray[np.float64]

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != self.lattice.size:
            raise GridError(f"Expected {self.lattice.size} nodal rows, got {values.shape[0]}")
        if not np.all(np.isfinite(values)):
            raise GridError("Nodal values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_policies(self) -> int:
        return int(self.values.shape[1])

    def at(self, points: ArrayLike, a: int | None = None) -> NDArray[np.float64]:
        """Interpolated values for a batch of beliefs; all policies unless `a` is given."""
        nodes, weights = interpolation_weights(self.lattice, points)
        table = self.values if a is None else self.values[:, a : a + 1]
        out = np.einsum("nk,nka->na", weights, table[nodes])
        return out if a is None else out[:, 0]

    def to_frame(self, policies: list[str] | tuple[str, ...] | None = None) -> pd.DataFrame:
        if policies is None:
            policies = [str(a) for a in range(self.n_policies)]
        labels = list(policies)
        n = self.lattice.size
        frame = pd.DataFrame(
            {
                "node": np.tile(np.arange(n), self.n_policies),
                **{
                    f"pi_{r + 1}": np.tile(self.lattice.points[:, r], self.n_policies)
                    for r in range(self.lattice.m)
                },
                "policy": np.repeat(labels, n),
                "value": self.values.T.ravel(),
            }
        )
        return frame

    def to_csv(self, path: Path, policies: list[str] | tuple[str, ...] | None = None) -> None:
        self.to_frame(policies).to_csv(path, index=False, float_format="%.17g")


def interpolate(f: NodeFunction, pi: Belief | ArrayLike, a: int) -> float:
    """Value of the piecewise-linear extension of f(., a) at the belief pi."""
    return float(f.at(as_belief(pi).pi[None, :], a)[0])
