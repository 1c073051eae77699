# Copyright (c) 2021 Leiden University Medical Center
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in
# all copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.

"""Corporation to graph: turn one feature vector into a connected graph.

The interaction map of a vector ``x`` is its self-outer product ``x xᵀ``.
Thresholding the map at ``r`` gives a binary adjacency matrix. Starting at
the largest entry of the map the threshold is lowered by a fixed step until
the graph is connected.
"""

import json
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError, ContractViolation

__all__ = ["DEFAULT_STEP", "InteractionMap", "FeatureGraph",
           "interaction_map", "threshold_activate", "is_connected",
           "connectivity_threshold", "build_graph", "build_graphs",
           "exhaustive_threshold"]

#: Threshold decrement. Encoded features lie in [0, 1], so at most about a
#: hundred thresholds are visited.
DEFAULT_STEP = 0.01

Edge = Tuple[int, int]


@dataclass(frozen=True)
class InteractionMap:
    values: np.ndarray

    @property
    def dimension(self) -> int:
        return self.values.shape[0]

    def max(self) -> float:
        return float(self.values.max())

    def min(self) -> float:
        return float(self.values.min())


@dataclass(frozen=True, eq=False)
class FeatureGraph:
    """A corporation as a graph: node ``i`` carries feature ``x_i``.

    ``adjacency`` is the thresholded map including its diagonal. ``edges``
    holds the off-diagonal pairs ``(i, j)`` with ``i < j``. ``iterations``
    counts the thresholds visited to reach ``threshold``."""
    node_attrs: np.ndarray
    adjacency: np.ndarray
    threshold: float
    edges: Tuple[Edge, ...]
    iterations: int = 1

    @property
    def num_nodes(self) -> int:
        return self.node_attrs.shape[0]

    def attention_mask(self) -> np.ndarray:
        """Boolean matrix of the pairs a node attends to: its neighbours and
        itself."""
        mask = self.adjacency.astype(bool)
        np.fill_diagonal(mask, True)
        return mask

    def neighbours(self, node: int) -> List[int]:
        row = self.adjacency[node]
        return [int(j) for j in np.flatnonzero(row) if j != node]

    def to_json(self) -> str:
        return json.dumps(dict(
            d=self.num_nodes,
            threshold=self.threshold,
            edges=[list(edge) for edge in self.edges],
            attrs=self.node_attrs.tolist()))

    @classmethod
    def from_json(cls, text: str) -> "FeatureGraph":
        document = json.loads(text)
        attrs = np.array(document["attrs"], dtype=np.float64)
        threshold = float(document["threshold"])
        if len(attrs) != document["d"]:
            raise ContractViolation(
                f"Graph document has d={document['d']} but "
                f"{len(attrs)} attributes")
        adjacency = np.zeros((len(attrs), len(attrs)), dtype=np.uint8)
        for i, j in document["edges"]:
            adjacency[i, j] = adjacency[j, i] = 1
        # Self-loops follow from the threshold and are not stored.
        np.fill_diagonal(adjacency, attrs * attrs >= threshold)
        edges = tuple(sorted((min(i, j), max(i, j))
                             for i, j in document["edges"]))
        return cls(attrs, adjacency, threshold, edges)

    def to_dot(self, names: Optional[Sequence[str]] = None) -> str:
        if names is None:
            names = [f"f{i}" for i in range(self.num_nodes)]
        lines = ["graph corporation {",
                 f'  label="threshold={self.threshold!r}";']
        for i, value in enumerate(self.node_attrs):
            label = f"{names[i]} = {value:.6g}".replace('"', '\\"')
            lines.append(f'  n{i} [label="{label}"];')
        for i, j in self.edges:
            lines.append(f"  n{i} -- n{j};")
        lines.append("}")
        return "\n".join(lines) + "\n"


def _as_vector(x) -> np.ndarray:
    vector = np.asarray(x, dtype=np.float64)
    if vector.ndim != 1 or vector.shape[0] < 1:
        raise ContractViolation(
            f"Expected a non-empty vector, got shape {vector.shape}")
    if not np.isfinite(vector).all():
        raise ContractViolation("Feature vector has non-finite entries")
    return vector


def interaction_map(x) -> InteractionMap:
    vector = _as_vector(x)
    return InteractionMap(np.outer(vector, vector))


def threshold_activate(interactions: InteractionMap, r: float
                       ) -> np.ndarray:
    """Binary adjacency: 1 where the map is at least ``r``."""
    return (interactions.values >= r).astype(np.uint8)


def _check_symmetric(adjacency: np.ndarray) -> np.ndarray:
    matrix = np.asarray(adjacency)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ContractViolation(
            f"Adjacency must be square, got shape {matrix.shape}")
    if not np.array_equal(matrix, matrix.T):
        raise ContractViolation("Adjacency matrix is not symmetric")
    return matrix


def is_connected(adjacency: np.ndarray) -> bool:
    """Whether every node can reach every other node. Self-loops do not
    count; a single node is connected."""
    matrix = _check_symmetric(adjacency)
    if matrix.shape[0] <= 1:
        return True
    off_diagonal = matrix.astype(bool)
    np.fill_diagonal(off_diagonal, False)
    n_components = connected_components(csr_matrix(off_diagonal),
                                        directed=False, return_labels=False)
    return n_components == 1


class _DisjointSet:
    def __init__(self, size: int):
        self.parents = list(range(size))
        self.sizes = [1] * size
        self.components = size

    def find(self, i: int) -> int:
        root = i
        while self.parents[root] != root:
            root = self.parents[root]
        while self.parents[i] != root:
            self.parents[i], i = root, self.parents[i]
        return root

    def union(self, i: int, j: int) -> bool:
        i, j = self.find(i), self.find(j)
        if i == j:
            return False
        if self.sizes[i] < self.sizes[j]:
            i, j = j, i
        self.parents[j] = i
        self.sizes[i] += self.sizes[j]
        self.components -= 1
        return True


def connectivity_threshold(interactions: InteractionMap) -> float:
    """Largest ``r`` at which the thresholded graph is connected.

    This is the smallest edge of a maximum spanning tree, found by merging
    pairs in order of decreasing interaction. A single node is connected at
    every threshold, which gives infinity."""
    size = interactions.dimension
    if size == 1:
        return math.inf
    rows, cols = np.triu_indices(size, k=1)
    values = interactions.values[rows, cols]
    order = np.argsort(-values, kind="stable")
    components = _DisjointSet(size)
    for index in order:
        if (components.union(int(rows[index]), int(cols[index])) and
                components.components == 1):
            return float(values[index])
    raise AssertionError("A complete graph is always connected")


def build_graph(x, step: float = DEFAULT_STEP) -> FeatureGraph:
    """Build the graph at the first threshold in ``max(A), max(A) - step,
    max(A) - 2 step, ...`` that yields a connected graph."""
    if not (step > 0 and math.isfinite(step)):
        raise ConfigError(f"step must be a positive number, got {step}")
    vector = _as_vector(x)
    interactions = interaction_map(vector)
    top = interactions.max()
    critical = connectivity_threshold(interactions)
    # Thresholds are top - k * step; connected exactly when r <= critical.
    k = 0 if critical >= top else math.ceil((top - critical) / step)
    while k > 0 and top - (k - 1) * step <= critical:
        k -= 1
    while top - k * step > critical:
        k += 1
    threshold = top - k * step
    adjacency = threshold_activate(interactions, threshold)
    rows, cols = np.nonzero(np.triu(adjacency, k=1))
    edges = tuple((int(i), int(j)) for i, j in zip(rows, cols))
    return FeatureGraph(vector, adjacency, threshold, edges, k + 1)


def build_graphs(vectors: Iterable, step: float = DEFAULT_STEP
                 ) -> List[FeatureGraph]:
    return [build_graph(vector, step) for vector in vectors]


def exhaustive_threshold(x) -> float:
    """The largest entry of the interaction map at which the graph is
    connected, found by trying every distinct entry from the top."""
    interactions = interaction_map(x)
    for value in np.unique(interactions.values)[::-1]:
        if is_connected(threshold_activate(interactions, float(value))):
            return float(value)
    raise AssertionError("The smallest entry yields a complete graph")
