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

"""Single-head graph attention layer and graph pooling.

Node states are a ``d x channels`` matrix on a tape, row ``i`` being the
state of feature node ``i``. A layer transforms every state with ``Θ`` and
replaces it by an attention-weighted average of the transformed states of
the node itself and its neighbours::

    score(i, j) = LeakyReLU(a_srcᵀ Θh_i + a_dstᵀ Θh_j)
    α(i, .)     = softmax of score(i, .) over N(i) ∪ {i}
    h'_i        = Σ_j α(i, j) Θh_j

There is no bias and no activation after the aggregation.
"""

from dataclasses import dataclass
from typing import NamedTuple, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .c2g import FeatureGraph
from .errors import ConfigError, ContractViolation

__all__ = ["POOLING_KINDS", "GatLayerParams", "BoundGatLayer", "NodeStates",
           "attention_coefficients", "gat_forward", "graph_pool"]

POOLING_KINDS = ("mean", "max")

#: Node states live on a tape like every other differentiable value.
NodeStates = Node


@dataclass
class GatLayerParams:
    """Weights of one layer. ``theta`` has shape (out, in) and ``attn``
    shape (2 * out, 1); the first half of ``attn`` scores the attending node
    and the second half the attended one."""
    theta: np.ndarray
    attn: np.ndarray
    negative_slope: float = 0.2

    def __post_init__(self):
        self.theta = ad.as_matrix(self.theta)
        self.attn = ad.as_matrix(self.attn).reshape(-1, 1)
        if self.attn.shape[0] != 2 * self.theta.shape[0]:
            raise ConfigError(
                f"attn must have 2 * {self.theta.shape[0]} entries, got "
                f"{self.attn.shape[0]}")

    @property
    def in_channels(self) -> int:
        return self.theta.shape[1]

    @property
    def out_channels(self) -> int:
        return self.theta.shape[0]

    def bind(self, tape: Tape) -> "BoundGatLayer":
        return BoundGatLayer(tape.variable(self.theta),
                             tape.variable(self.attn), self.negative_slope)


class BoundGatLayer(NamedTuple):
    theta: Node
    attn: Node
    negative_slope: float


Layer = Union[GatLayerParams, BoundGatLayer]


def _bind(layer: Layer, tape: Tape) -> BoundGatLayer:
    if isinstance(layer, GatLayerParams):
        return layer.bind(tape)
    return layer


def _attend(layer: Layer, graph: FeatureGraph, states: NodeStates
            ) -> Tuple[Node, Node]:
    tape = states.tape
    bound = _bind(layer, tape)
    out_channels, in_channels = bound.theta.shape
    size = graph.num_nodes
    if states.shape != (size, in_channels):
        raise ContractViolation(
            f"Node states of shape {states.shape} do not fit a graph of "
            f"{size} nodes and a layer with {in_channels} input channels")
    transformed = ad.matmul(states, ad.transpose(bound.theta))
    source = ad.matmul(transformed,
                       ad.slice_rows(bound.attn, 0, out_channels))
    target = ad.matmul(transformed,
                       ad.slice_rows(bound.attn, out_channels,
                                     2 * out_channels))
    scores = ad.add(ad.matmul(source, tape.constant(np.ones((1, size)))),
                    ad.matmul(tape.constant(np.ones((size, 1))),
                              ad.transpose(target)))
    scores = ad.leaky_relu(scores, bound.negative_slope)
    alpha = ad.masked_softmax(scores, graph.attention_mask())
    return alpha, transformed


def attention_coefficients(layer: Layer, graph: FeatureGraph,
                           states: NodeStates) -> Node:
    """Attention weights as a dense ``d x d`` matrix. Entry (i, j) is zero
    unless j is i or a neighbour of i; every row sums to one."""
    alpha, _ = _attend(layer, graph, states)
    return alpha


def gat_forward(layer: Layer, graph: FeatureGraph, states: NodeStates
                ) -> NodeStates:
    alpha, transformed = _attend(layer, graph, states)
    return ad.matmul(alpha, transformed)


def graph_pool(states: NodeStates, kind: str = "mean") -> Node:
    """Pool node states into a single row, permutation invariant."""
    if kind == "mean":
        return ad.row_mean(states)
    if kind == "max":
        return ad.row_max(states)
    raise ConfigError(f"Unknown pooling {kind!r}; expected one of "
                      f"{', '.join(POOLING_KINDS)}")
