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

"""Reverse-mode differentiation over dense float64 matrices.

Every value is a two-dimensional matrix; a vector is a matrix with a single
row. Operations are recorded on a :class:`Tape` in the order they are
executed, which is a topological order by construction. :meth:`Tape.backward`
walks the tape in reverse and accumulates adjoints.

A tape created with ``record=False`` computes exactly the same values but
keeps no history, which is what inference and finite differences use.
"""

import itertools
from dataclasses import dataclass, field
from typing import (Callable, Dict, Iterable, List, Mapping, Optional,
                    Sequence, Tuple, Union)

import numpy as np

from .errors import ContractViolation, GradientCheckError

__all__ = ["Node", "Tape", "Adjoints", "as_matrix", "backward",
           "matmul", "add", "sub", "scale", "add_scalar", "hadamard",
           "transpose", "concat_rows", "concat_cols", "reshape_flatten",
           "slice_rows", "leaky_relu", "relu", "exp", "log", "clip",
           "masked_softmax", "softmax_over_set", "log_softmax", "row_mean",
           "row_max", "sum_all", "sum_squares", "grad_check",
           "GradCheckReport"]

ArrayLike = Union[np.ndarray, Sequence, float]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def as_matrix(value: ArrayLike) -> np.ndarray:
    """Convert a scalar, vector or matrix to a C-contiguous float64 matrix.
    Scalars become 1x1 matrices and vectors become a single row."""
    array = np.array(value, dtype=np.float64, order="C")
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        return array.reshape(1, -1)
    if array.ndim == 2:
        return array
    raise ContractViolation(
        f"Expected at most two dimensions, got shape {array.shape}")


class Node:
    """A value slot on a tape."""
    __slots__ = ("tape", "slot", "value")

    def __init__(self, tape: "Tape", slot: int, value: np.ndarray):
        self.tape = tape
        self.slot = slot
        self.value = value

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape  # type: ignore

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def __repr__(self):
        return f"<Node slot={self.slot} shape={self.shape}>"


class Adjoints:
    """Adjoints produced by a backward pass. Slots the loss does not depend
    on have an adjoint of zero."""

    def __init__(self, tape: "Tape", adjoints: List[Optional[np.ndarray]]):
        self._tape = tape
        self._adjoints = adjoints

    def __getitem__(self, node: Node) -> np.ndarray:
        if node.tape is not self._tape:
            raise ContractViolation("Node belongs to a different tape")
        adjoint = self._adjoints[node.slot]
        if adjoint is None:
            return np.zeros_like(node.value)
        return adjoint


class Tape:
    """Ordered record of primitive operations.

    A tape has a single writer: one forward pass and one backward pass.
    Independent tapes can be used from different threads at the same time.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._values: List[np.ndarray] = []
        self._parents: List[Tuple[int, ...]] = []
        self._vjps: List[Optional[VJP]] = []

    def __len__(self):
        return len(self._values)

    def variable(self, value: ArrayLike) -> Node:
        """Create a leaf slot. Parameters and inputs are both leaves; the
        backward pass gives an adjoint for every leaf."""
        return self._push(as_matrix(value), (), None)

    constant = variable

    def _push(self, value: np.ndarray, parents: Tuple[Node, ...],
              vjp: Optional[VJP]) -> Node:
        for parent in parents:
            if parent.tape is not self:
                raise ContractViolation(
                    "Cannot combine nodes from different tapes")
        if not self.record:
            return Node(self, -1, value)
        slot = len(self._values)
        self._values.append(value)
        self._parents.append(tuple(parent.slot for parent in parents))
        self._vjps.append(vjp)
        return Node(self, slot, value)

    def backward(self, loss: Node) -> Adjoints:
        if not self.record:
            raise ContractViolation(
                "backward() on a tape that does not record")
        if loss.tape is not self:
            raise ContractViolation("Loss node belongs to a different tape")
        if loss.shape != (1, 1):
            raise ContractViolation(
                f"Loss must be a scalar (1, 1) matrix, got shape "
                f"{loss.shape}")
        adjoints: List[Optional[np.ndarray]] = [None] * len(self._values)
        adjoints[loss.slot] = np.ones((1, 1))
        for slot in range(loss.slot, -1, -1):
            adjoint = adjoints[slot]
            vjp = self._vjps[slot]
            if adjoint is None or vjp is None:
                continue
            for parent, contribution in zip(self._parents[slot],
                                            vjp(adjoint)):
                if contribution is None:
                    continue
                current = adjoints[parent]
                adjoints[parent] = (contribution if current is None
                                    else current + contribution)
        return Adjoints(self, adjoints)


def backward(loss: Node) -> Adjoints:
    return loss.tape.backward(loss)


def _shape_error(operation: str, *nodes: Node) -> ContractViolation:
    shapes = " and ".join(str(node.shape) for node in nodes)
    return ContractViolation(f"{operation}: non-conforming shapes {shapes}")


def _same_shape(operation: str, a: Node, b: Node):
    if a.shape != b.shape:
        raise _shape_error(operation, a, b)


def matmul(a: Node, b: Node) -> Node:
    if a.cols != b.rows:
        raise _shape_error("matmul", a, b)
    va, vb = a.value, b.value
    return a.tape._push(va @ vb, (a, b),
                        lambda g: (g @ vb.T, va.T @ g))


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return a.tape._push(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return a.tape._push(a.value - b.value, (a, b), lambda g: (g, -g))


def scale(a: Node, factor: float) -> Node:
    return a.tape._push(a.value * factor, (a,), lambda g: (g * factor,))


def add_scalar(a: Node, constant: float) -> Node:
    return a.tape._push(a.value + constant, (a,), lambda g: (g,))


def hadamard(a: Node, b: Node) -> Node:
    _same_shape("hadamard", a, b)
    va, vb = a.value, b.value
    return a.tape._push(va * vb, (a, b), lambda g: (g * vb, g * va))


def transpose(a: Node) -> Node:
    return a.tape._push(np.ascontiguousarray(a.value.T), (a,),
                        lambda g: (g.T,))


def concat_rows(nodes: Sequence[Node]) -> Node:
    """Stack matrices on top of each other."""
    if not nodes:
        raise ContractViolation("concat_rows: nothing to concatenate")
    if any(node.cols != nodes[0].cols for node in nodes):
        raise _shape_error("concat_rows", *nodes)
    bounds = list(itertools.accumulate(node.rows for node in nodes))[:-1]
    return nodes[0].tape._push(
        np.vstack([node.value for node in nodes]), tuple(nodes),
        lambda g: tuple(np.split(g, bounds, axis=0)))


def concat_cols(nodes: Sequence[Node]) -> Node:
    """Place matrices side by side."""
    if not nodes:
        raise ContractViolation("concat_cols: nothing to concatenate")
    if any(node.rows != nodes[0].rows for node in nodes):
        raise _shape_error("concat_cols", *nodes)
    bounds = list(itertools.accumulate(node.cols for node in nodes))[:-1]
    return nodes[0].tape._push(
        np.hstack([node.value for node in nodes]), tuple(nodes),
        lambda g: tuple(np.split(g, bounds, axis=1)))


def reshape_flatten(a: Node) -> Node:
    """Flatten a matrix row-major into a single row."""
    shape = a.shape
    return a.tape._push(a.value.reshape(1, -1), (a,),
                        lambda g: (g.reshape(shape),))


def slice_rows(a: Node, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= a.rows:
        raise ContractViolation(
            f"slice_rows: [{start}, {stop}) out of range for shape "
            f"{a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)
    return a.tape._push(a.value[start:stop].copy(), (a,), vjp)


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    """Elementwise LeakyReLU. The derivative at exactly zero is 1."""
    if not 0.0 < slope < 1.0:
        raise ContractViolation(
            f"leaky_relu: slope must lie in (0, 1), got {slope}")
    positive = a.value >= 0
    derivative = np.where(positive, 1.0, slope)
    return a.tape._push(np.where(positive, a.value, slope * a.value), (a,),
                        lambda g: (g * derivative,))


def relu(a: Node) -> Node:
    positive = a.value > 0
    return a.tape._push(np.where(positive, a.value, 0.0), (a,),
                        lambda g: (g * positive,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape._push(out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    va = a.value
    return a.tape._push(np.log(va), (a,), lambda g: (g / va,))


def clip(a: Node, low: float, high: float) -> Node:
    """Clamp into [low, high]. Entries on or inside the bounds pass the
    gradient, clamped entries block it."""
    inside = (a.value >= low) & (a.value <= high)
    return a.tape._push(np.clip(a.value, low, high), (a,),
                        lambda g: (g * inside,))


def masked_softmax(scores: Node, mask: np.ndarray) -> Node:
    """Row-wise softmax restricted to the entries where ``mask`` is true.

    Entries outside the mask are exactly zero in the output. Every row needs
    at least one entry in the mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ContractViolation(
            f"masked_softmax: mask shape {mask.shape} does not match scores "
            f"shape {scores.shape}")
    if not mask.any(axis=1).all():
        raise ContractViolation("masked_softmax: empty index set")
    masked = np.where(mask, scores.value, -np.inf)
    shifted = masked - masked.max(axis=1, keepdims=True)
    weights = np.where(mask, np.exp(shifted), 0.0)
    out = weights / weights.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)
    return scores.tape._push(out, (scores,), vjp)


def softmax_over_set(scores: Node, index_set: Iterable[int]) -> Node:
    """Softmax of a single-row score vector over ``index_set``. Positions
    outside the set get probability zero."""
    if scores.rows != 1:
        raise ContractViolation(
            f"softmax_over_set: expected a single row, got shape "
            f"{scores.shape}")
    mask = np.zeros(scores.shape, dtype=bool)
    indices = list(index_set)
    if not indices:
        raise ContractViolation("softmax_over_set: empty index set")
    mask[0, indices] = True
    return masked_softmax(scores, mask)


def log_softmax(scores: Node) -> Node:
    """Row-wise log-softmax with max subtraction."""
    shifted = scores.value - scores.value.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - log_norm
    probabilities = np.exp(out)
    return scores.tape._push(
        out, (scores,),
        lambda g: (g - probabilities * g.sum(axis=1, keepdims=True),))


def row_mean(h: Node) -> Node:
    """Mean over the rows; one value per column."""
    if h.rows == 0:
        raise ContractViolation("row_mean: empty matrix")
    rows = h.rows
    return h.tape._push(h.value.mean(axis=0, keepdims=True), (h,),
                        lambda g: (np.repeat(g / rows, rows, axis=0),))


def row_max(h: Node) -> Node:
    """Maximum over the rows. The gradient goes to the first row holding
    the maximum of a column."""
    if h.rows == 0:
        raise ContractViolation("row_max: empty matrix")
    shape = h.shape
    argmax = h.value.argmax(axis=0)
    columns = np.arange(shape[1])

    def vjp(g):
        full = np.zeros(shape)
        full[argmax, columns] = g[0]
        return (full,)
    return h.tape._push(h.value[argmax, columns].reshape(1, -1), (h,), vjp)


def sum_all(a: Node) -> Node:
    shape = a.shape
    return a.tape._push(a.value.sum().reshape(1, 1), (a,),
                        lambda g: (np.full(shape, g[0, 0]),))


def sum_squares(a: Node) -> Node:
    va = a.value
    return a.tape._push(np.sum(va * va).reshape(1, 1), (a,),
                        lambda g: (2.0 * g[0, 0] * va,))


@dataclass
class GradCheckReport:
    """Outcome of :func:`grad_check`. ``errors`` holds the largest relative
    error per parameter and ``worst`` the flat index where it occurred."""
    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)
    worst: Dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(error < self.tolerance for error in self.errors.values())


ForwardFn = Callable[[Tape, Dict[str, Node]], Node]


def _evaluate(forward_fn: ForwardFn, params: Mapping[str, np.ndarray],
              where: str) -> float:
    tape = Tape(record=False)
    nodes = {name: tape.variable(value) for name, value in params.items()}
    value = float(forward_fn(tape, nodes).value[0, 0])
    if not np.isfinite(value):
        raise GradientCheckError(f"Non-finite forward value ({value}) at "
                                 f"{where}")
    return value


def grad_check(forward_fn: ForwardFn, params: Mapping[str, ArrayLike],
               h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    :param forward_fn: Builds a scalar loss from a tape and a mapping of
                       parameter name to leaf node. Must be deterministic.
    :param params: Parameter values by name.
    :param h: Finite difference step.
    :param tol: A parameter passes when every entry's relative error
                ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`` is below tol.
    """
    arrays = {name: as_matrix(value) for name, value in params.items()}
    tape = Tape()
    nodes = {name: tape.variable(value) for name, value in arrays.items()}
    loss = forward_fn(tape, nodes)
    if not np.isfinite(loss.value).all():
        raise GradientCheckError("Non-finite forward value at the "
                                 "unperturbed parameters")
    adjoints = tape.backward(loss)
    report = GradCheckReport(tolerance=tol)
    for name, array in arrays.items():
        analytic = adjoints[nodes[name]].ravel()
        numeric = np.empty(array.size)
        for index in range(array.size):
            perturbed = dict(arrays)
            shifted = array.copy()
            shifted.flat[index] = array.flat[index] + h
            perturbed[name] = shifted
            upper = _evaluate(forward_fn, perturbed, f"{name}[{index}] + h")
            shifted = array.copy()
            shifted.flat[index] = array.flat[index] - h
            perturbed[name] = shifted
            lower = _evaluate(forward_fn, perturbed, f"{name}[{index}] - h")
            numeric[index] = (upper - lower) / (2 * h)
        relative = (np.abs(analytic - numeric) /
                    np.maximum(1e-8, np.abs(analytic) + np.abs(numeric)))
        worst = int(relative.argmax()) if relative.size else 0
        report.errors[name] = float(relative.max()) if relative.size else 0.0
        report.worst[name] = worst
    return report
