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

"""The CCR-GNN classifier: stacked graph attention layers over a
corporation's feature graph, a local and global readout, and an MLP that
scores the rating classes.

The local readout concatenates the row-major flattened node states of every
layer, the input layer included; the global readout concatenates the pooled
state of every attention layer. The MLP sees both, one after the other.
"""

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from typing import (Any, Dict, List, Mapping, Optional, Sequence, Tuple,
                    Union)

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .c2g import DEFAULT_STEP, FeatureGraph, build_graph
from .data import ProcessedRecord
from .errors import CheckpointError, ConfigError, ContractViolation
from .gat import (BoundGatLayer, GatLayerParams, POOLING_KINDS, gat_forward,
                  graph_pool)

__all__ = ["LOSS_KINDS", "PROBABILITY_CLAMP", "CcrGnnConfig", "CcrGnnParams",
           "BoundParams", "ForwardTrace", "parameter_shapes", "forward",
           "loss", "sample_loss", "loss_and_gradients", "predict",
           "predict_proba", "one_hot", "Checkpoint", "save_checkpoint",
           "load_checkpoint"]

LOSS_KINDS = ("bce", "ce")
PROBABILITY_CLAMP = 1e-12

CHECKPOINT_MAGIC = b"CCRG"
CHECKPOINT_FORMAT = "ccrgnn-checkpoint"
CHECKPOINT_VERSION = 1

PathLike = Union[str, os.PathLike]


@dataclass
class CcrGnnConfig:
    """Architecture and loss settings.

    :param channels: Output channels of each attention layer.
    :param pooling: Pooling kind after each attention layer.
    :param mlp_hidden: Hidden layer sizes of the classifier MLP.
    :param num_classes: Number of rating classes m.
    :param l2: Weight λ of the squared parameter norm in the loss.
    :param c2g_step: Threshold decrement used to build feature graphs.
    :param negative_slope: LeakyReLU slope for attention scores and the MLP.
    :param heads: Attention heads per layer. Only a single head is
                  supported.
    :param loss: ``"bce"`` sums binary cross-entropy terms over the classes,
                 ``"ce"`` is categorical cross-entropy.
    :param n_features: Number of feature nodes d. Filled in from the data
                       when training starts.
    """
    channels: Tuple[int, ...] = (8, 64, 9)
    pooling: Tuple[str, ...] = ("mean", "mean", "max")
    mlp_hidden: Tuple[int, ...] = (128,)
    num_classes: int = 9
    l2: float = 1e-5
    c2g_step: float = DEFAULT_STEP
    negative_slope: float = 0.2
    heads: int = 1
    loss: str = "bce"
    n_features: Optional[int] = None

    def __post_init__(self):
        self.channels = tuple(int(value) for value in self.channels)
        self.pooling = tuple(str(value) for value in self.pooling)
        self.mlp_hidden = tuple(int(value) for value in self.mlp_hidden)
        self.validate()

    def validate(self):
        if not self.channels or min(self.channels) < 1:
            raise ConfigError(f"channels must be a non-empty list of "
                              f"positive sizes, got {list(self.channels)}")
        if len(self.pooling) != len(self.channels):
            raise ConfigError(
                f"Need one pooling kind per attention layer: "
                f"{len(self.channels)} layers, {len(self.pooling)} kinds")
        for kind in self.pooling:
            if kind not in POOLING_KINDS:
                raise ConfigError(f"Unknown pooling {kind!r}")
        if self.mlp_hidden and min(self.mlp_hidden) < 1:
            raise ConfigError("MLP hidden sizes must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"Need at least two classes, got "
                              f"{self.num_classes}")
        if self.l2 < 0:
            raise ConfigError(f"l2 must be non-negative, got {self.l2}")
        if not self.c2g_step > 0:
            raise ConfigError(f"c2g_step must be positive, got "
                              f"{self.c2g_step}")
        if not 0 < self.negative_slope < 1:
            raise ConfigError("negative_slope must lie in (0, 1)")
        if self.heads != 1:
            raise ConfigError(f"Only single-head attention is supported, "
                              f"got heads={self.heads}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"Unknown loss {self.loss!r}; expected one "
                              f"of {', '.join(LOSS_KINDS)}")
        if self.n_features is not None and self.n_features < 1:
            raise ConfigError("n_features must be positive")

    def readout_dims(self, n_features: Optional[int] = None
                     ) -> Tuple[int, int]:
        """Sizes of the local and the global readout."""
        d = self.n_features if n_features is None else n_features
        if d is None:
            raise ConfigError("The number of features is not known yet")
        total = sum(self.channels)
        return d * (1 + total), total

    def to_dict(self) -> Dict[str, Any]:
        document = dataclasses.asdict(self)
        for key in ("channels", "pooling", "mlp_hidden"):
            document[key] = list(document[key])
        return document

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "CcrGnnConfig":
        known = {item.name for item in dataclasses.fields(cls)}
        unknown = set(document) - known
        if unknown:
            raise ConfigError(f"Unknown model setting(s): "
                              f"{', '.join(sorted(unknown))}")
        return cls(**document)


def parameter_shapes(config: CcrGnnConfig
                     ) -> List[Tuple[str, Tuple[int, int]]]:
    """Names and shapes of all trainable parameters in declared order."""
    local, pooled = config.readout_dims()
    shapes = []
    in_channels = 1
    for index, out_channels in enumerate(config.channels):
        shapes.append((f"gat.{index}.theta", (out_channels, in_channels)))
        shapes.append((f"gat.{index}.attn", (2 * out_channels, 1)))
        in_channels = out_channels
    sizes = [local + pooled] + list(config.mlp_hidden) + [config.num_classes]
    for index, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        shapes.append((f"mlp.{index}.weight", (fan_out, fan_in)))
        shapes.append((f"mlp.{index}.bias", (1, fan_out)))
    return shapes


class BoundParams:
    """Parameters placed on a tape as leaves."""

    def __init__(self, gat_layers: List[BoundGatLayer],
                 mlp: List[Tuple[Node, Node]]):
        self.gat_layers = gat_layers
        self.mlp = mlp

    @property
    def leaves(self) -> List[Node]:
        leaves = []
        for layer in self.gat_layers:
            leaves.extend((layer.theta, layer.attn))
        for weight, bias in self.mlp:
            leaves.extend((weight, bias))
        return leaves

    @classmethod
    def from_nodes(cls, config: "CcrGnnConfig", nodes: Mapping[str, Node]
                   ) -> "BoundParams":
        """Regroup leaves keyed by their declared parameter names."""
        missing = [name for name, _ in parameter_shapes(config)
                   if name not in nodes]
        if missing:
            raise ContractViolation(f"Missing parameters: "
                                    f"{', '.join(missing)}")
        gat_layers = [BoundGatLayer(nodes[f"gat.{i}.theta"],
                                    nodes[f"gat.{i}.attn"],
                                    config.negative_slope)
                      for i in range(len(config.channels))]
        mlp = [(nodes[f"mlp.{i}.weight"], nodes[f"mlp.{i}.bias"])
               for i in range(len(config.mlp_hidden) + 1)]
        return cls(gat_layers, mlp)


@dataclass
class CcrGnnParams:
    gat_layers: List[GatLayerParams] = field(default_factory=list)
    mlp: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def named_arrays(self) -> List[Tuple[str, np.ndarray]]:
        named = []
        for index, layer in enumerate(self.gat_layers):
            named.append((f"gat.{index}.theta", layer.theta))
            named.append((f"gat.{index}.attn", layer.attn))
        for index, (weight, bias) in enumerate(self.mlp):
            named.append((f"mlp.{index}.weight", weight))
            named.append((f"mlp.{index}.bias", bias))
        return named

    def arrays(self) -> List[np.ndarray]:
        return [array for _, array in self.named_arrays()]

    def squared_norm(self) -> float:
        return float(sum(np.sum(array * array) for array in self.arrays()))

    def copy(self) -> "CcrGnnParams":
        return CcrGnnParams(
            [GatLayerParams(layer.theta.copy(), layer.attn.copy(),
                            layer.negative_slope)
             for layer in self.gat_layers],
            [(weight.copy(), bias.copy()) for weight, bias in self.mlp])

    @classmethod
    def from_arrays(cls, config: CcrGnnConfig,
                    arrays: Sequence[np.ndarray]) -> "CcrGnnParams":
        shapes = parameter_shapes(config)
        if len(arrays) != len(shapes):
            raise ContractViolation(f"Expected {len(shapes)} parameter "
                                    f"arrays, got {len(arrays)}")
        checked = []
        for (name, shape), array in zip(shapes, arrays):
            array = ad.as_matrix(array)
            if array.shape != shape:
                raise ContractViolation(f"{name}: expected shape {shape}, "
                                        f"got {array.shape}")
            checked.append(array)
        n_layers = len(config.channels)
        gat_layers = [GatLayerParams(checked[2 * i], checked[2 * i + 1],
                                     config.negative_slope)
                      for i in range(n_layers)]
        rest = checked[2 * n_layers:]
        mlp = [(rest[2 * i], rest[2 * i + 1]) for i in range(len(rest) // 2)]
        return cls(gat_layers, mlp)

    def bind(self, tape: Tape) -> BoundParams:
        return BoundParams(
            [layer.bind(tape) for layer in self.gat_layers],
            [(tape.variable(weight), tape.variable(bias))
             for weight, bias in self.mlp])


@dataclass
class ForwardTrace:
    """Every intermediate of a forward pass. ``node_states[0]`` is the
    ``d x 1`` input; ``log_probs`` holds one log-probability per class."""
    node_states: List[np.ndarray]
    pooled: List[np.ndarray]
    r_local: np.ndarray
    r_global: np.ndarray
    log_probs: np.ndarray


@dataclass
class _NodeTrace:
    node_states: List[Node]
    pooled: List[Node]
    r_local: Node
    r_global: Node
    log_probs: Node

    def values(self) -> ForwardTrace:
        return ForwardTrace([node.value for node in self.node_states],
                            [node.value.ravel() for node in self.pooled],
                            self.r_local.value.ravel(),
                            self.r_global.value.ravel(),
                            self.log_probs.value.ravel())


def _forward_nodes(bound: BoundParams, config: CcrGnnConfig,
                   graph: FeatureGraph, tape: Tape) -> _NodeTrace:
    size = graph.num_nodes
    if config.n_features is not None and size != config.n_features:
        raise ContractViolation(f"Graph has {size} nodes but the model "
                                f"expects {config.n_features} features")
    if len(bound.gat_layers) != len(config.pooling):
        raise ContractViolation(
            f"{len(bound.gat_layers)} attention layers but "
            f"{len(config.pooling)} pooling kinds")
    states = [tape.constant(graph.node_attrs.reshape(size, 1))]
    pooled = []
    for index, (layer, kind) in enumerate(zip(bound.gat_layers,
                                              config.pooling)):
        if layer.theta.cols != states[-1].cols:
            raise ContractViolation(
                f"Attention layer {index}: theta of shape "
                f"{layer.theta.shape} cannot take states of shape "
                f"{states[-1].shape}")
        states.append(gat_forward(layer, graph, states[-1]))
        pooled.append(graph_pool(states[-1], kind))
    r_local = ad.concat_cols([ad.reshape_flatten(state) for state in states])
    r_global = ad.concat_cols(pooled)
    hidden = ad.concat_cols([r_local, r_global])
    for index, (weight, bias) in enumerate(bound.mlp):
        if hidden.cols != weight.cols:
            raise ContractViolation(
                f"MLP layer {index}: weight of shape {weight.shape} cannot "
                f"take an input of shape {hidden.shape}")
        hidden = ad.add(ad.matmul(hidden, ad.transpose(weight)), bias)
        if index < len(bound.mlp) - 1:
            hidden = ad.leaky_relu(hidden, config.negative_slope)
    return _NodeTrace(states, pooled, r_local, r_global,
                      ad.log_softmax(hidden))


def forward(params: CcrGnnParams, config: CcrGnnConfig,
            graph: FeatureGraph) -> ForwardTrace:
    tape = Tape(record=False)
    return _forward_nodes(params.bind(tape), config, graph, tape).values()


def one_hot(label: int, num_classes: int) -> np.ndarray:
    if not 0 <= label < num_classes:
        raise ContractViolation(f"Label {label} outside [0, {num_classes})")
    target = np.zeros((1, num_classes))
    target[0, label] = 1.0
    return target


def loss(log_probs: Node, target: np.ndarray,
         parameters: Sequence[Node] = (), l2: float = 0.0,
         kind: str = "bce") -> Node:
    """Training loss of one sample plus ``l2`` times the squared norm of
    ``parameters``.

    ``"bce"`` is ``-Σ_i [y_i log p_i + (1 - y_i) log(1 - p_i)]`` with the
    probabilities ``p = exp(log_probs)`` clamped to [1e-12, 1 - 1e-12];
    ``"ce"`` is ``-Σ_i y_i log p_i``.
    """
    tape = log_probs.tape
    target = ad.as_matrix(target)
    if target.shape != log_probs.shape:
        raise ContractViolation(f"Target of shape {target.shape} does not "
                                f"match predictions of shape "
                                f"{log_probs.shape}")
    if (not np.isin(target, (0.0, 1.0)).all()) or target.sum() != 1.0:
        raise ContractViolation("Target is not a one-hot vector")
    if kind == "bce":
        probabilities = ad.clip(ad.exp(log_probs), PROBABILITY_CLAMP,
                                1.0 - PROBABILITY_CLAMP)
        complement = ad.add_scalar(ad.scale(probabilities, -1.0), 1.0)
        positive = ad.sum_all(ad.hadamard(tape.constant(target),
                                          ad.log(probabilities)))
        negative = ad.sum_all(ad.hadamard(tape.constant(1.0 - target),
                                          ad.log(complement)))
        data_term = ad.scale(ad.add(positive, negative), -1.0)
    elif kind == "ce":
        data_term = ad.scale(
            ad.sum_all(ad.hadamard(tape.constant(target), log_probs)), -1.0)
    else:
        raise ConfigError(f"Unknown loss {kind!r}")
    if not parameters:
        return data_term
    penalty = ad.sum_squares(parameters[0])
    for parameter in parameters[1:]:
        penalty = ad.add(penalty, ad.sum_squares(parameter))
    return ad.add(data_term, ad.scale(penalty, l2))


def sample_loss(bound: BoundParams, config: CcrGnnConfig,
                graph: FeatureGraph, label: int) -> Tuple[Node, Node]:
    """Loss node of one sample, with λ taken from ``config``, and the
    log-probabilities it was computed from."""
    tape = bound.leaves[0].tape
    trace = _forward_nodes(bound, config, graph, tape)
    total = loss(trace.log_probs, one_hot(label, config.num_classes),
                 bound.leaves, config.l2, config.loss)
    return total, trace.log_probs


def loss_and_gradients(params: CcrGnnParams, config: CcrGnnConfig,
                       graph: FeatureGraph, label: int
                       ) -> Tuple[float, List[np.ndarray], np.ndarray]:
    """Loss of one sample, its gradient for every parameter array in
    declared order, and the predicted log-probabilities."""
    bound = params.bind(Tape())
    total, log_probs = sample_loss(bound, config, graph, label)
    adjoints = total.tape.backward(total)
    return (float(total.value[0, 0]),
            [adjoints[leaf] for leaf in bound.leaves],
            log_probs.value.ravel())


def predict_proba(params: CcrGnnParams, config: CcrGnnConfig,
                  record: ProcessedRecord,
                  graph: Optional[FeatureGraph] = None) -> np.ndarray:
    if graph is None:
        graph = build_graph(record.x, config.c2g_step)
    return np.exp(forward(params, config, graph).log_probs)


def predict(params: CcrGnnParams, config: CcrGnnConfig,
            record: ProcessedRecord,
            graph: Optional[FeatureGraph] = None) -> int:
    """Index of the highest scoring class, the lowest index on ties."""
    if graph is None:
        graph = build_graph(record.x, config.c2g_step)
    return int(np.argmax(forward(params, config, graph).log_probs))


@dataclass
class Checkpoint:
    params: CcrGnnParams
    config: CcrGnnConfig
    seed: int
    epoch: int


def save_checkpoint(path: PathLike, params: CcrGnnParams,
                    config: CcrGnnConfig, seed: int, epoch: int):
    """Write a checkpoint: magic bytes, the little-endian uint32 length of a
    JSON header, the header, and every parameter as little-endian float64 in
    declared order."""
    named = params.named_arrays()
    header = json.dumps(dict(
        format=CHECKPOINT_FORMAT, version=CHECKPOINT_VERSION,
        config=config.to_dict(), seed=seed, epoch=epoch,
        parameters=[[name, list(array.shape)] for name, array in named]),
        sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(array, dtype="<f8").tobytes()
                       for _, array in named)
    with open(path, "wb") as checkpoint_h:
        checkpoint_h.write(CHECKPOINT_MAGIC)
        checkpoint_h.write(struct.pack("<I", len(header)))
        checkpoint_h.write(header)
        checkpoint_h.write(payload)


def load_checkpoint(path: PathLike) -> Checkpoint:
    with open(path, "rb") as checkpoint_h:
        data = checkpoint_h.read()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Not a ccrgnn checkpoint ({data[:4]!r})")
    header_length, = struct.unpack("<I", data[4:8])
    header_end = 8 + header_length
    if len(data) < header_end:
        raise CheckpointError("Checkpoint ended inside its header")
    try:
        header = json.loads(data[8:header_end].decode("utf-8"))
        if header["format"] != CHECKPOINT_FORMAT:
            raise CheckpointError(f"Unknown format {header['format']!r}")
        if header["version"] != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"Unsupported checkpoint version {header['version']}")
        config = CcrGnnConfig.from_dict(header["config"])
        expected = [[name, list(shape)]
                    for name, shape in parameter_shapes(config)]
        stored = header["parameters"]
        seed, epoch = int(header["seed"]), int(header["epoch"])
    except (ValueError, KeyError, TypeError) as error:
        raise CheckpointError(f"Corrupted checkpoint header: {error}"
                              ) from error
    if stored != expected:
        raise CheckpointError("Checkpoint parameters do not match its "
                              "configuration")
    sizes = [int(np.prod(shape)) for _, shape in expected]
    if len(data) - header_end != 8 * sum(sizes):
        raise CheckpointError(
            f"Checkpoint payload has {len(data) - header_end} bytes, "
            f"expected {8 * sum(sizes)}")
    flat = np.frombuffer(data, dtype="<f8", offset=header_end)
    arrays = []
    offset = 0
    for (_, shape), size in zip(expected, sizes):
        arrays.append(flat[offset:offset + size].astype(np.float64)
                      .reshape(shape))
        offset += size
    return Checkpoint(CcrGnnParams.from_arrays(config, arrays), config,
                      seed, epoch)
