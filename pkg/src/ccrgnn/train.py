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

"""Parameter initialization, optimizers and the training loop.

Training is deterministic for a fixed seed: samples are visited in a seeded
order, per-sample gradients are summed in that order even when they are
computed on several threads, and there is one optimizer step per batch.
"""

import dataclasses
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import pandas as pd

from .c2g import FeatureGraph, build_graph
from .data import ProcessedRecord
from .errors import ConfigError, ContractViolation, TrainingError
from .model import (CcrGnnConfig, CcrGnnParams, loss_and_gradients,
                    parameter_shapes)

__all__ = ["INIT_KINDS", "LR_SCHEDULES", "LR_FLOOR", "TrainConfig",
           "AdamState", "FtrlState", "EpochRecord", "GraphCache",
           "init_params", "lr_at", "adam_step", "ftrl_step",
           "effective_model_config", "fit", "write_history_csv"]

logger = logging.getLogger(__name__)

INIT_KINDS = ("xavier", "uniform_std")
LR_SCHEDULES = ("subtractive", "multiplicative", "inverse_time")
LR_FLOOR = 1e-5
#: Number of epochs between two learning rate decays.
DECAY_EVERY = 3

PathLike = Union[str, os.PathLike]
Arrays = Union[CcrGnnParams, Sequence[np.ndarray]]


@dataclass
class TrainConfig:
    """Optimizer and loop settings.

    :param initial_lr: Learning rate of the first epochs.
    :param lr_decay: Decay applied every three epochs, see ``lr_schedule``.
    :param lr_schedule: ``"subtractive"`` lowers the rate by ``lr_decay``,
                        ``"multiplicative"`` multiplies it by
                        ``1 - lr_decay / initial_lr`` and
                        ``"inverse_time"`` divides the initial rate by
                        ``1 + lr_decay * decays``, reading ``lr_decay`` as
                        a decay coefficient.
    :param l2_penalty: Weight λ of the squared parameter norm in the loss.
    :param init: ``"xavier"`` for Xavier uniform weights, ``"uniform_std"``
                 for uniform weights with standard deviation 0.1.
    :param init_scale: Factor applied to the initialization bound.
    :param workers: Threads computing per-sample gradients.
    """
    initial_lr: float = 0.001
    lr_decay: float = 0.0001
    lr_schedule: str = "subtractive"
    l2_penalty: float = 1e-5
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    init: str = "xavier"
    init_scale: float = 1.0
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.initial_lr > 0:
            raise ConfigError(f"initial_lr must be positive, got "
                              f"{self.initial_lr}")
        if not self.lr_decay > 0:
            raise ConfigError(f"lr_decay must be positive, got "
                              f"{self.lr_decay}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"Unknown lr_schedule {self.lr_schedule!r}")
        if self.l2_penalty < 0:
            raise ConfigError("l2_penalty must be non-negative")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got "
                              f"{self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.init not in INIT_KINDS:
            raise ConfigError(f"Unknown init {self.init!r}; expected one of "
                              f"{', '.join(INIT_KINDS)}")
        if not self.init_scale > 0:
            raise ConfigError("init_scale must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")


def _init_bound(name: str, shape: Tuple[int, int], init: str,
                scale: float) -> float:
    if init == "uniform_std":
        return scale * 0.1 * math.sqrt(3.0)
    if name.endswith(".attn"):
        # The attention vector acts as a 1 x (2 * out) weight.
        fan_in, fan_out = shape[0], 1
    else:
        fan_out, fan_in = shape
    return scale * math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: CcrGnnConfig, seed: int = 0, init: str = "xavier",
                scale: float = 1.0) -> CcrGnnParams:
    """Draw every weight uniformly from ``±bound`` and set biases to zero.

    For ``"xavier"`` the bound of an ``out x in`` weight is
    ``sqrt(6 / (in + out))``.
    """
    if init not in INIT_KINDS:
        raise ConfigError(f"Unknown init {init!r}")
    rng = np.random.default_rng(seed)
    arrays = []
    for name, shape in parameter_shapes(config):
        if name.endswith(".bias"):
            arrays.append(np.zeros(shape))
            continue
        bound = _init_bound(name, shape, init, scale)
        arrays.append(rng.uniform(-bound, bound, size=shape))
    return CcrGnnParams.from_arrays(config, arrays)


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ContractViolation(f"epoch must be non-negative, got {epoch}")
    decays = epoch // DECAY_EVERY
    if config.lr_schedule == "multiplicative":
        factor = max(1.0 - config.lr_decay / config.initial_lr, 0.0)
        lr = config.initial_lr * factor ** decays
    elif config.lr_schedule == "inverse_time":
        lr = config.initial_lr / (1.0 + config.lr_decay * decays)
    else:
        lr = config.initial_lr - config.lr_decay * decays
    return max(lr, LR_FLOOR)


def _as_arrays(params: Arrays) -> List[np.ndarray]:
    if isinstance(params, CcrGnnParams):
        return params.arrays()
    return list(params)


def _check_gradients(arrays: List[np.ndarray], grads: Sequence[np.ndarray]):
    if len(arrays) != len(grads):
        raise ContractViolation(f"{len(grads)} gradients for "
                                f"{len(arrays)} parameters")
    for index, (array, grad) in enumerate(zip(arrays, grads)):
        if array.shape != grad.shape:
            raise ContractViolation(
                f"Gradient {index} has shape {grad.shape}, parameter has "
                f"shape {array.shape}")
        if not np.isfinite(grad).all():
            raise TrainingError(f"Non-finite gradient for parameter {index}")


@dataclass
class AdamState:
    first: List[np.ndarray]
    second: List[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Arrays) -> "AdamState":
        arrays = _as_arrays(params)
        return cls([np.zeros_like(a) for a in arrays],
                   [np.zeros_like(a) for a in arrays])


def adam_step(state: AdamState, params: Arrays, grads: Sequence[np.ndarray],
              lr: float) -> Tuple[Arrays, AdamState]:
    """One bias-corrected Adam update, in place."""
    arrays = _as_arrays(params)
    _check_gradients(arrays, grads)
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for array, grad, first, second in zip(arrays, grads, state.first,
                                          state.second):
        first *= state.beta1
        first += (1.0 - state.beta1) * grad
        second *= state.beta2
        second += (1.0 - state.beta2) * grad * grad
        array -= lr * (first / correction1) / (
            np.sqrt(second / correction2) + state.eps)
    return params, state


@dataclass
class FtrlState:
    """Per-coordinate FTRL-Proximal accumulators."""
    z: List[np.ndarray]
    n: List[np.ndarray]
    alpha: float = 0.1
    beta: float = 1.0
    l1: float = 0.0
    l2: float = 0.0

    @classmethod
    def zeros_like(cls, params: Arrays, **settings) -> "FtrlState":
        arrays = _as_arrays(params)
        return cls([np.zeros_like(a) for a in arrays],
                   [np.zeros_like(a) for a in arrays], **settings)


def ftrl_step(state: FtrlState, params: Arrays, grads: Sequence[np.ndarray]
              ) -> Tuple[Arrays, FtrlState]:
    arrays = _as_arrays(params)
    _check_gradients(arrays, grads)
    for array, grad, z, n in zip(arrays, grads, state.z, state.n):
        sigma = (np.sqrt(n + grad * grad) - np.sqrt(n)) / state.alpha
        z += grad - sigma * array
        n += grad * grad
        shrunk = np.abs(z) > state.l1
        denominator = (state.beta + np.sqrt(n)) / state.alpha + state.l2
        array[...] = np.where(
            shrunk, -(z - np.sign(z) * state.l1) / denominator, 0.0)
    return params, state


class GraphCache:
    """Feature graphs keyed by the bytes of the feature vector. Safe to
    share between the threads of one training run."""

    def __init__(self, step: float):
        self.step = step
        self._lock = threading.Lock()
        self._graphs: Dict[bytes, FeatureGraph] = {}
        self.builds = 0
        self.hits = 0

    def __len__(self):
        return len(self._graphs)

    def get(self, record: ProcessedRecord) -> FeatureGraph:
        key = np.ascontiguousarray(record.x, dtype=np.float64).tobytes()
        with self._lock:
            graph = self._graphs.get(key)
            if graph is not None:
                self.hits += 1
                return graph
        built = build_graph(record.x, self.step)
        with self._lock:
            graph = self._graphs.setdefault(key, built)
            if graph is built:
                self.builds += 1
            else:
                self.hits += 1
        return graph


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    train_accuracy: float


def effective_model_config(model_config: CcrGnnConfig,
                           train_config: TrainConfig,
                           n_features: int) -> CcrGnnConfig:
    """The model configuration training actually uses: the feature count
    taken from the data and λ taken from ``train_config``."""
    if (model_config.n_features is not None and
            model_config.n_features != n_features):
        raise ContractViolation(
            f"Model expects {model_config.n_features} features, data has "
            f"{n_features}")
    return dataclasses.replace(model_config, n_features=n_features,
                               l2=train_config.l2_penalty)


def _check_train_set(train_set: Sequence[ProcessedRecord],
                     num_classes: int) -> int:
    if len(train_set) == 0:
        raise ContractViolation("Cannot train on an empty dataset")
    dimensions = {record.x.shape[0] for record in train_set}
    if len(dimensions) != 1:
        raise ContractViolation(f"Records have differing feature counts: "
                                f"{sorted(dimensions)}")
    for index, record in enumerate(train_set):
        if not 0 <= record.label_index < num_classes:
            raise ContractViolation(
                f"Sample {index} has label {record.label_index} outside "
                f"[0, {num_classes})")
    return dimensions.pop()


EpochCallback = Callable[[EpochRecord, CcrGnnParams], None]


def fit(train_set: Sequence[ProcessedRecord], config: TrainConfig,
        model_config: CcrGnnConfig, params: Optional[CcrGnnParams] = None,
        cache: Optional[GraphCache] = None,
        on_epoch_end: Optional[EpochCallback] = None
        ) -> Tuple[CcrGnnParams, List[EpochRecord]]:
    """Train CCR-GNN with Adam.

    :param train_set: Processed training records.
    :param config: Optimizer and loop settings.
    :param model_config: Architecture. The feature count and λ are filled in
                         as described in :func:`effective_model_config`.
    :param params: Starting parameters; freshly initialized when omitted.
                   Updated in place.
    :param cache: Graph cache to share between calls.
    :param on_epoch_end: Called with the epoch record and the parameters
                         after every epoch.
    :return: The trained parameters and one record per epoch. The recorded
             loss and accuracy are averaged over the predictions made while
             the epoch ran.
    """
    n_features = _check_train_set(train_set, model_config.num_classes)
    model_config = effective_model_config(model_config, config, n_features)
    if params is None:
        params = init_params(model_config, config.seed, config.init,
                             config.init_scale)
    if cache is None:
        cache = GraphCache(model_config.c2g_step)
    state = AdamState.zeros_like(params)
    order_rng = np.random.default_rng([config.seed, 1])
    history = []

    def sample_gradients(index: int):
        record = train_set[index]
        return loss_and_gradients(params, model_config, cache.get(record),
                                  record.label_index)

    executor = (ThreadPoolExecutor(max_workers=config.workers)
                if config.workers > 1 else None)
    try:
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            order = order_rng.permutation(len(train_set))
            total_loss = 0.0
            correct = 0
            for start in range(0, len(order), config.batch_size):
                stop = start + config.batch_size
                batch = [int(i) for i in order[start:stop]]
                if executor is None:
                    results = map(sample_gradients, batch)
                else:
                    results = executor.map(sample_gradients, batch)
                summed: Optional[List[np.ndarray]] = None
                for index, (value, grads, log_probs) in zip(batch, results):
                    if not math.isfinite(value):
                        raise TrainingError(
                            f"Loss is {value} at epoch {epoch}, sample "
                            f"{index}")
                    if not all(np.isfinite(g).all() for g in grads):
                        raise TrainingError(
                            f"Non-finite gradient at epoch {epoch}, sample "
                            f"{index}")
                    total_loss += value
                    correct += int(np.argmax(log_probs) ==
                                   train_set[index].label_index)
                    if summed is None:
                        summed = [g.copy() for g in grads]
                    else:
                        for accumulator, grad in zip(summed, grads):
                            accumulator += grad
                assert summed is not None
                adam_step(state, params, [g / len(batch) for g in summed], lr)
            record = EpochRecord(epoch, lr, total_loss / len(train_set),
                                 correct / len(train_set))
            history.append(record)
            logger.info("epoch %d lr %.6g loss %.6f accuracy %.4f",
                        record.epoch, record.lr, record.loss,
                        record.train_accuracy)
            if on_epoch_end is not None:
                on_epoch_end(record, params)
    finally:
        if executor is not None:
            executor.shutdown()
    return params, history


def write_history_csv(history: Sequence[EpochRecord], path: PathLike):
    frame = pd.DataFrame([dataclasses.astuple(record) for record in history],
                         columns=["epoch", "lr", "loss", "train_accuracy"])
    frame.to_csv(path, index=False, float_format="%.17g")
