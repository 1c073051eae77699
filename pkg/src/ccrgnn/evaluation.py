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

"""Confusion matrices, macro-averaged metrics and the baseline models.

Macro averages are taken over the classes whose ratio is defined. A class
without true samples has no recall and no F1-score, a class that is never
predicted has no precision. Such classes are listed in
:attr:`MetricsReport.excluded` instead of being counted as zero. A class
with true samples that is never predicted keeps an F1-score of zero.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from sklearn.neural_network import MLPClassifier

from . import autodiff as ad
from .autodiff import Tape
from .data import ProcessedRecord
from .errors import ConfigError, ContractViolation
from .model import CcrGnnConfig, CcrGnnParams, forward
from .train import AdamState, FtrlState, GraphCache, adam_step, ftrl_step

__all__ = ["OPTIMIZERS", "ConfusionMatrix", "MetricsReport", "confusion",
           "macro_metrics", "predict_all", "evaluate", "BaselineConfig",
           "baseline_logreg", "baseline_mlp", "format_table"]

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "ftrl")
METRICS = ("precision", "recall", "f1")


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Counts indexed by (true label, predicted label)."""
    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def true_positives(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    @property
    def false_positives(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.true_positives

    @property
    def false_negatives(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.true_positives


def confusion(predictions: Sequence[int], truths: Sequence[int],
              num_classes: int = 9) -> ConfusionMatrix:
    if len(predictions) != len(truths):
        raise ContractViolation(
            f"{len(predictions)} predictions for {len(truths)} truths")
    predicted = np.asarray(predictions, dtype=np.int64)
    actual = np.asarray(truths, dtype=np.int64)
    for name, labels in (("prediction", predicted), ("truth", actual)):
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ContractViolation(
                f"A {name} label lies outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (actual, predicted), 1)
    return ConfusionMatrix(counts)


@dataclass
class MetricsReport:
    """Per-class and macro-averaged metrics. Per-class entries are ``None``
    for classes excluded from the corresponding average."""
    precision: List[Optional[float]]
    recall: List[Optional[float]]
    f1: List[Optional[float]]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    excluded: Dict[str, List[int]] = field(default_factory=dict)

    def to_json(self) -> Dict:
        return dict(precision=self.precision, recall=self.recall, f1=self.f1,
                    macro_precision=self.macro_precision,
                    macro_recall=self.macro_recall, macro_f1=self.macro_f1,
                    accuracy=self.accuracy, excluded=self.excluded)


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    if denominator == 0:
        return None
    return numerator / denominator


def _macro(values: Sequence[Optional[float]]) -> float:
    defined = [value for value in values if value is not None]
    if not defined:
        return 0.0
    return math.fsum(defined) / len(defined)


def macro_metrics(matrix: ConfusionMatrix) -> MetricsReport:
    if matrix.total == 0:
        raise ContractViolation("Cannot compute metrics of an empty "
                                "confusion matrix")
    tp = matrix.true_positives
    fp = matrix.false_positives
    fn = matrix.false_negatives
    precision = [_ratio(int(t), int(t + f)) for t, f in zip(tp, fp)]
    recall = [_ratio(int(t), int(t + f)) for t, f in zip(tp, fn)]
    # 2 TP / (2 TP + FP + FN) is the harmonic mean of precision and recall.
    f1 = [_ratio(2 * int(t), int(2 * t + f + n)) if t + n > 0 else None
          for t, f, n in zip(tp, fp, fn)]
    values = dict(precision=precision, recall=recall, f1=f1)
    excluded = {name: [i for i, value in enumerate(values[name])
                       if value is None]
                for name in METRICS}
    return MetricsReport(
        precision, recall, f1, _macro(precision), _macro(recall), _macro(f1),
        int(np.trace(matrix.counts)) / matrix.total, excluded)


def predict_all(params: CcrGnnParams, config: CcrGnnConfig,
                records: Sequence[ProcessedRecord],
                cache: Optional[GraphCache] = None, workers: int = 1
                ) -> np.ndarray:
    """Class probabilities of every record, one row per record."""
    if cache is None:
        cache = GraphCache(config.c2g_step)
    graphs = [cache.get(record) for record in records]

    def probabilities(graph):
        return np.exp(forward(params, config, graph).log_probs)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            rows = list(executor.map(probabilities, graphs))
    else:
        rows = [probabilities(graph) for graph in graphs]
    if not rows:
        return np.zeros((0, config.num_classes))
    return np.vstack(rows)


def evaluate(params: CcrGnnParams, config: CcrGnnConfig,
             test_set: Sequence[ProcessedRecord],
             cache: Optional[GraphCache] = None,
             workers: int = 1) -> MetricsReport:
    if len(test_set) == 0:
        raise ContractViolation("Cannot evaluate on an empty dataset")
    probabilities = predict_all(params, config, test_set, cache, workers)
    predictions = np.argmax(probabilities, axis=1)
    matrix = confusion(predictions.tolist(),
                       [record.label_index for record in test_set],
                       config.num_classes)
    return macro_metrics(matrix)


@dataclass
class BaselineConfig:
    """Settings shared by the flat-vector baselines."""
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.01
    l2: float = 1e-5
    hidden: int = 1000
    optimizer: str = "adam"
    ftrl_alpha: float = 0.1
    ftrl_beta: float = 1.0
    ftrl_l1: float = 0.0
    ftrl_l2: float = 0.0
    num_classes: int = 9
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.l2 < 0:
            raise ConfigError("l2 must be non-negative")
        if self.hidden < 1:
            raise ConfigError("hidden must be at least 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"Unknown optimizer {self.optimizer!r}; "
                              f"expected one of {', '.join(OPTIMIZERS)}")
        if self.num_classes < 2:
            raise ConfigError("Need at least two classes")


def _stack(records: Sequence[ProcessedRecord]) -> Tuple[np.ndarray,
                                                         np.ndarray]:
    if len(records) == 0:
        raise ContractViolation("Baselines need a non-empty dataset")
    features = np.vstack([record.x for record in records])
    labels = np.array([record.label_index for record in records])
    return features, labels


def _check_labels(labels: np.ndarray, num_classes: int):
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractViolation(
            f"A training label lies outside [0, {num_classes})")


def _report(predictions: np.ndarray, test_labels: np.ndarray,
            num_classes: int) -> MetricsReport:
    return macro_metrics(confusion(predictions.tolist(),
                                   test_labels.tolist(), num_classes))


def _softmax_regression(tape: Tape, weight: ad.Node, bias: ad.Node,
                        features: np.ndarray) -> ad.Node:
    ones = tape.constant(np.ones((features.shape[0], 1)))
    scores = ad.add(ad.matmul(tape.constant(features), ad.transpose(weight)),
                    ad.matmul(ones, bias))
    return ad.log_softmax(scores)


def baseline_logreg(train: Sequence[ProcessedRecord],
                    test: Sequence[ProcessedRecord],
                    config: BaselineConfig) -> MetricsReport:
    """Multinomial logistic regression on the flat feature vectors.

    Trained on mini-batches with Adam or with FTRL-Proximal, as chosen by
    ``config.optimizer``. The loss is the mean cross-entropy of the batch
    plus ``config.l2`` times the squared parameter norm.
    """
    features, labels = _stack(train)
    _check_labels(labels, config.num_classes)
    rng = np.random.default_rng(config.seed)
    bound = math.sqrt(6.0 / (features.shape[1] + config.num_classes))
    weight = rng.uniform(-bound, bound,
                         size=(config.num_classes, features.shape[1]))
    bias = np.zeros((1, config.num_classes))
    arrays = [weight, bias]
    adam = AdamState.zeros_like(arrays)
    ftrl = FtrlState.zeros_like(arrays, alpha=config.ftrl_alpha,
                                beta=config.ftrl_beta, l1=config.ftrl_l1,
                                l2=config.ftrl_l2)
    targets = np.eye(config.num_classes)[labels]
    order_rng = np.random.default_rng([config.seed, 3])
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(labels))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            tape = Tape()
            leaves = [tape.variable(weight), tape.variable(bias)]
            log_probs = _softmax_regression(tape, *leaves, features[batch])
            data_term = ad.scale(
                ad.sum_all(ad.hadamard(tape.constant(targets[batch]),
                                       log_probs)), -1.0 / len(batch))
            penalty = ad.add(ad.sum_squares(leaves[0]),
                             ad.sum_squares(leaves[1]))
            total = ad.add(data_term, ad.scale(penalty, config.l2))
            adjoints = tape.backward(total)
            grads = [adjoints[leaf] for leaf in leaves]
            if config.optimizer == "ftrl":
                ftrl_step(ftrl, arrays, grads)
            else:
                adam_step(adam, arrays, grads, config.lr)
        logger.debug("logistic regression epoch %d loss %.6f", epoch,
                     float(total.value[0, 0]))
    test_features, test_labels = _stack(test)
    tape = Tape(record=False)
    log_probs = _softmax_regression(tape, tape.variable(weight),
                                    tape.variable(bias), test_features)
    return _report(np.argmax(log_probs.value, axis=1), test_labels,
                   config.num_classes)


def baseline_mlp(train: Sequence[ProcessedRecord],
                 test: Sequence[ProcessedRecord],
                 config: BaselineConfig) -> MetricsReport:
    """One hidden layer of ``config.hidden`` ReLU units trained with Adam,
    one pass over the training set per epoch. With zero epochs the
    untrained baseline guesses classes uniformly at random.
    """
    features, labels = _stack(train)
    _check_labels(labels, config.num_classes)
    test_features, test_labels = _stack(test)
    if config.epochs == 0:
        guesses = np.random.default_rng(config.seed).integers(
            config.num_classes, size=len(test_labels))
        return _report(guesses, test_labels, config.num_classes)
    model = MLPClassifier(hidden_layer_sizes=(config.hidden,),
                          activation="relu", solver="adam", alpha=config.l2,
                          batch_size=min(config.batch_size, len(labels)),
                          learning_rate_init=config.lr,
                          random_state=config.seed)
    classes = np.arange(config.num_classes)
    for epoch in range(config.epochs):
        model.partial_fit(features, labels, classes=classes)
        logger.debug("MLP epoch %d loss %.6f", epoch, model.loss_)
    return _report(model.predict(test_features), test_labels,
                   config.num_classes)


def format_table(reports: Mapping[str, MetricsReport]) -> str:
    """Aligned plain-text table with one row per model."""
    header = ("Model", "Recall", "Accuracy", "F1-score")
    rows = [(name, f"{report.macro_recall:.5f}", f"{report.accuracy:.5f}",
             f"{report.macro_f1:.5f}") for name, report in reports.items()]
    widths = [max(len(row[i]) for row in [header] + rows)
              for i in range(len(header))]
    lines = []
    for row in [header] + rows:
        cells = [row[0].ljust(widths[0])]
        cells.extend(cell.rjust(width)
                     for cell, width in zip(row[1:], widths[1:]))
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"
