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

import json

from ccrgnn.data import ProcessedRecord
from ccrgnn.errors import ConfigError, ContractViolation
from ccrgnn.evaluation import (BaselineConfig, ConfusionMatrix,
                               baseline_logreg, baseline_mlp, confusion,
                               evaluate, format_table, macro_metrics,
                               predict_all)
from ccrgnn.model import CcrGnnConfig
from ccrgnn.train import GraphCache, init_params

from hypothesis import given, strategies as st

import numpy as np

import pytest

from sklearn.metrics import (accuracy_score, f1_score, precision_score,
                             recall_score)


def _labels(num_classes):
    return st.lists(st.integers(0, num_classes - 1), min_size=1,
                    max_size=60)


def test_confusion_counts():
    matrix = confusion([0, 1, 1, 2, 0], [0, 1, 0, 2, 2], num_classes=3)
    assert matrix.counts.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 1]]
    assert matrix.total == 5
    assert matrix.true_positives.tolist() == [1, 1, 1]
    assert matrix.false_positives.tolist() == [1, 1, 0]
    assert matrix.false_negatives.tolist() == [1, 0, 1]


@given(st.integers(2, 9).flatmap(
    lambda m: st.tuples(st.just(m), _labels(m), _labels(m))))
def test_confusion_total_and_trace(case):
    num_classes, predictions, truths = case
    size = min(len(predictions), len(truths))
    predictions, truths = predictions[:size], truths[:size]
    matrix = confusion(predictions, truths, num_classes)
    assert matrix.total == size
    assert int(np.trace(matrix.counts)) == sum(
        p == t for p, t in zip(predictions, truths))
    assert matrix.counts.sum(axis=1).tolist() == [
        truths.count(label) for label in range(num_classes)]


@pytest.mark.parametrize(["predictions", "truths"], [
    ([0, 1], [0]),
    ([0, 9], [0, 1]),
    ([0, 1], [-1, 1]),
])
def test_confusion_bad_input(predictions, truths):
    with pytest.raises(ContractViolation):
        confusion(predictions, truths)


def test_macro_metrics_two_classes():
    report = macro_metrics(ConfusionMatrix(np.array([[3, 1], [2, 4]])))
    assert report.recall == pytest.approx([0.75, 4 / 6])
    assert report.precision == pytest.approx([0.6, 0.8])
    assert report.macro_recall == pytest.approx(0.7083333)
    assert report.macro_precision == pytest.approx(0.7)
    f1 = [2 * 0.6 * 0.75 / 1.35, 2 * 0.8 * (4 / 6) / (0.8 + 4 / 6)]
    assert report.f1 == pytest.approx(f1)
    assert report.macro_f1 == pytest.approx(sum(f1) / 2)
    assert report.accuracy == pytest.approx(0.7)
    assert report.excluded == dict(precision=[], recall=[], f1=[])


def test_macro_metrics_excludes_absent_classes():
    # Class 1 is predicted but never true, class 2 never occurs.
    matrix = confusion([0, 1, 0], [0, 0, 0], num_classes=3)
    report = macro_metrics(matrix)
    assert report.recall == [2 / 3, None, None]
    assert report.precision == [1.0, 0.0, None]
    assert report.f1 == [pytest.approx(0.8), None, None]
    assert report.macro_recall == pytest.approx(2 / 3)
    assert report.macro_precision == pytest.approx(0.5)
    assert report.excluded == dict(precision=[2], recall=[1, 2], f1=[1, 2])


def test_macro_metrics_never_predicted_class_counts_in_f1():
    truths = [0, 0, 1, 1, 2, 2]
    report = macro_metrics(confusion([0] * 6, truths, num_classes=3))
    assert report.precision == [pytest.approx(1 / 3), None, None]
    assert report.recall == [1.0, 0.0, 0.0]
    assert report.f1 == [pytest.approx(0.5), 0.0, 0.0]
    assert report.macro_f1 == pytest.approx(0.5 / 3)
    assert report.macro_recall == pytest.approx(1 / 3)
    assert report.excluded == dict(precision=[1, 2], recall=[], f1=[])


def test_macro_metrics_zero_f1():
    report = macro_metrics(confusion([1, 0], [0, 1], num_classes=2))
    assert report.f1 == [0.0, 0.0]
    assert report.macro_f1 == 0.0
    assert report.accuracy == 0.0


def test_macro_metrics_empty_matrix():
    with pytest.raises(ContractViolation):
        macro_metrics(ConfusionMatrix(np.zeros((3, 3), dtype=np.int64)))


@given(_labels(5), _labels(5))
def test_macro_metrics_match_sklearn(predictions, truths):
    size = min(len(predictions), len(truths))
    predictions, truths = predictions[:size], truths[:size]
    report = macro_metrics(confusion(predictions, truths, num_classes=5))
    true_classes = sorted(set(truths))
    predicted_classes = sorted(set(predictions))
    assert report.macro_recall == pytest.approx(recall_score(
        truths, predictions, labels=true_classes, average="macro",
        zero_division=0))
    assert report.macro_precision == pytest.approx(precision_score(
        truths, predictions, labels=predicted_classes, average="macro",
        zero_division=0))
    assert report.macro_f1 == pytest.approx(f1_score(
        truths, predictions, labels=true_classes, average="macro",
        zero_division=0))
    assert report.accuracy == pytest.approx(
        accuracy_score(truths, predictions))
    for value in report.precision + report.recall + report.f1:
        assert value is None or 0.0 <= value <= 1.0


def test_report_to_json():
    report = macro_metrics(confusion([0, 1, 0], [0, 0, 0], num_classes=3))
    document = json.loads(json.dumps(report.to_json()))
    assert document["recall"] == [2 / 3, None, None]
    assert document["excluded"]["precision"] == [2]
    assert set(document) == {"precision", "recall", "f1", "macro_precision",
                             "macro_recall", "macro_f1", "accuracy",
                             "excluded"}


def _model(n_features=6):
    config = CcrGnnConfig(channels=(2, 3), pooling=("mean", "max"),
                          mlp_hidden=(8,), num_classes=3,
                          n_features=n_features)
    return config, init_params(config, seed=9)


def test_predict_all(small_dataset):
    config, params = _model()
    cache = GraphCache(config.c2g_step)
    probabilities = predict_all(params, config, small_dataset, cache)
    assert probabilities.shape == (len(small_dataset), 3)
    np.testing.assert_allclose(probabilities.sum(axis=1), 1.0)
    threaded = predict_all(params, config, small_dataset, cache, workers=4)
    assert threaded.tolist() == probabilities.tolist()
    assert cache.builds == len(small_dataset)


def test_predict_all_empty():
    config, params = _model()
    assert predict_all(params, config, []).shape == (0, 3)


def test_evaluate(small_dataset):
    config, params = _model()
    report = evaluate(params, config, small_dataset)
    probabilities = predict_all(params, config, small_dataset)
    predictions = probabilities.argmax(axis=1)
    truths = [record.label_index for record in small_dataset]
    assert report.accuracy == pytest.approx(
        np.mean(predictions == np.array(truths)))
    with pytest.raises(ContractViolation):
        evaluate(params, config, [])


@pytest.mark.parametrize("settings", [
    dict(epochs=-1),
    dict(batch_size=0),
    dict(lr=0.0),
    dict(l2=-1.0),
    dict(hidden=0),
    dict(optimizer="sgd"),
    dict(num_classes=1),
])
def test_baseline_config_validation(settings):
    with pytest.raises(ConfigError):
        BaselineConfig(**settings)


def test_baseline_logreg_learns(small_dataset):
    config = BaselineConfig(epochs=60, batch_size=8, lr=0.05, num_classes=3)
    report = baseline_logreg(small_dataset, small_dataset, config)
    assert report.accuracy >= 0.9


def test_baseline_mlp_learns(small_dataset):
    config = BaselineConfig(epochs=60, batch_size=8, lr=0.01, hidden=32,
                            num_classes=3)
    report = baseline_mlp(small_dataset, small_dataset, config)
    assert report.accuracy >= 0.9


def test_baseline_ftrl_is_deterministic(small_dataset):
    config = BaselineConfig(epochs=5, batch_size=8, optimizer="ftrl",
                            ftrl_alpha=0.5, num_classes=3)
    first = baseline_logreg(small_dataset, small_dataset, config)
    second = baseline_logreg(small_dataset, small_dataset, config)
    assert first == second
    assert 0.0 <= first.accuracy <= 1.0


def test_baseline_without_epochs(small_dataset):
    config = BaselineConfig(epochs=0, num_classes=3)
    report = baseline_logreg(small_dataset, small_dataset, config)
    assert 0.0 <= report.accuracy <= 1.0


def test_baseline_mlp_is_seeded(small_dataset):
    config = BaselineConfig(epochs=3, batch_size=8, hidden=16, num_classes=3,
                            seed=2)
    assert (baseline_mlp(small_dataset, small_dataset, config) ==
            baseline_mlp(small_dataset, small_dataset, config))


def test_baseline_mlp_without_epochs_guesses():
    train = [ProcessedRecord(np.full(4, i / 900), i % 3) for i in range(900)]
    config = BaselineConfig(epochs=0, num_classes=3, seed=1)
    report = baseline_mlp(train, train, config)
    assert report.accuracy == pytest.approx(1 / 3, abs=0.1)
    assert report == baseline_mlp(train, train, config)


def test_baseline_label_out_of_range():
    train = [ProcessedRecord(np.full(3, 0.5), 0),
             ProcessedRecord(np.full(3, 0.2), 4)]
    with pytest.raises(ContractViolation):
        baseline_logreg(train, train, BaselineConfig(num_classes=3))
    with pytest.raises(ContractViolation):
        baseline_mlp(train, train, BaselineConfig(num_classes=3))


def test_baseline_empty_dataset():
    with pytest.raises(ContractViolation):
        baseline_mlp([], [], BaselineConfig())


def test_format_table():
    good = macro_metrics(ConfusionMatrix(np.array([[3, 1], [2, 4]])))
    perfect = macro_metrics(confusion([0, 1], [0, 1], num_classes=2))
    table = format_table({"CCR-GNN": perfect, "LR": good})
    lines = table.splitlines()
    assert lines[0].split() == ["Model", "Recall", "Accuracy", "F1-score"]
    assert lines[1].split() == ["CCR-GNN", "1.00000", "1.00000", "1.00000"]
    assert lines[2].split()[:3] == ["LR", "0.70833", "0.70000"]
    assert len({len(line) for line in lines}) == 1
