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

"""Loading, cleaning, encoding, rebalancing and synthesising datasets."""

import collections
from pathlib import Path

from ccrgnn.data import (CategoricalFeature, FeatureSchema, NumericFeature,
                         ProcessedRecord, RATINGS, RawRecord, class_sizes,
                         fit_schema, generate_synthetic, load_csv,
                         load_processed_csv, load_schema, preprocess,
                         preprocess_all, save_schema, smote,
                         stratified_split, synthetic_prototypes, write_csv,
                         write_processed_csv)
from ccrgnn.errors import (ConfigError, DataError, EncodingError, ParseError,
                           RebalanceError, SchemaError, ValidationError)

from hypothesis import given, strategies as st

import numpy as np

import pytest

RAW_SAMPLE = Path(__file__).parent / "data" / "raw_sample.csv"


def _record(label, *values):
    return ProcessedRecord(np.array(values, dtype=np.float64), label)


def _segment_residual(point, a, b):
    """Distance from ``point`` to the segment between ``a`` and ``b``."""
    direction = b - a
    length = float(direction @ direction)
    if length == 0.0:
        return float(np.linalg.norm(point - a))
    u = min(max(float((point - a) @ direction) / length, 0.0), 1.0)
    return float(np.linalg.norm(point - (a + u * direction)))


def test_load_csv_sample():
    records = load_csv(RAW_SAMPLE)
    assert [record.id for record in records] == ["c1", "c2", "c3", "c4"]
    assert records[0].numeric == {"revenue": 10.0, "debt_ratio": 0.5}
    assert records[0].categorical == {"sector": "bank"}
    assert records[1].numeric["revenue"] is None
    assert records[3].categorical["sector"] is None
    assert [record.label_index for record in records] == [0, 4, 2, 0]


def test_load_csv_one_missing_value(tmp_path):
    path = tmp_path / "two.csv"
    path.write_text("id,a,b,rating\nx,1.5,,AA\ny,2,3,C\n")
    records = load_csv(path)
    assert len(records) == 2
    missing = sum(value is None for record in records
                  for value in record.numeric.values())
    assert missing == 1


def test_load_csv_unknown_rating(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,a,rating\nx,1,AAA\ny,2,ZZZ\n")
    with pytest.raises(ValidationError) as error:
        load_csv(path)
    error.match("row 3")
    error.match("ZZZ")


def test_load_csv_no_rating_column(tmp_path):
    path = tmp_path / "norating.csv"
    path.write_text("id,a\nx,1\n")
    with pytest.raises(ParseError) as error:
        load_csv(path)
    error.match("rating")


def test_load_csv_malformed_row(tmp_path):
    path = tmp_path / "malformed.csv"
    path.write_text("id,a,rating\nx,1,AAA\ny,2,3,4,AA\n")
    with pytest.raises(ParseError) as error:
        load_csv(path)
    assert error.value.row == 3


@pytest.mark.parametrize("row", ["c2,BB", "c2,BB,1", "c2"])
def test_load_csv_truncated_row(tmp_path, row):
    path = tmp_path / "truncated.csv"
    path.write_text(f"id,rating,revenue,debt\nc1,AAA,1,2\n{row}\nc3,A,3,4\n")
    with pytest.raises(ParseError) as error:
        load_csv(path)
    assert error.value.row == 3
    error.match("expected 4 fields")


def test_load_csv_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(ParseError):
        load_csv(path)


def test_data_errors_are_value_errors():
    assert issubclass(ParseError, DataError)
    assert issubclass(DataError, ValueError)


def test_write_csv_round_trip(tmp_path):
    records = load_csv(RAW_SAMPLE)
    out = tmp_path / "out.csv"
    write_csv(records, out)
    assert load_csv(out) == records


def test_fit_schema_sample():
    schema = fit_schema(load_csv(RAW_SAMPLE))
    assert schema.numeric == [NumericFeature("revenue", 10.0, 30.0, 20.0),
                              NumericFeature("debt_ratio", 0.25, 0.75, 0.5)]
    assert schema.categorical == [
        CategoricalFeature("sector", ["bank", "energy"], "bank")]
    assert schema.dropped == []
    assert schema.dimension == 4
    assert schema.feature_names() == ["revenue", "debt_ratio",
                                      "sector=bank", "sector=energy"]


def _raw(id, value, label="AAA"):
    return RawRecord(id, {"a": value}, {}, label)


def test_fit_schema_mean_ignores_missing():
    schema = fit_schema([_raw("1", 1.0), _raw("2", None), _raw("3", 3.0)])
    feature = schema.numeric[0]
    assert (feature.minimum, feature.maximum, feature.mean) == (1.0, 3.0,
                                                                2.0)


def test_fit_schema_drops_mostly_missing_feature():
    records = [RawRecord(str(i), {"a": float(i),
                                  "b": float(i) if i < 2 else None},
                         {}, "A")
               for i in range(5)]
    schema = fit_schema(records, 0.5)
    assert schema.dropped == ["b"]
    assert [feature.name for feature in schema.numeric] == ["a"]


def test_fit_schema_no_missing_values():
    records = [_raw(str(i), float(i)) for i in range(4)]
    schema = fit_schema(records)
    assert schema.dropped == []
    assert schema.numeric[0].mean == 1.5


def test_fit_schema_kept_feature_without_values():
    with pytest.raises(SchemaError):
        fit_schema([_raw("1", None), _raw("2", None)], 1.0)


@pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5])
def test_fit_schema_bad_fraction(fraction):
    with pytest.raises(ConfigError):
        fit_schema([_raw("1", 1.0)], fraction)


def test_fit_schema_empty():
    with pytest.raises(SchemaError):
        fit_schema([])


def test_schema_json_round_trip(tmp_path):
    schema = fit_schema(load_csv(RAW_SAMPLE))
    path = tmp_path / "schema.json"
    save_schema(schema, path)
    assert load_schema(path) == schema


def test_schema_from_bad_json():
    with pytest.raises(SchemaError):
        FeatureSchema.from_json('{"numeric": 3}')


@pytest.mark.parametrize(["value", "expected"], [
    (5.0, 0.5),
    (0.0, 0.0),
    (10.0, 1.0),
    (-5.0, 0.0),
    (15.0, 1.0),
    (None, 0.3),
])
def test_preprocess_numeric(value, expected):
    schema = FeatureSchema(numeric=[NumericFeature("a", 0.0, 10.0, 3.0)])
    processed = preprocess(_raw("1", value), schema)
    assert processed.x.tolist() == [pytest.approx(expected)]


def test_preprocess_constant_feature():
    schema = FeatureSchema(numeric=[NumericFeature("a", 4.0, 4.0, 4.0)])
    assert preprocess(_raw("1", 4.0), schema).x.tolist() == [0.0]


def test_preprocess_one_hot():
    schema = FeatureSchema(categorical=[
        CategoricalFeature("c", ["A", "B", "C"], "B")])
    record = RawRecord("1", {}, {"c": "A"}, "AA")
    assert preprocess(record, schema).x.tolist() == [1.0, 0.0, 0.0]
    missing = RawRecord("2", {}, {"c": None}, "AA")
    assert preprocess(missing, schema).x.tolist() == [0.0, 1.0, 0.0]


def test_preprocess_unknown_category():
    schema = FeatureSchema(categorical=[
        CategoricalFeature("c", ["A", "B"], "A")])
    with pytest.raises(EncodingError) as error:
        preprocess(RawRecord("1", {}, {"c": "Z"}, "AA"), schema)
    error.match("'Z'")


def test_preprocess_sample_is_deterministic():
    raw = load_csv(RAW_SAMPLE)
    first = preprocess_all(raw, fit_schema(raw))
    second = preprocess_all(raw, fit_schema(raw))
    for a, b in zip(first, second):
        assert a.x.tobytes() == b.x.tobytes()
    assert first[0].x.tolist() == [0.0, 0.5, 1.0, 0.0]
    # Missing revenue takes the mean, missing sector the mode.
    assert first[1].x.tolist() == [0.5, 0.0, 0.0, 1.0]
    assert first[3].x.tolist() == [0.5, 1.0, 1.0, 0.0]


@given(st.lists(st.one_of(st.none(),
                          st.floats(-1e6, 1e6, allow_nan=False)),
                min_size=2, max_size=20).filter(
    lambda values: any(value is not None for value in values)))
def test_preprocess_numeric_in_unit_interval(values):
    records = [_raw(str(i), value) for i, value in enumerate(values)]
    schema = fit_schema(records, 1.0)
    for record in preprocess_all(records, schema):
        assert 0.0 <= record.x[0] <= 1.0


def test_processed_csv_round_trip(tmp_path, small_dataset):
    path = tmp_path / "processed.csv"
    write_processed_csv(small_dataset, path)
    loaded = load_processed_csv(path)
    assert [r.record_id for r in loaded] == [r.record_id
                                             for r in small_dataset]
    assert [r.label_index for r in loaded] == [r.label_index
                                               for r in small_dataset]
    for a, b in zip(loaded, small_dataset):
        assert a.x.tobytes() == b.x.tobytes()


def test_load_processed_csv_bad_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,f1,label_index\na,0.5,1\n")
    with pytest.raises(ParseError):
        load_processed_csv(path)


def test_smote_balanced_unchanged():
    dataset = [_record(0, 0.0, 0.0), _record(0, 1.0, 0.0),
               _record(1, 0.0, 1.0), _record(1, 1.0, 1.0)]
    assert smote(dataset, k=5, seed=1) == dataset


def test_smote_ten_and_four():
    rng = np.random.default_rng(2)
    dataset = ([_record(0, *rng.random(3)) for _ in range(10)] +
               [_record(1, *rng.random(3)) for _ in range(4)])
    balanced = smote(dataset, k=5, seed=0)
    assert balanced[:len(dataset)] == dataset
    counts = collections.Counter(r.label_index for r in balanced)
    assert counts == {0: 10, 1: 10}
    minority = [r.x for r in dataset if r.label_index == 1]
    for synthetic in balanced[len(dataset):]:
        assert synthetic.label_index == 1
        residual = min(_segment_residual(synthetic.x, a, b)
                       for a in minority for b in minority)
        assert residual < 1e-9


@pytest.mark.slow
def test_smote_three_classes():
    rng = np.random.default_rng(8)
    dataset = [_record(label, *rng.normal(label, 1.0, size=4))
               for label, size in enumerate((200, 40, 10))
               for _ in range(size)]
    balanced = smote(dataset, k=5, seed=3)
    counts = collections.Counter(r.label_index for r in balanced)
    assert counts == {0: 200, 1: 200, 2: 200}
    for label in (1, 2):
        members = np.vstack([r.x for r in dataset if r.label_index == label])
        for synthetic in balanced[len(dataset):]:
            if synthetic.label_index != label:
                continue
            assert (synthetic.x >= members.min(axis=0) - 1e-12).all()
            assert (synthetic.x <= members.max(axis=0) + 1e-12).all()
            residual = min(_segment_residual(synthetic.x, a, b)
                           for a in members for b in members)
            assert residual < 1e-9


def test_smote_deterministic():
    rng = np.random.default_rng(4)
    dataset = ([_record(0, *rng.random(2)) for _ in range(6)] +
               [_record(1, *rng.random(2)) for _ in range(3)])
    first = smote(dataset, k=2, seed=9)
    second = smote(dataset, k=2, seed=9)
    assert [r.x.tolist() for r in first] == [r.x.tolist() for r in second]


def test_smote_two_points_lie_between_them():
    dataset = ([_record(0, float(i), 0.0) for i in range(5)] +
               [_record(1, 0.0, 0.0), _record(1, 2.0, 2.0)])
    for synthetic in smote(dataset, k=5, seed=0)[len(dataset):]:
        a, b = synthetic.x
        assert a == pytest.approx(b)
        assert 0.0 <= a <= 2.0


def test_smote_singleton_class():
    dataset = [_record(0, 0.0), _record(0, 1.0), _record(1, 0.5)]
    with pytest.raises(RebalanceError):
        smote(dataset)


def test_smote_bad_k():
    with pytest.raises(ConfigError):
        smote([_record(0, 0.0), _record(0, 1.0)], k=0)


def test_stratified_split_sizes():
    dataset = [_record(i % 4, float(i)) for i in range(100)]
    train, test = stratified_split(dataset, 0.2, seed=0)
    assert (len(train), len(test)) == (80, 20)
    assert collections.Counter(r.label_index for r in test) == {
        0: 5, 1: 5, 2: 5, 3: 5}


def test_stratified_split_partitions_input():
    dataset = [_record(i % 3, float(i)) for i in range(31)]
    train, test = stratified_split(dataset, 0.3, seed=2)
    train_ids = {id(r) for r in train}
    test_ids = {id(r) for r in test}
    assert not train_ids & test_ids
    assert train_ids | test_ids == {id(r) for r in dataset}


def test_stratified_split_seeds_differ():
    dataset = [_record(i % 2, float(i)) for i in range(100)]
    _, first = stratified_split(dataset, 0.2, seed=0)
    _, second = stratified_split(dataset, 0.2, seed=1)
    assert len(first) == len(second)
    assert [r.x[0] for r in first] != [r.x[0] for r in second]


@given(st.lists(st.integers(2, 30), min_size=1, max_size=6),
       st.floats(0.05, 0.95), st.integers(0, 1000))
def test_stratified_split_per_class_counts(sizes, fraction, seed):
    dataset = [_record(label, float(i))
               for label, size in enumerate(sizes) for i in range(size)]
    _, test = stratified_split(dataset, fraction, seed)
    counts = collections.Counter(r.label_index for r in test)
    for label, size in enumerate(sizes):
        assert abs(counts[label] - fraction * size) <= 1.0 + 1e-9


def test_stratified_split_singleton_class_warns():
    dataset = [_record(0, float(i)) for i in range(10)] + [_record(1, 9.0)]
    with pytest.warns(UserWarning, match="single sample"):
        train, _ = stratified_split(dataset, 0.2, seed=0)
    assert dataset[-1] in train


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.5])
def test_stratified_split_bad_fraction(fraction):
    with pytest.raises(ConfigError):
        stratified_split([_record(0, 0.0)], fraction)


def test_generate_one_per_class():
    records = generate_synthetic(9, 5, 9, seed=1)
    assert sorted(r.label_index for r in records) == list(range(9))


def test_generate_zero_separation():
    prototypes = synthetic_prototypes(6, 4, 0.0, seed=3)
    assert (prototypes == 0.5).all()


def test_generate_nearest_prototype():
    records = generate_synthetic(90, 10, 9, separation=1.0, seed=4,
                                 noise=0.01)
    prototypes = synthetic_prototypes(10, 9, 1.0, seed=4)
    for record in records:
        distances = np.linalg.norm(prototypes - record.x, axis=1)
        assert int(distances.argmin()) == record.label_index


def test_generate_is_deterministic():
    first = generate_synthetic(50, 4, 3, seed=7)
    second = generate_synthetic(50, 4, 3, seed=7)
    assert [r.x.tobytes() for r in first] == [r.x.tobytes() for r in second]


def test_generate_values_in_unit_interval():
    for record in generate_synthetic(100, 6, 9, separation=3.0, seed=0,
                                     noise=0.5):
        assert ((record.x >= 0.0) & (record.x <= 1.0)).all()


def test_generate_imbalance():
    imbalance = [0.5, 0.3, 0.2]
    records = generate_synthetic(101, 4, 3, imbalance=imbalance, seed=2)
    counts = collections.Counter(r.label_index for r in records)
    for label, proportion in enumerate(imbalance):
        assert abs(counts[label] - proportion * 101) <= 1


@pytest.mark.parametrize("imbalance", [
    [0.5, 0.5],
    [0.5, 0.6, -0.1],
    [0.2, 0.2, 0.2],
])
def test_generate_bad_imbalance(imbalance):
    with pytest.raises(ConfigError):
        generate_synthetic(30, 4, 3, imbalance=imbalance)


def test_generate_too_few_samples():
    with pytest.raises(ConfigError):
        generate_synthetic(5, 4, 9)


def test_class_sizes_every_class_present():
    sizes = class_sizes(10, [0.97, 0.01, 0.01, 0.01])
    assert sizes.sum() == 10
    assert (sizes >= 1).all()


def test_ratings_vocabulary():
    assert len(RATINGS) == 9
    assert RATINGS[0] == "AAA" and RATINGS[-1] == "C"
