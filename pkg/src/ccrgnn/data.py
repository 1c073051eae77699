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

"""Reading, cleaning, encoding and rebalancing corporate rating datasets.

Raw data is a CSV file with a header row and a ``rating`` column holding one
of the nine grades in :data:`RATINGS`. An optional ``id`` column identifies
the corporation. Every other column is a feature: a column whose non-empty
cells all parse as numbers is numeric, anything else is categorical. Empty
cells are missing values.
"""

import collections
import csv
import json
import logging
import math
import os
import re
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import pandas as pd

from sklearn.neighbors import NearestNeighbors

from .errors import (ConfigError, DataError, EncodingError, ParseError,
                     RebalanceError, SchemaError, ValidationError)

__all__ = ["RATINGS", "RawRecord", "NumericFeature", "CategoricalFeature",
           "FeatureSchema", "ProcessedRecord", "load_csv", "write_csv",
           "fit_schema", "preprocess", "preprocess_all", "smote",
           "stratified_split", "synthetic_prototypes", "class_sizes",
           "generate_synthetic", "write_processed_csv",
           "load_processed_csv", "save_schema", "load_schema"]

logger = logging.getLogger(__name__)

#: Rating grades from best to worst. A label index is a position in here.
RATINGS = ("AAA", "AA", "A", "BBB", "BB", "B", "CCC", "CC", "C")

LABEL_COLUMN = "rating"
ID_COLUMN = "id"
PROCESSED_LABEL_COLUMN = "label_index"

PathLike = Union[str, os.PathLike]


@dataclass
class RawRecord:
    id: str
    numeric: Dict[str, Optional[float]]
    categorical: Dict[str, Optional[str]]
    label: str

    @property
    def label_index(self) -> int:
        return RATINGS.index(self.label)


@dataclass
class NumericFeature:
    name: str
    minimum: float
    maximum: float
    mean: float


@dataclass
class CategoricalFeature:
    name: str
    vocabulary: List[str]
    mode: str


@dataclass
class FeatureSchema:
    """Feature order, statistics and vocabularies learned from a dataset.

    Encoded vectors hold the numeric features first, in declaration order,
    followed by one one-hot block per categorical feature."""
    numeric: List[NumericFeature] = field(default_factory=list)
    categorical: List[CategoricalFeature] = field(default_factory=list)
    dropped: List[str] = field(default_factory=list)

    @property
    def dimension(self) -> int:
        return len(self.numeric) + sum(len(feature.vocabulary)
                                       for feature in self.categorical)

    def feature_names(self) -> List[str]:
        names = [feature.name for feature in self.numeric]
        for feature in self.categorical:
            names.extend(f"{feature.name}={value}"
                         for value in feature.vocabulary)
        return names

    def to_json(self) -> str:
        return json.dumps(dict(
            dimension=self.dimension,
            numeric=[vars(feature) for feature in self.numeric],
            categorical=[vars(feature) for feature in self.categorical],
            dropped=self.dropped), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FeatureSchema":
        try:
            document = json.loads(text)
            return cls(
                numeric=[NumericFeature(**item)
                         for item in document["numeric"]],
                categorical=[CategoricalFeature(**item)
                             for item in document["categorical"]],
                dropped=list(document["dropped"]))
        except (ValueError, KeyError, TypeError) as error:
            raise SchemaError(f"Invalid schema document: {error}") from error

    @classmethod
    def describe(cls, records: Sequence["ProcessedRecord"]
                 ) -> "FeatureSchema":
        """Schema for already encoded data: every column ``f<i>`` is a
        numeric feature on [0, 1]."""
        if not records:
            raise SchemaError("Cannot describe an empty dataset")
        matrix = np.vstack([record.x for record in records])
        return cls(numeric=[
            NumericFeature(f"f{i}", float(column.min()), float(column.max()),
                           float(np.clip(column.mean(), column.min(),
                                         column.max())))
            for i, column in enumerate(matrix.T)])


@dataclass(eq=False)
class ProcessedRecord:
    x: np.ndarray
    label_index: int
    record_id: Optional[str] = None


def _parse_error_row(message: str) -> Optional[int]:
    match = re.search(r"line (\d+)", message)
    return int(match.group(1)) if match else None


def _check_field_counts(path: PathLike):
    # pandas pads short rows with empty cells.
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            return
        for row in reader:
            if row and len(row) != len(header):
                raise ParseError(f"{path}: expected {len(header)} fields, "
                                 f"found {len(row)}", row=reader.line_num)


def load_csv(path: PathLike) -> List[RawRecord]:
    """Read raw records from a UTF-8 CSV file.

    Rows are numbered by their line in the file, the header being line 1.
    """
    try:
        _check_field_counts(path)
    except (UnicodeDecodeError, csv.Error) as error:
        raise ParseError(f"{path}: {error}") from error
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False,
                            na_filter=False, encoding="utf-8")
    except pd.errors.EmptyDataError as error:
        raise ParseError(f"{path}: no header row") from error
    except pd.errors.ParserError as error:
        raise ParseError(str(error), row=_parse_error_row(str(error))
                         ) from error
    if LABEL_COLUMN not in frame.columns:
        raise ParseError(f"{path}: no '{LABEL_COLUMN}' column")
    frame = frame.fillna("")
    feature_columns = [column for column in frame.columns
                       if column not in (LABEL_COLUMN, ID_COLUMN)]
    numeric_columns = []
    for column in feature_columns:
        cells = frame[column]
        present = cells[cells != ""]
        parsed = pd.to_numeric(present, errors="coerce")
        if parsed.notna().all():
            numeric_columns.append(column)
    categorical_columns = [column for column in feature_columns
                           if column not in numeric_columns]

    records = []
    for position, row in enumerate(frame.itertuples(index=False)):
        cells = dict(zip(frame.columns, row))
        line = position + 2
        label = cells[LABEL_COLUMN].strip()
        if label not in RATINGS:
            raise ValidationError(
                f"row {line}: unknown rating {label!r}; expected one of "
                f"{', '.join(RATINGS)}")
        record_id = cells.get(ID_COLUMN) or str(position)
        records.append(RawRecord(
            id=record_id,
            numeric={column: float(cells[column]) if cells[column] != ""
                     else None for column in numeric_columns},
            categorical={column: cells[column] if cells[column] != ""
                         else None for column in categorical_columns},
            label=label))
    return records


def write_csv(records: Sequence[RawRecord], path: PathLike):
    """Write raw records in the format :func:`load_csv` reads."""
    if not records:
        raise DataError("Nothing to write")
    first = records[0]
    columns = ([ID_COLUMN] + list(first.numeric) + list(first.categorical) +
               [LABEL_COLUMN])
    rows = []
    for record in records:
        row = [record.id]
        row.extend("" if value is None else repr(float(value))
                   for value in record.numeric.values())
        row.extend("" if value is None else value
                   for value in record.categorical.values())
        row.append(record.label)
        rows.append(row)
    pd.DataFrame(rows, columns=columns, dtype=str).to_csv(
        path, index=False, encoding="utf-8")


def fit_schema(records: Sequence[RawRecord],
               missing_drop_fraction: float = 0.5) -> FeatureSchema:
    """Learn feature statistics and vocabularies.

    Features missing in more than ``missing_drop_fraction`` of the records
    are dropped. Statistics only use non-missing values.
    """
    if not records:
        raise SchemaError("Cannot fit a schema on an empty dataset")
    if not 0.0 < missing_drop_fraction <= 1.0:
        raise ConfigError(f"missing_drop_fraction must lie in (0, 1], got "
                          f"{missing_drop_fraction}")
    numeric_names = list(records[0].numeric)
    categorical_names = list(records[0].categorical)
    for record in records:
        if (list(record.numeric) != numeric_names or
                list(record.categorical) != categorical_names):
            raise SchemaError(f"Record {record.id!r} has a different set of "
                              f"features than record {records[0].id!r}")
    total = len(records)
    schema = FeatureSchema()

    for name in numeric_names:
        values = [record.numeric[name] for record in records
                  if record.numeric[name] is not None]
        if 1 - len(values) / total > missing_drop_fraction:
            schema.dropped.append(name)
            continue
        if not values:
            raise SchemaError(f"Numeric feature {name!r} has no values")
        minimum, maximum = float(min(values)), float(max(values))
        mean = min(max(math.fsum(values) / len(values), minimum), maximum)
        schema.numeric.append(NumericFeature(name, minimum, maximum, mean))

    for name in categorical_names:
        values = [record.categorical[name] for record in records
                  if record.categorical[name] is not None]
        if 1 - len(values) / total > missing_drop_fraction:
            schema.dropped.append(name)
            continue
        if not values:
            raise SchemaError(f"Categorical feature {name!r} has no values")
        vocabulary = list(dict.fromkeys(values))
        counts = collections.Counter(values)
        mode = max(vocabulary, key=lambda value: counts[value])
        schema.categorical.append(
            CategoricalFeature(name, vocabulary, mode))

    if schema.dropped:
        logger.info("Dropped %d feature(s) with too many missing values: "
                    "%s", len(schema.dropped), ", ".join(schema.dropped))
    return schema


def preprocess(record: RawRecord, schema: FeatureSchema) -> ProcessedRecord:
    """Encode a record: min-max scaling for numeric features (missing values
    take the feature mean, constant features become 0) and one-hot blocks
    for categorical features (missing values take the most frequent
    category)."""
    vector = []
    for feature in schema.numeric:
        value = record.numeric.get(feature.name)
        if value is None:
            value = feature.mean
        span = feature.maximum - feature.minimum
        if span > 0:
            scaled = (value - feature.minimum) / span
            vector.append(min(max(scaled, 0.0), 1.0))
        else:
            vector.append(0.0)
    for feature in schema.categorical:
        category = record.categorical.get(feature.name)
        if category is None:
            category = feature.mode
        if category not in feature.vocabulary:
            raise EncodingError(
                f"Record {record.id!r}: value {category!r} of "
                f"{feature.name!r} is not in the vocabulary "
                f"{feature.vocabulary}")
        block = [0.0] * len(feature.vocabulary)
        block[feature.vocabulary.index(category)] = 1.0
        vector.extend(block)
    return ProcessedRecord(np.array(vector, dtype=np.float64),
                           record.label_index, record.id)


def preprocess_all(records: Sequence[RawRecord],
                   schema: FeatureSchema) -> List[ProcessedRecord]:
    return [preprocess(record, schema) for record in records]


def _neighbours_without_self(indices: np.ndarray, k: int) -> np.ndarray:
    # kneighbors on the fitted points usually puts the point itself first,
    # but exact duplicates may come earlier.
    result = np.empty((indices.shape[0], k), dtype=np.int64)
    for row, candidates in enumerate(indices):
        others = [index for index in candidates if index != row]
        result[row] = others[:k]
    return result


def smote(dataset: Sequence[ProcessedRecord], k: int = 5,
          seed: int = 0) -> List[ProcessedRecord]:
    """Oversample every class up to the size of the largest class.

    A synthetic point is ``x + u * (x_nn - x)`` with ``x`` a random member of
    the class, ``x_nn`` one of its ``k`` nearest same-class neighbours and
    ``u`` uniform on [0, 1]. The original records are returned first and
    unchanged, followed by the synthetic records class by class.
    """
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    labels = np.array([record.label_index for record in dataset])
    classes, counts = np.unique(labels, return_counts=True)
    for label, count in zip(classes, counts):
        if count < 2:
            raise RebalanceError(
                f"Class {label} has {count} sample(s); SMOTE needs at least "
                f"two to interpolate")
    result = list(dataset)
    if len(classes) == 0:
        return result
    target = counts.max()
    rng = np.random.default_rng(seed)
    for label, count in zip(classes, counts):
        needed = int(target - count)
        if needed == 0:
            continue
        members = np.vstack([record.x for record in dataset
                             if record.label_index == label])
        n_neighbours = min(k, count - 1)
        finder = NearestNeighbors(n_neighbors=n_neighbours + 1,
                                  algorithm="brute").fit(members)
        _, indices = finder.kneighbors(members)
        neighbours = _neighbours_without_self(indices, n_neighbours)
        bases = rng.integers(0, count, size=needed)
        picks = rng.integers(0, n_neighbours, size=needed)
        gaps = rng.random(needed)
        for number, (base, pick, gap) in enumerate(zip(bases, picks, gaps)):
            source = members[base]
            neighbour = members[neighbours[base, pick]]
            result.append(ProcessedRecord(
                source + gap * (neighbour - source), int(label),
                f"smote-{label}-{number}"))
        logger.info("SMOTE: class %d, %d original, %d synthetic",
                    label, count, needed)
    return result


def _largest_remainder(ideal: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(ideal).astype(np.int64)
    remainder = total - int(base.sum())
    if remainder > 0:
        # Stable sort keeps the lowest class first among equal fractions.
        order = np.argsort(-(ideal - base), kind="stable")
        base[order[:remainder]] += 1
    return base


def stratified_split(dataset: Sequence[ProcessedRecord],
                     test_fraction: float = 0.2, seed: int = 0
                     ) -> Tuple[List[ProcessedRecord], List[ProcessedRecord]]:
    """Split into train and test sets keeping class proportions.

    Classes with a single sample cannot be split; the sample goes to the
    training set with a warning. Both parts keep the input order."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got "
                          f"{test_fraction}")
    rng = np.random.default_rng(seed)
    groups: Dict[int, List[int]] = collections.defaultdict(list)
    for index, record in enumerate(dataset):
        groups[record.label_index].append(index)
    labels = sorted(groups)
    for label in labels:
        if len(groups[label]) == 1:
            warnings.warn(f"Class {label} has a single sample; it is placed "
                          f"in the training set", UserWarning)
    splittable = [label for label in labels if len(groups[label]) > 1]
    ideal = np.array([test_fraction * len(groups[label])
                      for label in splittable])
    total = int(math.floor(ideal.sum() + 0.5))
    quotas = _largest_remainder(ideal, total)
    test_indices = set()
    for label, quota in zip(splittable, quotas):
        chosen = rng.permutation(groups[label])[:quota]
        test_indices.update(int(index) for index in chosen)
    train = [record for index, record in enumerate(dataset)
             if index not in test_indices]
    test = [record for index, record in enumerate(dataset)
            if index in test_indices]
    return train, test


def synthetic_prototypes(d: int, m: int, separation: float,
                         seed: int = 0) -> np.ndarray:
    """Class centres used by :func:`generate_synthetic`, one row per class.

    Uniform points in [0, 1]^d are pulled towards (separation < 1) or pushed
    away from (separation > 1) the cube centre and clipped to the cube."""
    rng = np.random.default_rng([seed, 0])
    uniform = rng.random((m, d))
    return np.clip(0.5 + separation * (uniform - 0.5), 0.0, 1.0)


def class_sizes(n: int, imbalance: Sequence[float]) -> np.ndarray:
    """Class counts following ``imbalance``, summing to ``n``, with at least
    one sample per class."""
    proportions = np.asarray(imbalance, dtype=np.float64)
    sizes = _largest_remainder(proportions * n, n)
    for label in np.flatnonzero(sizes == 0):
        sizes[int(sizes.argmax())] -= 1
        sizes[label] += 1
    return sizes


def generate_synthetic(n: int, d: int, m: int = len(RATINGS),
                       separation: float = 1.0,
                       imbalance: Optional[Sequence[float]] = None,
                       seed: int = 0, noise: float = 0.08
                       ) -> List[ProcessedRecord]:
    """Generate an encoded dataset standing in for real corporate data.

    Each sample is its class prototype plus Gaussian noise, clipped to
    [0, 1]. The records are shuffled.
    """
    if imbalance is None:
        imbalance = [1.0 / m] * m
    if m < 2:
        raise ConfigError(f"Need at least two classes, got m={m}")
    if d < 2:
        raise ConfigError(f"Need at least two features, got d={d}")
    if n < m:
        raise ConfigError(f"Need at least one sample per class: n={n} < "
                          f"m={m}")
    if separation < 0 or noise < 0:
        raise ConfigError("separation and noise must be non-negative")
    proportions = np.asarray(imbalance, dtype=np.float64)
    if (proportions.shape != (m,) or (proportions < 0).any() or
            abs(proportions.sum() - 1.0) > 1e-9):
        raise ConfigError(f"imbalance must be {m} non-negative numbers "
                          f"summing to 1, got {list(imbalance)}")
    prototypes = synthetic_prototypes(d, m, separation, seed)
    rng = np.random.default_rng([seed, 1])
    vectors, labels = [], []
    for label, size in enumerate(class_sizes(n, proportions)):
        for _ in range(size):
            sample = prototypes[label] + noise * rng.standard_normal(d)
            vectors.append(np.clip(sample, 0.0, 1.0))
            labels.append(label)
    order = rng.permutation(n)
    return [ProcessedRecord(vectors[index], labels[index], f"syn-{i:05d}")
            for i, index in enumerate(order)]


def write_processed_csv(records: Sequence[ProcessedRecord], path: PathLike):
    """Write encoded records with columns ``id``, ``f0`` ... ``f{d-1}`` and
    ``label_index``."""
    if not records:
        raise DataError("Nothing to write")
    dimension = records[0].x.shape[0]
    frame = pd.DataFrame(np.vstack([record.x for record in records]),
                         columns=[f"f{i}" for i in range(dimension)])
    frame.insert(0, ID_COLUMN, [record.record_id if record.record_id
                                is not None else str(i)
                                for i, record in enumerate(records)])
    frame[PROCESSED_LABEL_COLUMN] = [record.label_index
                                     for record in records]
    frame.to_csv(path, index=False, encoding="utf-8")


def load_processed_csv(path: PathLike) -> List[ProcessedRecord]:
    try:
        frame = pd.read_csv(path, dtype={ID_COLUMN: str}, encoding="utf-8",
                            float_precision="round_trip")
    except pd.errors.EmptyDataError as error:
        raise ParseError(f"{path}: no header row") from error
    except pd.errors.ParserError as error:
        raise ParseError(str(error), row=_parse_error_row(str(error))
                         ) from error
    feature_columns = [column for column in frame.columns
                       if re.fullmatch(r"f\d+", str(column))]
    expected = [f"f{i}" for i in range(len(feature_columns))]
    if (feature_columns != expected or
            PROCESSED_LABEL_COLUMN not in frame.columns):
        raise ParseError(f"{path}: expected columns f0..f<d-1> and "
                         f"'{PROCESSED_LABEL_COLUMN}'")
    matrix = frame[feature_columns].to_numpy(dtype=np.float64)
    if not np.isfinite(matrix).all():
        bad = int(np.flatnonzero(~np.isfinite(matrix).all(axis=1))[0])
        raise ParseError("missing or non-numeric feature value", row=bad + 2)
    labels = frame[PROCESSED_LABEL_COLUMN].to_numpy()
    if ID_COLUMN in frame.columns:
        ids = [str(value) for value in frame[ID_COLUMN]]
    else:
        ids = [str(i) for i in range(len(frame))]
    return [ProcessedRecord(matrix[i].copy(), int(labels[i]), ids[i])
            for i in range(len(frame))]


def save_schema(schema: FeatureSchema, path: PathLike):
    with open(path, "wt", encoding="utf-8") as schema_h:
        schema_h.write(schema.to_json())


def load_schema(path: PathLike) -> FeatureSchema:
    with open(path, "rt", encoding="utf-8") as schema_h:
        return FeatureSchema.from_json(schema_h.read())
