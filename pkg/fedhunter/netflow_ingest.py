# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import csv
import enum
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.special
from sklearn.model_selection import train_test_split

from fedhunter import utils
from fedhunter.errors import (
    ConfigError,
    DataError,
    FeatureRangeError,
    KindError,
    RowError,
    SchemaError,
)

logger = logging.getLogger(__name__)


class NormalizationMethod(enum.Enum):
    MinMax = "minmax"
    Erf = "erf"
    Drop = "drop"


@dataclass(frozen=True)
class NormalizationSpec:
    feature_name: str
    method: NormalizationMethod
    feature_size_bytes: int
    k_w: Optional[float] = None
    column: Optional[str] = None

    def __post_init__(self):
        if self.method == NormalizationMethod.Erf:
            assert self.k_w is not None and self.k_w > 0, self.feature_name
        else:
            assert self.k_w is None, self.feature_name

    @property
    def x_max(self):
        return 256**self.feature_size_bytes - 1


# Per-feature normalization of the NetFlow v1 features. Source and destination
# addresses are dropped, packet counts use k_w=20, byte counts 900 and the flow
# duration 600.
NORMALIZATION_TABLE = (
    NormalizationSpec("IPV4_SRC_ADDR", NormalizationMethod.Drop, 4),
    NormalizationSpec("IPV4_DST_ADDR", NormalizationMethod.Drop, 4),
    NormalizationSpec("PROTOCOL", NormalizationMethod.MinMax, 1),
    NormalizationSpec("L4_SRC_PORT", NormalizationMethod.MinMax, 2),
    NormalizationSpec("L4_DST_PORT", NormalizationMethod.MinMax, 2),
    NormalizationSpec("IN_PKTS", NormalizationMethod.Erf, 4, 20.0),
    NormalizationSpec("OUT_PKTS", NormalizationMethod.Erf, 4, 20.0),
    NormalizationSpec("IN_BYTES", NormalizationMethod.Erf, 4, 900.0),
    NormalizationSpec("OUT_BYTES", NormalizationMethod.Erf, 4, 900.0),
    NormalizationSpec("TCP_FLAGS", NormalizationMethod.MinMax, 1),
    NormalizationSpec(
        "FLOW_DURATION_MS",
        NormalizationMethod.Erf,
        4,
        600.0,
        column="FLOW_DURATION_MILLISECONDS",
    ),
    NormalizationSpec("L7_PROTO", NormalizationMethod.MinMax, 2),
)

FEATURE_SPECS = tuple(
    s for s in NORMALIZATION_TABLE if s.method != NormalizationMethod.Drop
)
FEATURE_NAMES = tuple(s.feature_name for s in FEATURE_SPECS)
NUM_FEATURES = len(FEATURE_NAMES)
PORT_FEATURES = ("L4_SRC_PORT", "L4_DST_PORT")

LABEL_COLUMN = "Label"

# Column layout of the NF-ToN-IoT export (NetFlow v1 feature set)
SCHEMAS = {
    "nf-ton-iot": (
        "IPV4_SRC_ADDR",
        "L4_SRC_PORT",
        "IPV4_DST_ADDR",
        "L4_DST_PORT",
        "PROTOCOL",
        "L7_PROTO",
        "IN_BYTES",
        "OUT_BYTES",
        "IN_PKTS",
        "OUT_PKTS",
        "TCP_FLAGS",
        "FLOW_DURATION_MILLISECONDS",
        LABEL_COLUMN,
    ),
}


def _column_of(spec):
    return spec.column or spec.feature_name


@dataclass
class RawFlowRecord:
    src_addr: str
    dst_addr: str
    protocol: int
    l4_src_port: int
    l4_dst_port: int
    in_pkts: int
    out_pkts: int
    in_bytes: int
    out_bytes: int
    tcp_flags: int
    flow_duration_ms: int
    l7_proto: int
    label: int

    def to_row(self):
        return {
            "IPV4_SRC_ADDR": self.src_addr,
            "L4_SRC_PORT": self.l4_src_port,
            "IPV4_DST_ADDR": self.dst_addr,
            "L4_DST_PORT": self.l4_dst_port,
            "PROTOCOL": self.protocol,
            "L7_PROTO": self.l7_proto,
            "IN_BYTES": self.in_bytes,
            "OUT_BYTES": self.out_bytes,
            "IN_PKTS": self.in_pkts,
            "OUT_PKTS": self.out_pkts,
            "TCP_FLAGS": self.tcp_flags,
            "FLOW_DURATION_MILLISECONDS": self.flow_duration_ms,
            LABEL_COLUMN: self.label,
        }


@dataclass(frozen=True)
class FeatureVector:
    values: Tuple[float, ...]
    label: int

    def __post_init__(self):
        if len(self.values) != NUM_FEATURES:
            raise DataError(
                f"feature vector needs {NUM_FEATURES} components, got {len(self.values)}"
            )
        for name, v in zip(FEATURE_NAMES, self.values):
            if not 0.0 <= v <= 1.0:
                raise FeatureRangeError(name, v)
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label}")

    def to_dict(self):
        return {"values": list(self.values), "label": self.label}


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_kept: int = 0
    rows_clamped: int = 0
    errors: List[RowError] = field(default_factory=list)

    def summary(self):
        return (
            f"{self.rows_kept}/{self.rows_read} rows kept, "
            f"{len(self.errors)} row errors, {self.rows_clamped} rows clamped"
        )


def normalize_minmax(x, feature_size_bytes, feature="value"):
    x_max = 256**feature_size_bytes - 1
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > x_max):
        raise FeatureRangeError(
            feature, x, f"{feature}={x} outside [0, {x_max}] for a {feature_size_bytes}-byte field"
        )
    result = arr / x_max
    return float(result) if result.ndim == 0 else result


def normalize_erf(x, k_w, feature="value"):
    if not k_w > 0:
        raise ConfigError(f"normalization coefficient for {feature} must be positive")
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0):
        raise FeatureRangeError(
            feature, x, f"{feature}={x} is negative, flow counters cannot be negative"
        )
    result = scipy.special.erf(arr / k_w)
    return float(result) if result.ndim == 0 else result


def normalize_feature(spec, x):
    if spec.method == NormalizationMethod.MinMax:
        return normalize_minmax(x, spec.feature_size_bytes, spec.feature_name)
    elif spec.method == NormalizationMethod.Erf:
        return normalize_erf(x, spec.k_w, spec.feature_name)
    raise ValueError(f"{spec.feature_name} is dropped and has no normalized value")


def normalize_record(record: RawFlowRecord, drop_ports=False):
    row = record.to_row()
    values = []
    for spec in FEATURE_SPECS:
        if drop_ports and spec.feature_name in PORT_FEATURES:
            values.append(0.0)
            continue
        values.append(normalize_feature(spec, row[_column_of(spec)]))
    return FeatureVector(tuple(values), int(record.label))


def _read_table(path):
    """Read a CSV export into a frame of strings.

    Returns the frame, the physical line each of its rows starts on and a
    RowError for every record whose field count differs from the header's.
    Blank lines are skipped but still counted.
    """
    header, rows, lines, errors = None, [], [], []
    try:
        with open(path, "r", newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            end = 0
            for record in reader:
                start, end = end + 1, reader.line_num
                if not record:
                    continue
                if header is None:
                    header = record
                elif len(record) != len(header):
                    errors.append(
                        RowError(
                            start,
                            "*",
                            f"expected {len(header)} fields, got {len(record)}",
                        )
                    )
                else:
                    rows.append(record)
                    lines.append(start)
    except csv.Error as e:
        raise DataError(f"{path}: line {reader.line_num}: {e}") from e
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not UTF-8 encoded: {e}") from e
    if header is None:
        raise SchemaError(f"{path}: missing header row")
    frame = pd.DataFrame(rows, columns=header, dtype=str)
    return frame, np.asarray(lines, dtype=np.int64), errors


def read_flows(
    path, schema_name="nf-ton-iot", strict=False, clamp=False, drop_ports=False
):
    if schema_name not in SCHEMAS:
        raise SchemaError(f"unknown schema {schema_name}, expected one of {list(SCHEMAS)}")
    frame, lines, shape_errors = _read_table(path)

    missing = [c for c in SCHEMAS[schema_name] if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")

    report = IngestReport(rows_read=len(frame) + len(shape_errors))
    report.errors.extend(shape_errors)
    valid = np.ones(len(frame), dtype=bool)
    clamped = np.zeros(len(frame), dtype=bool)

    def reject(mask, column, message):
        for i in np.flatnonzero(mask & valid):
            report.errors.append(
                RowError(int(lines[i]), column, message.format(frame[column].iloc[i]))
            )
        valid[mask] = False

    def parse(column):
        raw = frame[column].str.strip()
        values = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=np.float64)
        bad = np.isnan(values) | (np.mod(np.nan_to_num(values), 1.0) != 0)
        reject(bad, column, "unparsable integer {!r}")
        return np.nan_to_num(values)

    columns = {}
    for spec in FEATURE_SPECS:
        column = _column_of(spec)
        values = parse(column)
        reject(values < 0, column, "negative value {}")
        over = values > spec.x_max
        if clamp:
            if np.any(over & valid):
                logger.warning(
                    f"Clamping {int(np.sum(over & valid))} values of {spec.feature_name} to {spec.x_max}"
                )
            clamped |= over & valid
            values = np.minimum(values, spec.x_max)
        else:
            reject(
                over,
                column,
                "value {} exceeds the "
                + f"{spec.feature_size_bytes}-byte range of {spec.feature_name}",
            )
        columns[spec.feature_name] = values

    labels = parse(LABEL_COLUMN)
    reject(~np.isin(labels, (0.0, 1.0)), LABEL_COLUMN, "label {} is not 0 or 1")

    report.errors.sort(key=lambda e: (e.line, e.column))
    if report.errors and strict:
        raise report.errors[0]

    matrix = np.zeros((int(valid.sum()), NUM_FEATURES), dtype=np.float64)
    for j, spec in enumerate(FEATURE_SPECS):
        if drop_ports and spec.feature_name in PORT_FEATURES:
            continue
        matrix[:, j] = normalize_feature(spec, columns[spec.feature_name][valid])

    vectors = from_arrays(matrix, labels[valid].astype(np.int64))
    report.rows_kept = len(vectors)
    report.rows_clamped = int(np.sum(clamped & valid))
    for error in report.errors:
        logger.warning(f"{path}: skipping {error}")
    logger.info(f"{path}: {report.summary()}")
    return vectors, report


def ingest_csv(path, schema_name="nf-ton-iot", strict=False, clamp=False, drop_ports=False):
    vectors, _ = read_flows(
        path, schema_name, strict=strict, clamp=clamp, drop_ports=drop_ports
    )
    return vectors


def to_arrays(vectors: Sequence[FeatureVector]):
    x = np.array([v.values for v in vectors], dtype=np.float64).reshape(
        -1, NUM_FEATURES
    )
    y = np.array([v.label for v in vectors], dtype=np.int64)
    return x, y


def from_arrays(x, y):
    return [
        FeatureVector(tuple(float(v) for v in row), int(label))
        for row, label in zip(x, y)
    ]


# The .bin layout is a flat sequence of little-endian float64 records of 11
# doubles: the 10 feature values followed by the label.
def save_features(path, vectors):
    if os.fspath(path).endswith(".bin"):
        x, y = to_arrays(vectors)
        records = np.concatenate([x, y[:, None].astype(np.float64)], axis=1)
        return utils.atomic_write_bytes(path, records.astype("<f8").tobytes())
    return utils.write_json(path, [v.to_dict() for v in vectors])


def load_features(path):
    if os.fspath(path).endswith(".bin"):
        with open(path, "rb") as f:
            payload = f.read()
        if len(payload) % (8 * (NUM_FEATURES + 1)) != 0:
            raise DataError(f"{path}: truncated float64 record file")
        records = np.frombuffer(payload, dtype="<f8").reshape(-1, NUM_FEATURES + 1)
        return from_arrays(records[:, :NUM_FEATURES], records[:, NUM_FEATURES].astype(np.int64))
    try:
        entries = utils.read_json(path)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e
    if not isinstance(entries, list) or not all(
        isinstance(e, dict) and "values" in e and "label" in e for e in entries
    ):
        raise KindError(f"{path} does not hold a list of flow feature vectors")
    return [FeatureVector(tuple(e["values"]), int(e["label"])) for e in entries]


def _split_class(members, n_train, seed):
    if n_train in (0, members.size):
        return members[:n_train], members[n_train:]
    return train_test_split(members, train_size=n_train, random_state=seed)


def stratified_indices(labels, train_fraction, seed):
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train fraction must be in (0, 1), got {train_fraction}")
    labels = np.asarray(labels, dtype=np.int64)
    counts = {cls: int(np.sum(labels == cls)) for cls in (0, 1)}
    for cls, count in counts.items():
        if count == 0:
            logger.warning(f"Class {cls} has no samples, it is absent from both splits")
    present = [cls for cls, count in counts.items() if count > 0]
    if not present:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)

    n_train = int(math.floor(labels.size * train_fraction + 0.5))
    if len(present) == 2 and min(counts.values()) >= 2 and 2 <= n_train <= labels.size - 2:
        train, test = train_test_split(
            np.arange(labels.size),
            train_size=n_train,
            stratify=labels,
            random_state=seed,
        )
    else:
        # sklearn cannot stratify a class this small, split each class on its own
        parts = [
            _split_class(
                np.flatnonzero(labels == cls),
                int(math.floor(counts[cls] * train_fraction + 0.5)),
                seed,
            )
            for cls in present
        ]
        train = np.concatenate([p[0] for p in parts])
        test = np.concatenate([p[1] for p in parts])
    return np.sort(train), np.sort(test)


def stratified_split(data, train_fraction=0.7, seed=0):
    labels = [d.label for d in data]
    train, test = stratified_indices(labels, train_fraction, seed)
    return [data[i] for i in train], [data[i] for i in test]
