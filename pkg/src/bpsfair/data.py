"""CSV ingestion, encoding, Monte Carlo splits, and dataset presets.

The sensitive column is extracted into its own vector and never enters
the feature matrix; ``EncodedDataset.feature_names`` records the
provenance of every column so that exclusion is checkable.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, DataError, EmptyInputError, SchemaError

__all__ = [
    "DatasetSchema",
    "RawTable",
    "EncoderState",
    "EncodedDataset",
    "SplitPlan",
    "load_csv",
    "fit_encoder",
    "apply_encoder",
    "mc_splits",
    "adult_preset",
    "synthetic_preset",
    "synthesize_biased",
    "write_csv",
]

log = logging.getLogger(__name__)

MISSING_TOKEN = "?"


@dataclass(frozen=True)
class DatasetSchema:
    """Column roles for one CSV dataset.

    ``sensitive_map`` sends raw sensitive-column values to group codes 0/1.
    ``label_aliases`` normalizes label spellings before comparison with
    ``positive_label`` (the UCI Adult test file writes ``>50K.``).
    """

    label: str
    positive_label: str
    sensitive: str
    sensitive_map: Mapping[str, int]
    negative_label: str = "0"
    categorical: tuple = ()
    continuous: tuple = ()
    ignore: tuple = ()
    label_aliases: Mapping[str, str] = field(default_factory=dict)
    missing_token: str = MISSING_TOKEN

    def __post_init__(self):
        object.__setattr__(self, "categorical", tuple(self.categorical))
        object.__setattr__(self, "continuous", tuple(self.continuous))
        object.__setattr__(self, "ignore", tuple(self.ignore))
        features = self.categorical + self.continuous
        if not features:
            raise ConfigError("schema needs at least one feature column")
        overlap = {self.label, self.sensitive} & set(features)
        if overlap:
            raise ConfigError(f"label/sensitive columns cannot be features: {sorted(overlap)}")
        if set(self.sensitive_map.values()) - {0, 1}:
            raise ConfigError("sensitive_map must map onto group codes {0, 1}")

    @property
    def used_columns(self):
        return (self.label, self.sensitive) + self.categorical + self.continuous


@dataclass
class RawTable:
    """Typed columns straight from a CSV, after missing-value filtering."""

    schema: DatasetSchema
    categorical: dict  # column -> list[str]
    continuous: dict  # column -> np.ndarray float64
    labels: np.ndarray  # {0,1}
    groups: np.ndarray  # {0,1}
    row_indices: np.ndarray  # positions in the source file's data section
    dropped_count: int = 0

    @property
    def n_rows(self) -> int:
        return self.labels.size


@dataclass(frozen=True)
class EncoderState:
    """Fitted vocabularies and normalization statistics.

    Vocabularies are ordered; continuous columns with zero training
    variance are marked constant and encode to 0.
    """

    vocabularies: Mapping[str, tuple]
    means: Mapping[str, float]
    stds: Mapping[str, float]
    constant_columns: tuple = ()

    def to_dict(self) -> dict:
        return {
            "vocabularies": {c: list(v) for c, v in self.vocabularies.items()},
            "means": dict(self.means),
            "stds": dict(self.stds),
            "constant_columns": list(self.constant_columns),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderState":
        return cls(
            vocabularies={c: tuple(v) for c, v in d["vocabularies"].items()},
            means=dict(d["means"]),
            stds=dict(d["stds"]),
            constant_columns=tuple(d["constant_columns"]),
        )


@dataclass
class EncodedDataset:
    """Numeric design matrix plus withheld sensitive attribute and labels."""

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    row_indices: np.ndarray
    feature_names: tuple
    unseen_categorical_count: int = 0

    @property
    def n_rows(self) -> int:
        return self.Y.size


@dataclass(frozen=True)
class SplitPlan:
    """Monte Carlo cross-validation plan: repeated seeded shuffles."""

    iterations: int = 10
    train_fraction: float = 0.70
    val_fraction: float = 0.10
    base_seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 < self.train_fraction < 1.0 or not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("split fractions must lie in (0, 1)")
        if self.train_fraction + self.val_fraction >= 1.0:
            raise ConfigError("train + validation fractions must leave room for a test split")


def load_csv(path, schema: DatasetSchema) -> RawTable:
    """Read and type-check a headered CSV against a schema.

    Rows containing the missing-value token in any used column are
    dropped (and counted); unparseable numerics raise a row-level error.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyInputError(f"{path}: file is empty")
        for col in schema.used_columns:
            if col not in header:
                raise SchemaError(f"{path}: column {col!r} not found in header")
        col_idx = {col: header.index(col) for col in schema.used_columns}

        categorical = {c: [] for c in schema.categorical}
        continuous_raw = {c: [] for c in schema.continuous}
        labels, groups, row_indices = [], [], []
        dropped = 0
        bad_rows = []
        for row_no, row in enumerate(reader):
            if not row or all(not cell.strip() for cell in row):
                continue
            cells = {col: row[i].strip() for col, i in col_idx.items()}
            if any(v == schema.missing_token for v in cells.values()):
                dropped += 1
                continue
            label_raw = schema.label_aliases.get(cells[schema.label], cells[schema.label])
            group_raw = cells[schema.sensitive]
            if group_raw not in schema.sensitive_map:
                bad_rows.append((row_no, f"unmapped sensitive value {group_raw!r}"))
                continue
            parsed = {}
            ok = True
            for c in schema.continuous:
                try:
                    parsed[c] = float(cells[c])
                except ValueError:
                    bad_rows.append((row_no, f"non-numeric value {cells[c]!r} in column {c!r}"))
                    ok = False
                    break
            if not ok:
                continue
            for c in schema.categorical:
                categorical[c].append(cells[c])
            for c in schema.continuous:
                continuous_raw[c].append(parsed[c])
            labels.append(1 if label_raw == schema.positive_label else 0)
            groups.append(schema.sensitive_map[group_raw])
            row_indices.append(row_no)

    if bad_rows:
        preview = "; ".join(f"row {r}: {msg}" for r, msg in bad_rows[:5])
        raise DataError(
            f"{path}: {len(bad_rows)} unusable row(s): {preview}",
            rows=[r for r, _ in bad_rows],
        )
    if not labels:
        raise EmptyInputError(f"{path}: no usable rows after filtering")
    if dropped:
        log.info("%s: dropped %d row(s) containing %r", path, dropped, schema.missing_token)
    return RawTable(
        schema=schema,
        categorical=categorical,
        continuous={c: np.array(v, dtype=np.float64) for c, v in continuous_raw.items()},
        labels=np.array(labels, dtype=np.int64),
        groups=np.array(groups, dtype=np.int64),
        row_indices=np.array(row_indices, dtype=np.int64),
        dropped_count=dropped,
    )


def fit_encoder(table: RawTable, rows=None) -> EncoderState:
    """Fit vocabularies and z-score statistics on the given rows only.

    ``rows`` defaults to the whole table; during Monte Carlo runs it must
    be the training indices so no test statistics leak into the encoder.
    """
    if table.n_rows == 0:
        raise EmptyInputError("cannot fit an encoder on an empty table")
    idx = np.arange(table.n_rows) if rows is None else np.asarray(rows, dtype=np.int64)
    if idx.size == 0:
        raise EmptyInputError("cannot fit an encoder on zero rows")
    schema = table.schema
    vocabularies = {
        c: tuple(sorted(set(table.categorical[c][i] for i in idx))) for c in schema.categorical
    }
    means, stds, constant = {}, {}, []
    for c in schema.continuous:
        vals = table.continuous[c][idx]
        mean, std = float(vals.mean()), float(vals.std())
        means[c] = mean
        if std == 0.0:
            constant.append(c)
            stds[c] = 1.0  # encoded value is forced to 0 below
        else:
            stds[c] = std
    return EncoderState(vocabularies=vocabularies, means=means, stds=stds,
                        constant_columns=tuple(constant))


def apply_encoder(table: RawTable, encoder: EncoderState, rows=None) -> EncodedDataset:
    """Encode rows into the design matrix; unseen categories map to all-zero blocks."""
    idx = np.arange(table.n_rows) if rows is None else np.asarray(rows, dtype=np.int64)
    schema = table.schema
    n = idx.size
    blocks, names = [], []
    for c in schema.continuous:
        if c in encoder.constant_columns:
            blocks.append(np.zeros((n, 1)))
        else:
            vals = table.continuous[c][idx]
            blocks.append(((vals - encoder.means[c]) / encoder.stds[c])[:, None])
        names.append(c)
    unseen = 0
    for c in schema.categorical:
        vocab = encoder.vocabularies[c]
        pos = {v: j for j, v in enumerate(vocab)}
        block = np.zeros((n, len(vocab)))
        col = table.categorical[c]
        for i, row in enumerate(idx):
            j = pos.get(col[row])
            if j is None:
                unseen += 1
            else:
                block[i, j] = 1.0
        blocks.append(block)
        names.extend(f"{c}={v}" for v in vocab)
    if unseen:
        log.info("encoder: %d unseen categorical value(s) mapped to zero blocks", unseen)
    X = np.hstack(blocks) if blocks else np.zeros((n, 0))
    return EncodedDataset(
        X=X,
        A=table.groups[idx].copy(),
        Y=table.labels[idx].copy(),
        row_indices=table.row_indices[idx].copy(),
        feature_names=tuple(names),
        unseen_categorical_count=unseen,
    )


def mc_splits(n_rows: int, plan: SplitPlan):
    """Disjoint exhaustive (train, val, test) index triples, one per iteration.

    Each iteration is an independent uniform shuffle seeded by
    ``base_seed + iteration``, so a plan always reproduces its splits.
    """
    if n_rows < 10:
        raise ConfigError(f"need at least 10 rows to split, got {n_rows}")
    n_train = round(n_rows * plan.train_fraction)
    n_val = round(n_rows * plan.val_fraction)
    if n_train < 1 or n_rows - n_train - n_val < 1 or (n_val < 1 and plan.val_fraction > 0):
        raise ConfigError(
            f"degenerate split of {n_rows} rows: train={n_train}, val={n_val}"
        )
    splits = []
    for it in range(plan.iterations):
        rng = np.random.default_rng(plan.base_seed + it)
        perm = rng.permutation(n_rows)
        splits.append(
            (perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])
        )
    return splits


def adult_preset() -> DatasetSchema:
    """Schema for the combined UCI Adult Income CSV.

    Label is income over 50K; the sensitive attribute is gender with
    female coded 0 and male coded 1, withheld from the features.
    """
    return DatasetSchema(
        label="income",
        positive_label=">50K",
        negative_label="<=50K",
        sensitive="sex",
        sensitive_map={"Female": 0, "Male": 1},
        categorical=(
            "workclass",
            "education",
            "marital-status",
            "occupation",
            "relationship",
            "race",
            "native-country",
        ),
        continuous=(
            "age",
            "fnlwgt",
            "education-num",
            "capital-gain",
            "capital-loss",
            "hours-per-week",
        ),
        label_aliases={">50K.": ">50K", "<=50K.": "<=50K"},
    )


def synthetic_preset(feature_dim: int) -> DatasetSchema:
    """Schema matching the output of :func:`synthesize_biased`."""
    return DatasetSchema(
        label="label",
        positive_label="1",
        sensitive="group",
        sensitive_map={"0": 0, "1": 1},
        continuous=tuple(f"f{j}" for j in range(feature_dim)),
    )


def synthesize_biased(
    n: int,
    base_rate_g0: float,
    base_rate_g1: float,
    group_fraction: float = 0.5,
    feature_dim: int = 6,
    noise: float = 1.0,
    seed: int = 0,
) -> RawTable:
    """Generate a biased binary-classification table.

    Group membership is drawn with P(A=0) = ``group_fraction`` and labels
    with group-dependent positive rates.  Feature 0 carries a pure label
    signal (a single threshold suffices when ``noise`` is 0); the
    remaining features mix label and group signal so that an
    accuracy-trained model picks up group-correlated shortcuts and shows
    measurable bias at the baseline.
    """
    for name, v in (("base_rate_g0", base_rate_g0), ("base_rate_g1", base_rate_g1),
                    ("group_fraction", group_fraction)):
        if not 0.0 < v < 1.0:
            raise ConfigError(f"{name} must be in (0, 1), got {v}")
    if n < 1 or feature_dim < 1:
        raise ConfigError("n and feature_dim must be positive")
    if noise < 0.0:
        raise ConfigError(f"noise must be non-negative, got {noise}")

    rng = np.random.default_rng(seed)
    a = (rng.random(n) >= group_fraction).astype(np.int64)
    rates = np.where(a == 0, base_rate_g0, base_rate_g1)
    y = (rng.random(n) < rates).astype(np.int64)

    label_coef = np.empty(feature_dim)
    group_coef = np.empty(feature_dim)
    label_coef[0], group_coef[0] = 1.0, 0.0
    if feature_dim > 1:
        label_coef[1:] = rng.uniform(0.4, 1.2, feature_dim - 1)
        group_coef[1:] = rng.uniform(0.3, 1.0, feature_dim - 1)
    X = (
        (y - 0.5)[:, None] * label_coef
        + (a - 0.5)[:, None] * group_coef
        + noise * rng.standard_normal((n, feature_dim))
    )

    schema = synthetic_preset(feature_dim)
    return RawTable(
        schema=schema,
        categorical={},
        continuous={f"f{j}": X[:, j].copy() for j in range(feature_dim)},
        labels=y,
        groups=a,
        row_indices=np.arange(n, dtype=np.int64),
        dropped_count=0,
    )


def write_csv(table: RawTable, path):
    """Write a RawTable back out in the loaders' CSV format."""
    schema = table.schema
    columns = list(schema.continuous) + list(schema.categorical) + [schema.sensitive, schema.label]
    inverse_group = {}
    for raw, code in schema.sensitive_map.items():
        inverse_group.setdefault(code, raw)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for i in range(table.n_rows):
            row = [f"{table.continuous[c][i]:.10g}" for c in schema.continuous]
            row += [table.categorical[c][i] for c in schema.categorical]
            row.append(inverse_group[int(table.groups[i])])
            row.append(schema.positive_label if table.labels[i] == 1 else schema.negative_label)
            writer.writerow(row)
