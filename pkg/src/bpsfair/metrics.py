"""Hard per-group statistical measures and the Bias Parity Score (BPS).

All functions here operate on hard (thresholded) predictions.  BPS scales
the min/max ratio of a per-group measure to a percentage: 100 is perfect
parity between groups, 0 is maximal bias.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from .errors import EmptyInputError, InputShapeError, SchemaError, UndefinedMeasureError

__all__ = [
    "MeasureKind",
    "GroupConfusion",
    "BpsEntry",
    "BpsReport",
    "confusion",
    "hard_measure",
    "bps_binary",
    "bps_multiclass",
    "bps_report",
    "read_prediction_dump",
    "evaluate_prediction_dump",
]


class MeasureKind(str, Enum):
    """Per-group statistical measures BPS can be computed over.

    STP is the positivity rate P(C=1), whose cross-group BPS is the
    p-rule / statistical-parity percentage.
    """

    FPR = "FPR"
    FNR = "FNR"
    TPR = "TPR"
    TNR = "TNR"
    ACC = "ACC"
    STP = "STP"


@dataclass(frozen=True)
class GroupConfusion:
    """Confusion-matrix counts for one sensitive-attribute group."""

    group_id: int
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class BpsEntry:
    """Per-group values and the BPS score for one measure kind.

    ``group_values`` maps group id to the measure value, or None where the
    measure is undefined (empty conditioning class).  ``bps`` is None when
    any group value is undefined; ``undefined_groups`` then lists the
    offending groups so callers can flag rather than abort.
    """

    kind: MeasureKind
    group_values: Mapping[int, float | None]
    population_value: float | None
    bps: float | None
    undefined_groups: tuple[int, ...] = ()

    @property
    def flagged(self) -> bool:
        return bool(self.undefined_groups)


@dataclass(frozen=True)
class BpsReport:
    """BPS entries for every MeasureKind over one prediction set."""

    entries: Mapping[MeasureKind, BpsEntry]

    def __getitem__(self, kind: MeasureKind) -> BpsEntry:
        return self.entries[kind]

    def bps(self, kind: MeasureKind) -> float | None:
        return self.entries[kind].bps


def _as_binary_vector(name: str, values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise InputShapeError(f"{name} must be one-dimensional, got shape {arr.shape}")
    arr = arr.astype(np.int64)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise InputShapeError(f"{name} must contain only 0/1 values")
    return arr


def confusion(predictions, labels, groups) -> tuple[GroupConfusion, ...]:
    """Count per-group confusion matrices.

    Parameters
    ----------
    predictions, labels : array-like of {0,1}
        Hard predictions and true labels.
    groups : array-like of int
        Integer-coded sensitive attribute, one entry per sample.

    Returns
    -------
    tuple of GroupConfusion
        One entry per distinct group value, ordered by group id.
    """
    preds = _as_binary_vector("predictions", predictions)
    y = _as_binary_vector("labels", labels)
    g = np.asarray(groups)
    if g.ndim != 1:
        raise InputShapeError(f"groups must be one-dimensional, got shape {g.shape}")
    g = g.astype(np.int64)
    if not (preds.size == y.size == g.size):
        raise InputShapeError(
            f"length mismatch: predictions {preds.size}, labels {y.size}, groups {g.size}"
        )
    if preds.size == 0:
        raise EmptyInputError("cannot compute confusion counts on empty input")

    out = []
    for gid in np.unique(g):
        mask = g == gid
        p, t = preds[mask], y[mask]
        out.append(
            GroupConfusion(
                group_id=int(gid),
                tp=int(np.sum((p == 1) & (t == 1))),
                fp=int(np.sum((p == 1) & (t == 0))),
                tn=int(np.sum((p == 0) & (t == 0))),
                fn=int(np.sum((p == 0) & (t == 1))),
            )
        )
    return tuple(out)


def _total_confusion(parts: tuple[GroupConfusion, ...]) -> GroupConfusion:
    return GroupConfusion(
        group_id=-1,
        tp=sum(c.tp for c in parts),
        fp=sum(c.fp for c in parts),
        tn=sum(c.tn for c in parts),
        fn=sum(c.fn for c in parts),
    )


def hard_measure(kind: MeasureKind, c: GroupConfusion) -> float:
    """Evaluate one confusion-matrix rate for one group.

    Raises
    ------
    UndefinedMeasureError
        If the measure's denominator count is zero.
    """
    kind = MeasureKind(kind)
    if kind is MeasureKind.FPR:
        num, den = c.fp, c.fp + c.tn
    elif kind is MeasureKind.TNR:
        num, den = c.tn, c.tn + c.fp
    elif kind is MeasureKind.FNR:
        num, den = c.fn, c.fn + c.tp
    elif kind is MeasureKind.TPR:
        num, den = c.tp, c.tp + c.fn
    elif kind is MeasureKind.ACC:
        num, den = c.tp + c.tn, c.total
    else:  # STP: positivity rate
        num, den = c.tp + c.fp, c.total
    if den == 0:
        raise UndefinedMeasureError(kind.value, c.group_id)
    return num / den


def bps_binary(m0: float, m1: float) -> float:
    """Bias Parity Score between two group measure values, in [0, 100].

    Both-zero inputs score 100 (the groups are identically treated);
    exactly one zero scores 0, the limit of the min/max ratio.
    """
    if m0 < 0 or m1 < 0:
        raise InputShapeError("measure values must be non-negative")
    hi = max(m0, m1)
    if hi == 0.0:
        return 100.0
    return 100.0 * min(m0, m1) / hi


def bps_multiclass(values: Mapping[int, float], population_value: float) -> float:
    """Average per-group parity against the population value, in [0, 100].

    Each group contributes min(m_g, m_pop)/max(m_g, m_pop); the result is
    the mean contribution scaled to a percentage.
    """
    if not values:
        raise EmptyInputError("bps_multiclass needs at least one group value")
    if population_value < 0 or any(v < 0 for v in values.values()):
        raise InputShapeError("measure values must be non-negative")
    total = 0.0
    for v in values.values():
        hi = max(v, population_value)
        total += 1.0 if hi == 0.0 else min(v, population_value) / hi
    return 100.0 * total / len(values)


def bps_report(predictions, labels, groups) -> BpsReport:
    """Compute per-group values and BPS for all six measure kinds.

    Undefined measures (a group with an empty conditioning class) are
    reported as flagged entries with ``bps=None`` instead of raising, so a
    degenerate evaluation slice never aborts a run.  With exactly two
    groups the BPS is the pairwise ratio; with more, parity is averaged
    against the whole-population value.
    """
    parts = confusion(predictions, labels, groups)
    pop = _total_confusion(parts)
    entries = {}
    for kind in MeasureKind:
        group_values: dict[int, float | None] = {}
        undefined = []
        for c in parts:
            try:
                group_values[c.group_id] = hard_measure(kind, c)
            except UndefinedMeasureError:
                group_values[c.group_id] = None
                undefined.append(c.group_id)
        try:
            pop_value = hard_measure(kind, pop)
        except UndefinedMeasureError:
            pop_value = None

        bps: float | None = None
        if not undefined:
            defined = {gid: v for gid, v in group_values.items() if v is not None}
            if len(defined) == 2:
                v0, v1 = defined.values()
                bps = bps_binary(v0, v1)
            elif pop_value is not None:
                bps = bps_multiclass(defined, pop_value)
        entries[kind] = BpsEntry(
            kind=kind,
            group_values=group_values,
            population_value=pop_value,
            bps=bps,
            undefined_groups=tuple(undefined),
        )
    return BpsReport(entries=entries)


PREDICTION_DUMP_COLUMNS = ("y_true", "y_prob", "group")


def read_prediction_dump(path):
    """Read a ``y_true, y_prob, group`` CSV into numpy vectors."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyInputError(f"{path}: empty prediction dump")
        for col in PREDICTION_DUMP_COLUMNS:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r} in header {header}")
        idx = {col: header.index(col) for col in PREDICTION_DUMP_COLUMNS}
        y_true, y_prob, group = [], [], []
        for row in reader:
            if not row:
                continue
            y_true.append(int(row[idx["y_true"]]))
            y_prob.append(float(row[idx["y_prob"]]))
            group.append(int(row[idx["group"]]))
    if not y_true:
        raise EmptyInputError(f"{path}: prediction dump has no data rows")
    return np.array(y_true), np.array(y_prob), np.array(group)


def evaluate_prediction_dump(path, threshold: float = 0.5) -> BpsReport:
    """Score a stored prediction dump; probabilities at the threshold count as positive."""
    y_true, y_prob, group = read_prediction_dump(path)
    preds = (y_prob >= threshold).astype(np.int64)
    return bps_report(preds, y_true, group)
