"""Synthetic scenarios and dataset ingestion (CSV and Statlog layouts)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Dataset


class DataFormatError(ValueError):
    pass


class Study(str, Enum):
    SS1 = "SS1"
    SS2 = "SS2"
    SS3 = "SS3"


class Variant(str, Enum):
    DEFAULT = "default"
    SIMPLE = "simple"
    COMPLEX = "complex"
    LOW_OVERLAP = "low_overlap"
    HIGH_OVERLAP = "high_overlap"


@dataclass(frozen=True)
class Component:
    name: str
    mean: tuple
    var: float
    corr: float
    n_train: int
    n_test: int
    novelty: bool


def _c(name, mean, var, corr, n_tr, n_te):
    return Component(name, mean, var, corr, n_tr, n_te, name.endswith("*"))


_SS1 = (
    _c("C1", (-5, -5), 1.0, 0.9, 300, 200),
    _c("C2", (-4, -4), 2.0, 0.0, 300, 200),
    _c("C3", (4, 4), 2.0, 0.0, 300, 250),
    _c("C4*", (0, 0), 1.0, -0.75, 0, 90),
    _c("C5*", (5, -10), 1.0, 0.9, 0, 100),
    _c("C6*", (5, -10), 1.0, 0.9, 0, 100),
    _c("C7*", (-10, -10), 0.1, 0.0, 0, 60),
)

_SS2_MEANS = ((2, 2), (-2, -2), (2, -2), (-2, 2), (0, 0))
_SS2_TRAIN = (500, 500, 0, 0, 0)
_SS2_NAMES = ("C1", "C2", "C3*", "C4*", "C5*")

_SS3 = (
    _c("C1", (-5, 5), 0.5, 0.0, 50, 1950),
    _c("C2", (5, 5), 0.5, 0.0, 50, 1950),
    _c("C3", (5, -5), 0.5, 0.0, 50, 1950),
    _c("C4*", (0, 0), 0.5, 0.8, 0, 2000),
    _c("C5*", (0, 0), 0.5, -0.8, 0, 2000),
    _c("C6*", (-5, 5), 1.5, 0.0, 0, 100),
)
HIGH_OVERLAP_FACTOR = 6.0


@dataclass(frozen=True)
class ScenarioSpec:
    study: Study
    q: float = 1.0
    p: int = 2
    variant: Variant = Variant.DEFAULT
    seed: int = 0

    def __post_init__(self):
        study = self.study.value if isinstance(self.study, Study) else str(self.study).upper()
        object.__setattr__(self, "study", Study(study))
        object.__setattr__(self, "variant", Variant(self.variant))
        if not self.q > 0:
            raise ValueError("q must be positive")
        if self.p < 2:
            raise ValueError("p must be at least 2")
        allowed = {
            Study.SS1: {Variant.DEFAULT},
            Study.SS2: {Variant.DEFAULT, Variant.SIMPLE, Variant.COMPLEX},
            Study.SS3: {Variant.DEFAULT, Variant.LOW_OVERLAP, Variant.HIGH_OVERLAP},
        }[self.study]
        if self.variant not in allowed:
            raise ValueError(f"variant {self.variant.value} is not defined for {self.study.value}")


def scenario_components(study, variant=Variant.DEFAULT) -> tuple:
    """The tabulated mixture components for a study/variant."""
    study, variant = Study(study), Variant(variant)
    if study is Study.SS1:
        return _SS1
    if study is Study.SS2:
        complex_ = variant is Variant.COMPLEX
        out = []
        for i, (name, mean, n_tr) in enumerate(zip(_SS2_NAMES, _SS2_MEANS, _SS2_TRAIN)):
            var = 0.2 if not complex_ else (0.375 if name == "C5*" else 0.75)
            out.append(_c(name, mean, var, 0.0, n_tr, 200))
        return tuple(out)
    if variant is Variant.HIGH_OVERLAP:
        return tuple(Component(c.name, c.mean, c.var * HIGH_OVERLAP_FACTOR, c.corr,
                               c.n_train, c.n_test, c.novelty) for c in _SS3)
    return _SS3


def scaled_count(n: int, q: float) -> int:
    if n == 0:
        return 0
    # guard against q * n landing a hair above an integer (e.g. 0.1 * 200)
    return max(1, math.ceil(round(q * n, 9)))


def generate_scenario(spec: ScenarioSpec) -> Dataset:
    """Draw train/test blocks for one simulation scenario.

    Known components get ids 1..J in table order, novelties J+1.. . Columns
    beyond the second are independent standard normal noise.
    """
    rng = np.random.default_rng(spec.seed)
    comps = scenario_components(spec.study, spec.variant)
    known = [c for c in comps if not c.novelty]
    J = len(known)
    train_x, train_y, test_x, test_y = [], [], [], []
    for label, comp in enumerate(comps, start=1):
        cov = comp.var * np.array([[1.0, comp.corr], [comp.corr, 1.0]])
        chol = np.linalg.cholesky(cov)
        for n, xs, ys in ((scaled_count(comp.n_train, spec.q), train_x, train_y),
                          (scaled_count(comp.n_test, spec.q), test_x, test_y)):
            if n == 0:
                continue
            head = np.asarray(comp.mean, dtype=float) + rng.standard_normal((n, 2)) @ chol.T
            tail = rng.standard_normal((n, spec.p - 2))
            xs.append(np.hstack([head, tail]))
            ys.append(np.full(n, label))
    novelty_ids = [i for i, c in enumerate(comps, start=1) if c.novelty]
    assert all(i > J for i in novelty_ids)
    return Dataset(
        train_x=np.vstack(train_x), train_labels=np.concatenate(train_y),
        test_x=np.vstack(test_x), test_labels=np.concatenate(test_y),
        meta={
            "study": spec.study.value, "variant": spec.variant.value, "q": spec.q,
            "p": spec.p, "seed": spec.seed,
            "class_names": {i: c.name for i, c in enumerate(comps, start=1)},
            "novelty_ids": novelty_ids,
        },
    )


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _label_sort_key(values):
    try:
        return sorted(values, key=lambda v: float(v))
    except ValueError:
        return sorted(values)


def read_csv_block(path, label_column: Optional[str] = "label", require_labels: bool = False):
    """Parse one CSV file into (features, raw label strings or None, feature names).

    The label column is used when present in the header; ``require_labels``
    makes its absence an error.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        label_idx = header.index(label_column) if label_column in header else None
        if label_idx is None and require_labels:
            raise DataFormatError(f"{path}: label column {label_column!r} not found in header")
        feature_idx = [i for i in range(len(header)) if i != label_idx]
        if not feature_idx:
            raise DataFormatError(f"{path}: no feature columns")
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(row[i]) for i in feature_idx])
            except ValueError:
                raise DataFormatError(f"{path}:{line_no}: non-numeric feature value") from None
            if label_idx is not None:
                label = row[label_idx].strip()
                if not label:
                    raise DataFormatError(f"{path}:{line_no}: empty label")
                labels.append(label)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    x = np.asarray(rows, dtype=float)
    return x, (labels if label_idx is not None else None), [header[i] for i in feature_idx]


def load_csv(train_path, test_path, label_column: str = "label") -> Dataset:
    """Load a training CSV (labels required) and a test CSV (labels optional).

    Training labels are mapped to 1..J in sorted order; test labels reuse that
    mapping and unseen test labels get ids J+1.. in sorted order.
    """
    train_x, train_raw, names = read_csv_block(train_path, label_column, require_labels=True)
    test_x, test_raw, test_names = read_csv_block(test_path, label_column)
    if test_names != names:
        raise DataFormatError(f"{test_path}: feature columns differ from {train_path}")
    known = _label_sort_key(set(train_raw))
    mapping = {lab: i for i, lab in enumerate(known, start=1)}
    test_labels = None
    if test_raw is not None:
        unseen = _label_sort_key(set(test_raw) - set(known))
        for i, lab in enumerate(unseen, start=len(known) + 1):
            mapping[lab] = i
        test_labels = np.array([mapping[lab] for lab in test_raw])
    return Dataset(
        train_x=train_x, train_labels=np.array([mapping[lab] for lab in train_raw]),
        test_x=test_x, test_labels=test_labels,
        meta={"label_map": {str(k): v for k, v in mapping.items()},
              "class_names": {v: str(k) for k, v in mapping.items()},
              "feature_names": names,
              "novelty_ids": [v for k, v in mapping.items() if v > len(known)]},
    )


def write_csv(path, x: np.ndarray, labels: Optional[Sequence] = None,
              feature_names: Optional[Sequence[str]] = None, label_column: str = "label"):
    """Write features (17 significant digits) plus an optional final label column."""
    x = np.atleast_2d(x)
    names = list(feature_names) if feature_names else [f"x{i + 1}" for i in range(x.shape[1])]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names + ([label_column] if labels is not None else []))
        for i, row in enumerate(x):
            cells = [format(float(v), ".17g") for v in row]
            if labels is not None:
                cells.append(str(labels[i]))
            writer.writerow(cells)


# ---------------------------------------------------------------------------
# Statlog (Landsat Satellite)
# ---------------------------------------------------------------------------

STATLOG_CLASSES = {1: "RS", 2: "CC", 3: "GS", 4: "DGS", 5: "SVS", 7: "VDGS"}
STATLOG_FEATURES = 36


def _read_statlog(path) -> tuple:
    rows = []
    with Path(path).open() as fh:
        for line_no, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != STATLOG_FEATURES + 1:
                raise DataFormatError(
                    f"{path}:{line_no}: expected {STATLOG_FEATURES + 1} columns, got {len(fields)}")
            try:
                rows.append([int(v) for v in fields])
            except ValueError:
                raise DataFormatError(f"{path}:{line_no}: non-integer value") from None
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    arr = np.asarray(rows)
    return arr[:, :-1].astype(float), arr[:, -1]


def _class_code(value) -> int:
    if isinstance(value, str) and not value.isdigit():
        inverse = {v: k for k, v in STATLOG_CLASSES.items()}
        if value.upper() not in inverse:
            raise ValueError(f"unknown Statlog class {value!r}")
        return inverse[value.upper()]
    return int(value)


def load_statlog(train_path, test_path, drop_classes: Iterable = ()) -> Dataset:
    """Load the UCI satimage split, dropping some classes from the training block only.

    Retained training ids are remapped to 1..J (ascending original id); the
    dropped classes become test ids J+1.. in ascending original id.
    """
    drop = {_class_code(c) for c in drop_classes}
    train_x, train_raw = _read_statlog(train_path)
    test_x, test_raw = _read_statlog(test_path)
    keep = ~np.isin(train_raw, list(drop))
    train_x, train_raw = train_x[keep], train_raw[keep]
    retained = sorted(set(train_raw.tolist()))
    mapping = {orig: i for i, orig in enumerate(retained, start=1)}
    unseen = sorted(set(test_raw.tolist()) - set(retained))
    for i, orig in enumerate(unseen, start=len(retained) + 1):
        mapping[orig] = i
    return Dataset(
        train_x=train_x, train_labels=np.array([mapping[v] for v in train_raw]),
        test_x=test_x, test_labels=np.array([mapping[v] for v in test_raw]),
        meta={"label_map": {int(k): v for k, v in mapping.items()},
              "class_names": {v: STATLOG_CLASSES.get(k, str(k)) for k, v in mapping.items()},
              "dropped": sorted(drop),
              "novelty_ids": [mapping[o] for o in unseen]},
    )


def rescale(dataset: Dataset, factor: float) -> Dataset:
    """Divide every feature value, train and test, by ``factor``."""
    if factor == 0:
        raise ValueError("rescale factor must be non-zero")
    return Dataset(train_x=dataset.train_x / factor, train_labels=dataset.train_labels.copy(),
                   test_x=dataset.test_x / factor,
                   test_labels=None if dataset.test_labels is None else dataset.test_labels.copy(),
                   meta=dict(dataset.meta, rescale=factor))
