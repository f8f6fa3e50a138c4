"""Desk-scale classification datasets and the five-way split the search needs.

One generator stream produces all examples; consecutive blocks of the stream
become the teacher/student train/val splits, the unlabeled pool, and the test
set, so the six subsets are disjoint by construction (by stream id).  Label
noise applies to the four train/val splits only; the test set stays clean so
it measures true error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

FAMILIES = ("gaussian_blobs", "concentric_rings", "two_moons_grid")

_MAX_TOTAL = 1_000_000  # generator capacity guard


class CsvParseError(ValueError):
    """Malformed CSV row; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class TaskSpec:
    """Recipe for one synthetic classification task."""

    family: str = "gaussian_blobs"
    n_classes: int = 3
    feature_dim: int = 2
    n_teacher_train: int = 100
    n_teacher_val: int = 100
    n_student_train: int = 100
    n_student_val: int = 100
    n_unlabeled: int = 100
    n_test: int = 200
    label_noise: float = 0.0
    seed: int = 0
    unlabeled_shift: float = 0.0
    blob_separation: float = 4.0
    blob_spread_growth: float = 0.5  # class c noise scale = 1 + growth * c

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        sizes = (self.n_teacher_train, self.n_teacher_val, self.n_student_train,
                 self.n_student_val, self.n_unlabeled, self.n_test)
        if any(s < 0 for s in sizes) or min(sizes[:4] + sizes[5:]) <= 0:
            raise ValueError("split sizes must be positive (unlabeled may be 0)")
        if sum(sizes) > _MAX_TOTAL:
            raise ValueError(f"total size {sum(sizes)} exceeds generator capacity")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must be in [0, 0.5)")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.family == "two_moons_grid" and self.n_classes != 2:
            raise ValueError("two_moons_grid is a binary task")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")


@dataclass(frozen=True)
class LabeledSet:
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class UnlabeledSet:
    ids: np.ndarray
    x: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class DataBundle:
    teacher_train: LabeledSet
    teacher_val: LabeledSet
    student_train: LabeledSet
    student_val: LabeledSet
    unlabeled: UnlabeledSet
    test: LabeledSet
    n_classes: int
    feature_dim: int

    def labeled_splits(self):
        return {"teacher_train": self.teacher_train, "teacher_val": self.teacher_val,
                "student_train": self.student_train, "student_val": self.student_val,
                "test": self.test}


def _blob_centroids(k: int, dim: int, separation: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(k) / k
    c = np.zeros((k, dim))
    c[:, 0] = separation * np.cos(angles)
    c[:, 1] = separation * np.sin(angles)
    return c


def _sample_stream(spec: TaskSpec, n: int, rng: np.random.Generator):
    """Draw n (x, y_true) pairs from the task distribution."""
    k, d = spec.n_classes, spec.feature_dim
    y = rng.integers(0, k, size=n)
    if spec.family == "gaussian_blobs":
        # heteroscedastic classes: the Bayes boundary is curved, so the
        # choice between linear and nonlinear cell ops is consequential
        centers = _blob_centroids(k, d, spec.blob_separation)
        scale = 1.0 + spec.blob_spread_growth * y
        x = centers[y] + scale[:, None] * rng.normal(0.0, 1.0, size=(n, d))
    elif spec.family == "concentric_rings":
        radii = 1.5 * (1.0 + np.arange(k))
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        r = radii[y] + rng.normal(0.0, 0.25, size=n)
        x = np.zeros((n, d))
        x[:, 0] = r * np.cos(theta)
        x[:, 1] = r * np.sin(theta)
        if d > 2:
            x[:, 2:] = rng.normal(0.0, 0.1, size=(n, d - 2))
    else:  # two_moons_grid: points on a fixed arc grid plus jitter
        t = (rng.integers(0, 64, size=n) + 0.5) / 64.0 * np.pi
        x = np.zeros((n, d))
        upper = y == 0
        x[upper, 0] = np.cos(t[upper])
        x[upper, 1] = np.sin(t[upper])
        x[~upper, 0] = 1.0 - np.cos(t[~upper])
        x[~upper, 1] = 0.5 - np.sin(t[~upper])
        x[:, :2] += rng.normal(0.0, 0.1, size=(n, 2))
        if d > 2:
            x[:, 2:] = rng.normal(0.0, 0.1, size=(n, d - 2))
    return x, y


def _flip_labels(y: np.ndarray, k: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate <= 0.0:
        return y
    out = y.copy()
    flip = rng.random(len(y)) < rate
    offsets = rng.integers(1, k, size=len(y))
    out[flip] = (y[flip] + offsets[flip]) % k
    return out


def generate(spec: TaskSpec) -> DataBundle:
    """Build the disjoint six-way split, deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    sizes = [spec.n_teacher_train, spec.n_teacher_val, spec.n_student_train,
             spec.n_student_val, spec.n_unlabeled, spec.n_test]
    total = sum(sizes)
    x, y = _sample_stream(spec, total, rng)
    ids = np.arange(total)

    blocks = []
    pos = 0
    for s in sizes:
        blocks.append(slice(pos, pos + s))
        pos += s
    tr_t, val_t, tr_s, val_s, unl, test = blocks

    noisy = {}
    for name, sl in (("tr_t", tr_t), ("val_t", val_t), ("tr_s", tr_s), ("val_s", val_s)):
        noisy[name] = _flip_labels(y[sl], spec.n_classes, spec.label_noise, rng)

    xu = x[unl].copy()
    if spec.unlabeled_shift:
        xu = xu + spec.unlabeled_shift  # optional distribution mismatch for D_u

    return DataBundle(
        teacher_train=LabeledSet(ids[tr_t], x[tr_t], noisy["tr_t"]),
        teacher_val=LabeledSet(ids[val_t], x[val_t], noisy["val_t"]),
        student_train=LabeledSet(ids[tr_s], x[tr_s], noisy["tr_s"]),
        student_val=LabeledSet(ids[val_s], x[val_s], noisy["val_s"]),
        unlabeled=UnlabeledSet(ids[unl], xu),
        test=LabeledSet(ids[test], x[test], y[test]),
        n_classes=spec.n_classes,
        feature_dim=spec.feature_dim,
    )


def with_seed(spec: TaskSpec, seed: int) -> TaskSpec:
    return replace(spec, seed=seed)


# ----------------------------------------------------------------------
# CSV ingestion: header row, comma separated, optional final "label" column


def save_csv(path, dataset) -> None:
    """Write a labeled or unlabeled set; floats keep 17 significant digits."""
    labeled = isinstance(dataset, LabeledSet)
    d = dataset.x.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [f"f{i}" for i in range(d)] + (["label"] if labeled else [])
        writer.writerow(header)
        for i in range(len(dataset)):
            row = [f"{v:.17g}" for v in dataset.x[i]]
            if labeled:
                row.append(str(int(dataset.y[i])))
            writer.writerow(row)


def load_csv(path, n_classes: int | None = None):
    """Parse a CSV file into a LabeledSet or (without a label column) an
    UnlabeledSet.  Row order is preserved; ids are row indices."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(1, "empty file") from None
        labeled = bool(header) and header[-1] == "label"
        n_features = len(header) - (1 if labeled else 0)
        if n_features < 1:
            raise CsvParseError(1, "no feature columns in header")
        xs, ys = [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CsvParseError(
                    line_no, f"expected {len(header)} cells, got {len(row)}")
            try:
                feats = [float(v) for v in row[:n_features]]
            except ValueError:
                raise CsvParseError(line_no, f"non-numeric cell in {row!r}") from None
            xs.append(feats)
            if labeled:
                try:
                    label = int(row[-1])
                except ValueError:
                    raise CsvParseError(line_no, f"non-integer label {row[-1]!r}") from None
                if label < 0 or (n_classes is not None and label >= n_classes):
                    raise CsvParseError(line_no, f"label {label} out of range")
                ys.append(label)
    x = np.asarray(xs, dtype=np.float64).reshape(len(xs), n_features)
    ids = np.arange(len(xs))
    if labeled:
        return LabeledSet(ids, x, np.asarray(ys, dtype=np.int64))
    return UnlabeledSet(ids, x)
