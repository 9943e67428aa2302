"""Feature and label I/O, normalization, stratified partitioning, synthesis.

Two feature file formats are supported:

* PNF1 binary: magic bytes ``PNF1``, uint32-LE row count ``n``, uint32-LE
  column count ``d``, then ``n * d`` IEEE-754 float32-LE values, row-major.
  Writing then reading a file reproduces it bit-exactly.
* CSV: one sample per line, comma-separated decimal floats, no header.

Labels are CSV with one integer class index per line (optional header line).
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

PNF1_MAGIC = b"PNF1"
PNF1_HEADER = struct.Struct("<4sII")

# Columns whose std falls below this are centered but not rescaled.
CONSTANT_STD = 1e-12


class FeatureFileError(ValueError):
    """A feature file is malformed or violates matrix invariants."""


class LabelFileError(ValueError):
    """A label file is malformed or a label is out of range."""


class PartitionError(ValueError):
    """A stratified partition cannot be built from the given labels."""


@dataclass(frozen=True)
class LabelVector:
    """Integer class labels in ``[0, num_classes)``."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if self.num_classes < 2:
            raise LabelFileError(f"need at least 2 classes, got {self.num_classes}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            bad = int(labels.min()) if labels.min() < 0 else int(labels.max())
            raise LabelFileError(
                f"label {bad} out of range [0, {self.num_classes})"
            )

    def __len__(self):
        return int(self.labels.size)


@dataclass(frozen=True)
class Partition:
    """Disjoint index subsets into a parent dataset, plus the seed used."""

    subsets: tuple
    seed: int

    def __post_init__(self):
        object.__setattr__(
            self, "subsets", tuple(np.asarray(s, dtype=np.int64) for s in self.subsets)
        )

    def __len__(self):
        return len(self.subsets)


@dataclass(frozen=True)
class NormalizationStats:
    """Per-dimension training-set mean and standard deviation."""

    mean: np.ndarray
    std: np.ndarray


def _validate_matrix(values, source):
    """Check shape/finiteness invariants shared by both loaders."""
    if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
        raise FeatureFileError(f"{source}: feature matrix must be n>=1 by d>=1, got shape {values.shape}")
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        r, c = bad[0]
        raise FeatureFileError(f"{source}: non-finite value at row {r}, col {c}")
    return values


def load_features(path, fmt=None):
    """Load a feature matrix from ``path``.

    ``fmt`` is ``"pnf1"`` or ``"csv"``; if None it is inferred from the
    file extension (``.csv`` means CSV, anything else PNF1). Returns a
    float64 array of shape (n, d) with all values finite.
    """
    path = str(path)
    if fmt is None:
        fmt = "csv" if path.lower().endswith(".csv") else "pnf1"
    if fmt == "pnf1":
        with open(path, "rb") as fh:
            return decode_pnf1(fh.read(), source=path)
    if fmt == "csv":
        return _load_features_csv(path)
    raise FeatureFileError(f"unknown feature format {fmt!r}")


def decode_pnf1(blob, source="<bytes>"):
    """Decode a PNF1 byte string into an (n, d) float64 matrix."""
    if len(blob) < PNF1_HEADER.size:
        raise FeatureFileError(
            f"{source}: truncated header, {len(blob)} bytes < {PNF1_HEADER.size} (byte offset {len(blob)})"
        )
    magic, n, d = PNF1_HEADER.unpack_from(blob, 0)
    if magic != PNF1_MAGIC:
        raise FeatureFileError(f"{source}: bad magic {magic!r}, expected {PNF1_MAGIC!r}")
    if n < 1 or d < 1:
        raise FeatureFileError(f"{source}: header declares n={n}, d={d}; both must be >= 1")
    expected = PNF1_HEADER.size + 4 * n * d
    if len(blob) != expected:
        offset = min(len(blob), expected)
        raise FeatureFileError(
            f"{source}: expected {expected} bytes for {n}x{d} matrix, got {len(blob)} (byte offset {offset})"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=PNF1_HEADER.size)
    values = values.reshape(n, d).astype(np.float64)
    return _validate_matrix(values, source)


def encode_pnf1(X):
    """Encode an (n, d) matrix as PNF1 bytes (values stored as float32)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise FeatureFileError(f"feature matrix must be n>=1 by d>=1, got shape {X.shape}")
    header = PNF1_HEADER.pack(PNF1_MAGIC, X.shape[0], X.shape[1])
    return header + X.astype("<f4").tobytes()


def save_features(X, path, fmt=None):
    """Write a feature matrix to ``path`` as PNF1 or CSV."""
    path = str(path)
    if fmt is None:
        fmt = "csv" if path.lower().endswith(".csv") else "pnf1"
    if fmt == "pnf1":
        with open(path, "wb") as fh:
            fh.write(encode_pnf1(X))
    elif fmt == "csv":
        X = np.asarray(X, dtype=np.float64)
        with open(path, "w", newline="") as fh:
            for row in X:
                fh.write(",".join(repr(float(v)) for v in row))
                fh.write("\n")
    else:
        raise FeatureFileError(f"unknown feature format {fmt!r}")


def _load_features_csv(path):
    rows = []
    width = None
    with open(path, newline="") as fh:
        for r, line in enumerate(csv.reader(fh)):
            if not line:
                continue
            if width is None:
                width = len(line)
            elif len(line) != width:
                raise FeatureFileError(
                    f"{path}: row {r} has {len(line)} columns, expected {width}"
                )
            parsed = []
            for c, tok in enumerate(line):
                try:
                    v = float(tok)
                except ValueError:
                    raise FeatureFileError(f"{path}: unparseable value {tok!r} at row {r}, col {c}") from None
                if not math.isfinite(v):
                    raise FeatureFileError(f"{path}: non-finite value at row {r}, col {c}")
                parsed.append(v)
            rows.append(parsed)
    if not rows:
        raise FeatureFileError(f"{path}: empty feature file")
    return _validate_matrix(np.asarray(rows, dtype=np.float64), path)


def load_labels(path, num_classes=None):
    """Load a label CSV (one integer per line, optional header).

    ``num_classes`` fixes the class count; labels must then fall in
    ``[0, num_classes)``. When omitted the count is inferred as
    ``1 + max(label)``.
    """
    path = str(path)
    values = []
    with open(path) as fh:
        for r, line in enumerate(fh):
            tok = line.strip()
            if not tok:
                continue
            try:
                v = int(tok)
            except ValueError:
                if r == 0:
                    continue  # optional header line
                raise LabelFileError(f"{path}: non-integer label {tok!r} at line {r}") from None
            if v < 0:
                raise LabelFileError(f"{path}: negative label {v} at line {r}")
            values.append(v)
    if not values:
        raise LabelFileError(f"{path}: no labels found")
    labels = np.asarray(values, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    if num_classes < 2:
        num_classes = 2
    try:
        return LabelVector(labels, num_classes)
    except LabelFileError as exc:
        raise LabelFileError(f"{path}: {exc}") from None


def save_labels(labels, path):
    """Write labels (LabelVector or integer array) one per line."""
    values = labels.labels if isinstance(labels, LabelVector) else np.asarray(labels)
    with open(str(path), "w") as fh:
        for v in values:
            fh.write(f"{int(v)}\n")


def fit_normalization(X):
    """Fit per-dimension z-score statistics on a training matrix."""
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        raise ValueError("cannot fit normalization on an empty matrix")
    return NormalizationStats(mean=X.mean(axis=0), std=X.std(axis=0))


def apply_normalization(X, stats):
    """Center and scale ``X`` with training statistics.

    Dimensions whose training std is below ``CONSTANT_STD`` are centered
    only, to avoid dividing by a vanishing scale.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != stats.mean.shape[0]:
        raise ValueError(
            f"dimension mismatch: matrix has {X.shape[1]} cols, stats have {stats.mean.shape[0]}"
        )
    scale = np.where(stats.std < CONSTANT_STD, 1.0, stats.std)
    return (X - stats.mean) / scale


def partition_dataset(y, k, per_class, seed):
    """Split indices into ``k`` disjoint stratified subsets.

    Each subset receives exactly ``per_class`` samples of every class,
    drawn without replacement under ``seed``. Leftover samples stay
    unassigned.
    """
    if k < 1 or per_class < 1:
        raise PartitionError(f"k and per_class must be >= 1, got k={k}, per_class={per_class}")
    labels = y.labels
    rng = np.random.default_rng(seed)
    chunks = [[] for _ in range(k)]
    need = k * per_class
    for c in range(y.num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size < need:
            raise PartitionError(
                f"class {c}: need {need} samples for k={k} x per_class={per_class}, "
                f"have {idx.size} (short by {need - idx.size})"
            )
        picked = rng.permutation(idx)[:need]
        for j in range(k):
            chunks[j].append(picked[j * per_class : (j + 1) * per_class])
    subsets = tuple(np.sort(np.concatenate(ch)) for ch in chunks)
    return Partition(subsets=subsets, seed=seed)


@dataclass(frozen=True)
class SynthStream:
    """One synthetic feature stream; label vectors are shared across streams."""

    name: str
    train: np.ndarray
    test: np.ndarray
    train_labels: LabelVector = field(repr=False)
    test_labels: LabelVector = field(repr=False)


def synth_streams(
    num_classes,
    per_class_train,
    per_class_test,
    num_streams,
    dims,
    noise,
    seed,
    latent_dim=None,
    separation=3.0,
):
    """Generate correlated synthetic feature streams for one labeled dataset.

    Shared latent class centers are drawn once; every sample gets a latent
    vector (its class center plus unit Gaussian scatter). Each stream then
    applies its own random linear projection of the latents and adds
    stream-specific Gaussian noise of the given level. Deterministic in
    ``seed``.

    ``dims`` and ``noise`` are per-stream sequences (scalars broadcast).
    Returns a list of :class:`SynthStream`; all entries share the same
    label vectors.
    """
    if min(num_classes, per_class_train, per_class_test, num_streams) < 1:
        raise ValueError("all synth counts must be >= 1")
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    dims = np.broadcast_to(np.asarray(dims, dtype=np.int64), (num_streams,))
    noise = np.broadcast_to(np.asarray(noise, dtype=np.float64), (num_streams,))
    if dims.min() < 1:
        raise ValueError("every stream dimension must be >= 1")
    if noise.min() < 0:
        raise ValueError("noise levels must be >= 0")
    if latent_dim is None:
        latent_dim = max(2, num_classes // 2)

    rng = np.random.default_rng(seed)
    centers = separation * rng.standard_normal((num_classes, latent_dim))

    y_train = np.repeat(np.arange(num_classes), per_class_train)
    y_test = np.repeat(np.arange(num_classes), per_class_test)
    z_train = centers[y_train] + rng.standard_normal((y_train.size, latent_dim))
    z_test = centers[y_test] + rng.standard_normal((y_test.size, latent_dim))

    train_labels = LabelVector(y_train, num_classes)
    test_labels = LabelVector(y_test, num_classes)

    streams = []
    for s in range(num_streams):
        proj = rng.standard_normal((latent_dim, int(dims[s]))) / np.sqrt(latent_dim)
        x_train = z_train @ proj + noise[s] * rng.standard_normal((y_train.size, int(dims[s])))
        x_test = z_test @ proj + noise[s] * rng.standard_normal((y_test.size, int(dims[s])))
        streams.append(
            SynthStream(
                name=f"stream{s}",
                train=x_train,
                test=x_test,
                train_labels=train_labels,
                test_labels=test_labels,
            )
        )
    return streams
