"""
Multi-label datasets: seeded synthetic generators and CSV ingestion.

ID samples sum the prototype vectors of their active labels plus Gaussian
noise. OOD regimes:
  shift         prototypes displaced along random unit directions
  uniform       features uniform on [-b, b]^dim, b matched to the ID feature scale
  sparse-label  one active label, the other prototypes subtracted so every
                logit but the strongest is pushed down
"""

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from backend.src.errors import ConfigError, DataFormatError
from backend.src.seeding import make_rng

logger = logging.getLogger(__name__)

OOD_MODES = ("shift", "uniform", "sparse-label")
SPLIT_TAGS = ("train", "val", "test")
DEFAULT_SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

# Exact round trip for float64 through decimal text
CSV_FLOAT_FORMAT = "%.17g"


@dataclass(frozen=True)
class SyntheticSpec:
    num_labels: int = 10
    input_dim: int = 32
    samples: int = 2000
    label_prob: float = 0.3
    noise_sigma: float = 0.5
    prototype_scale: float = 2.0
    seed: int = 7
    ood_mode: str = "shift"
    shift_magnitude: float = 4.0

    def __post_init__(self):
        for name in ("num_labels", "input_dim", "samples"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not (0 < self.label_prob < 1):
            raise ConfigError(f"label_prob must lie in (0, 1), got {self.label_prob!r}")
        if not self.noise_sigma > 0:
            raise ConfigError(f"noise_sigma must be positive, got {self.noise_sigma!r}")
        if not self.prototype_scale > 0:
            raise ConfigError(f"prototype_scale must be positive, got {self.prototype_scale!r}")
        if self.ood_mode not in OOD_MODES:
            raise ConfigError(f"ood_mode must be one of {OOD_MODES}, got {self.ood_mode!r}")
        if not self.shift_magnitude >= 0:
            raise ConfigError(f"shift_magnitude must be nonnegative, got {self.shift_magnitude!r}")
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class MultiLabelDataset:
    features: np.ndarray
    labels: np.ndarray
    provenance: str = ""
    split: np.ndarray = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        Y = np.asarray(self.labels, dtype=np.int8)
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise DataFormatError(f"row count mismatch: {np.shape(self.features)} vs {np.shape(self.labels)}")
        if not np.all((Y == 0) | (Y == 1)):
            raise DataFormatError("labels must be 0/1")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", Y)
        if self.split is not None:
            object.__setattr__(self, "split", np.asarray(self.split, dtype=object))

    def __len__(self):
        return self.features.shape[0]

    @property
    def num_labels(self):
        return self.labels.shape[1]

    @property
    def input_dim(self):
        return self.features.shape[1]

    def subset(self, tag):
        if self.split is None:
            raise ConfigError("dataset has no split tags")
        mask = self.split == tag
        return MultiLabelDataset(
            self.features[mask], self.labels[mask], f"{self.provenance}[{tag}]", self.split[mask]
        )


# === GENERATORS ===
def prototypes(spec):
    """K prototype vectors; depend on seed, K, dim and scale only."""
    rng = make_rng(spec.seed, "prototypes")
    return rng.standard_normal((spec.num_labels, spec.input_dim)) * spec.prototype_scale


def _draw_labels(rng, n, k, label_prob):
    Y = (rng.random((n, k)) < label_prob).astype(np.int8)
    empty = np.flatnonzero(Y.sum(axis=1) == 0)
    while empty.size:
        Y[empty] = (rng.random((empty.size, k)) < label_prob).astype(np.int8)
        empty = empty[Y[empty].sum(axis=1) == 0]
    return Y


def _sample(rng, mu, spec, n):
    Y = _draw_labels(rng, n, spec.num_labels, spec.label_prob)
    X = Y.astype(np.float64) @ mu + rng.standard_normal((n, spec.input_dim)) * spec.noise_sigma
    return X, Y


def generate_id(spec):
    rng = make_rng(spec.seed, "id")
    X, Y = _sample(rng, prototypes(spec), spec, spec.samples)
    logger.info("Generated %d ID samples (K=%d, dim=%d)", spec.samples, spec.num_labels, spec.input_dim)
    return MultiLabelDataset(X, Y, provenance=f"synthetic-id(seed={spec.seed})")


def id_feature_scale(spec):
    """Per-coordinate standard deviation of ID features."""
    return math.sqrt(spec.num_labels * spec.label_prob * spec.prototype_scale**2 + spec.noise_sigma**2)


def generate_ood(spec, samples=None):
    n = spec.samples if samples is None else int(samples)
    rng = make_rng(spec.seed, "ood")
    mu = prototypes(spec)
    k, dim = spec.num_labels, spec.input_dim

    if spec.ood_mode == "shift":
        directions = rng.standard_normal((k, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        X, Y = _sample(rng, mu + spec.shift_magnitude * directions, spec, n)
    elif spec.ood_mode == "uniform":
        # same variance as an ID coordinate: b^2 / 3 = scale^2
        b = math.sqrt(3.0) * id_feature_scale(spec)
        X = rng.uniform(-b, b, size=(n, dim))
        Y = np.zeros((n, k), dtype=np.int8)
    else:
        hot = rng.integers(k, size=n)
        Y = np.zeros((n, k), dtype=np.int8)
        Y[np.arange(n), hot] = 1
        others = (mu.sum(axis=0)[None, :] - mu[hot]) / max(k - 1, 1)
        X = mu[hot] - spec.shift_magnitude * others + rng.standard_normal((n, dim)) * spec.noise_sigma

    logger.info("Generated %d OOD samples (mode=%s)", n, spec.ood_mode)
    return MultiLabelDataset(X, Y, provenance=f"synthetic-ood-{spec.ood_mode}(seed={spec.seed})")


def split_dataset(dataset, fractions=DEFAULT_SPLIT_FRACTIONS, seed=0):
    """Tag every row train/val/test by a seeded permutation."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ConfigError(f"split fractions must be three nonnegative numbers summing to 1, got {fractions}")
    n = len(dataset)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return split_by_counts(dataset, (n_train, n_val, n - n_train - n_val), seed)


def split_by_counts(dataset, counts, seed=0):
    """Same as split_dataset with exact (train, val, test) row counts."""
    n_train, n_val, n_test = (int(c) for c in counts)
    n = len(dataset)
    if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test != n:
        raise ConfigError(f"split counts {counts} do not partition {n} rows")
    order = make_rng(seed, "split").permutation(n)
    tags = np.empty(n, dtype=object)
    tags[order[:n_train]] = "train"
    tags[order[n_train:n_train + n_val]] = "val"
    tags[order[n_train + n_val:]] = "test"
    return replace(dataset, split=tags)


def joint_energy_sanity_logits(num_labels=10, samples=500, noise=0.1, seed=0):
    """
    ID: every logit ~ 2; OOD: one logit ~ 2, the rest ~ -2. Both sets get the
    same per-sample scalar noise, so their max logits coincide exactly while
    their label sums do not.
    """
    rng = make_rng(seed, "noise")
    shift = rng.standard_normal(samples) * noise
    hot = rng.integers(num_labels, size=samples)
    id_logits = np.full((samples, num_labels), 2.0) + shift[:, None]
    ood_logits = np.full((samples, num_labels), -2.0)
    ood_logits[np.arange(samples), hot] = 2.0
    ood_logits += shift[:, None]
    return id_logits, ood_logits


# === CSV IO ===
def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_matrix_csv(values, path, prefix):
    values = np.asarray(values)
    columns = [f"{prefix}{i}" for i in range(values.shape[1])]
    fmt = CSV_FLOAT_FORMAT if values.dtype.kind == "f" else None
    pd.DataFrame(values, columns=columns).to_csv(path, index=False, float_format=fmt, lineterminator="\n")
    return _sha256(path)


def save_csv(dataset, features_path, labels_path):
    """Write features and labels; returns their sha256 checksums."""
    return (
        write_matrix_csv(dataset.features, features_path, "x"),
        write_matrix_csv(dataset.labels, labels_path, "y"),
    )


def _is_number(cell):
    try:
        float(cell)
    except ValueError:
        return False
    return True


def read_numeric_table(path):
    """
    Numeric table with an optional header row (detected when any cell of the
    first row is not a number). Errors name the 1-based file row and column.
    Returns the values and the file row number of the first data row.
    """
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except FileNotFoundError as e:
        raise DataFormatError(f"file not found: {path}") from e
    except pd.errors.EmptyDataError as e:
        raise DataFormatError(f"{path}: file is empty") from e
    except pd.errors.ParserError as e:
        raise DataFormatError(f"{path}: ragged rows ({e})") from e

    cells = frame.to_numpy()
    first_row = 1
    if cells.shape[0] and not all(_is_number(c) for c in cells[0] if c != ""):
        cells = cells[1:]
        first_row = 2
    if cells.shape[0] == 0:
        raise DataFormatError(f"{path}: no data rows")

    try:
        values = cells.astype(np.float64)
        if not np.isnan(values).any():
            return values, first_row
    except ValueError:
        pass
    # short rows come back from pandas as NaN cells
    for r, row in enumerate(cells):
        for c, cell in enumerate(row):
            where = f"{path}: row {r + first_row}, column {c + 1}"
            if not isinstance(cell, str) or cell == "":
                raise DataFormatError(f"{where}: missing value (ragged row)")
            if not _is_number(cell):
                raise DataFormatError(f"{where}: non-numeric cell {cell!r}")
            if math.isnan(float(cell)):
                raise DataFormatError(f"{where}: NaN value")
    raise DataFormatError(f"{path}: unreadable numeric table")


def read_numeric_csv(path):
    return read_numeric_table(path)[0]


def load_csv(features_path, labels_path=None):
    X = read_numeric_csv(features_path)
    if not np.all(np.isfinite(X)):
        raise DataFormatError(f"{features_path}: NaN or Inf values")
    if labels_path is None:
        Y = np.zeros((X.shape[0], 0), dtype=np.int8)
    else:
        Y, first_label_row = read_numeric_table(labels_path)
        if Y.shape[0] != X.shape[0]:
            raise DataFormatError(
                f"row count mismatch: {features_path} has {X.shape[0]} rows, {labels_path} has {Y.shape[0]}"
            )
        bad = np.argwhere((Y != 0) & (Y != 1))
        if bad.size:
            r, c = bad[0]
            raise DataFormatError(f"{labels_path}: row {r + first_label_row}, column {c + 1}: label must be 0 or 1")
    return MultiLabelDataset(X, Y, provenance=str(features_path))


def load_logits_csv(path):
    logits = read_numeric_csv(path)
    if not np.all(np.isfinite(logits)):
        raise DataFormatError(f"{path}: NaN or Inf logits")
    return logits


def write_scores_csv(scores, path, decisions=None):
    frame = pd.DataFrame({"score": np.asarray(scores, dtype=np.float64)})
    if decisions is not None:
        frame["decision"] = [str(d.value if hasattr(d, "value") else d) for d in decisions]
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return _sha256(path)


def load_scores_csv(path):
    table = read_numeric_csv(path)
    if table.shape[1] != 1:
        raise DataFormatError(f"{path}: expected a single score column, got {table.shape[1]}")
    return table[:, 0]
