"""
Dataset model for Robust Lasso.

Holds the observation model y = Phi beta + eps + gamma: a feature matrix with
one row per instance, real-encoded labels, optional class ids and an optional
ground-truth outlier mask.

Features:
- Label encoding (class k -> real value k, 1-based) with nearest-value decoding
- Synthetic three-class generator with uniform box outliers
- CSV and JSON round-trip I/O with cell-level validation
"""

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from src.errors import DataShapeError, DatasetError

logger = logging.getLogger('RobustLasso.Dataset')

# Enough digits for an exact float64 round trip through text
FLOAT_FORMAT = '%.17g'

FORMATS = ('csv', 'json')


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Immutable labeled dataset.

    Attributes:
        features: (n, p) feature matrix, one row per instance
        labels: (n,) real-encoded labels y
        class_ids: optional (n,) integer class ids
        outlier_mask: optional (n,) ground-truth outlier flags
        instance_ids: (n,) stable integer identifiers (defaults to 0..n-1)
        meta: free-form metadata (seed, generator config, ...)
    """
    features: np.ndarray
    labels: np.ndarray
    class_ids: Optional[np.ndarray] = None
    outlier_mask: Optional[np.ndarray] = None
    instance_ids: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        if features.ndim != 2:
            raise DataShapeError(f"features must be a 2-D matrix, got {features.ndim}-D")
        n = features.shape[0]

        labels = np.asarray(self.labels, dtype=float).ravel()
        if labels.shape[0] != n:
            raise DataShapeError(f"{n} feature rows but {labels.shape[0]} labels")
        _check_finite(features, "features")
        _check_finite(labels.reshape(-1, 1), "labels")

        object.__setattr__(self, 'features', _frozen(features))
        object.__setattr__(self, 'labels', _frozen(labels))

        if self.class_ids is not None:
            class_ids = np.asarray(self.class_ids).ravel()
            if class_ids.shape[0] != n:
                raise DataShapeError(f"{n} feature rows but {class_ids.shape[0]} class ids")
            object.__setattr__(self, 'class_ids', _frozen(class_ids.astype(int)))

        if self.outlier_mask is not None:
            mask = np.asarray(self.outlier_mask).ravel()
            if mask.shape[0] != n:
                raise DataShapeError(f"{n} feature rows but outlier mask of length {mask.shape[0]}")
            object.__setattr__(self, 'outlier_mask', _frozen(mask.astype(bool)))

        if self.instance_ids is None:
            ids = np.arange(n)
        else:
            ids = np.asarray(self.instance_ids).ravel()
            if ids.shape[0] != n:
                raise DataShapeError(f"{n} feature rows but {ids.shape[0]} instance ids")
            if len(np.unique(ids)) != n:
                raise DatasetError("instance ids must be unique")
        object.__setattr__(self, 'instance_ids', _frozen(ids.astype(int)))
        object.__setattr__(self, 'meta', dict(self.meta))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def n_outliers(self) -> int:
        if self.outlier_mask is None:
            return 0
        return int(self.outlier_mask.sum())

    def classes(self) -> np.ndarray:
        """Class ids, falling back to the distinct label values when none are stored."""
        if self.class_ids is not None:
            return self.class_ids
        return np.unique(self.labels, return_inverse=True)[1]

    def equals(self, other: 'Dataset') -> bool:
        """Exact equality of all arrays (meta is ignored)."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (same(self.features, other.features)
                and same(self.labels, other.labels)
                and same(self.class_ids, other.class_ids)
                and same(self.outlier_mask, other.outlier_mask)
                and same(self.instance_ids, other.instance_ids))


def _check_finite(matrix: np.ndarray, what: str):
    bad = np.argwhere(~np.isfinite(matrix))
    if len(bad):
        row, col = bad[0]
        raise DatasetError(f"non-finite value at ({row},{col}) in {what}")


def subset(ds: Dataset, indices) -> Dataset:
    """Restrict a dataset to the given rows, keeping ids and metadata."""
    idx = np.asarray(indices, dtype=int)
    return Dataset(
        features=ds.features[idx],
        labels=ds.labels[idx],
        class_ids=None if ds.class_ids is None else ds.class_ids[idx],
        outlier_mask=None if ds.outlier_mask is None else ds.outlier_mask[idx],
        instance_ids=ds.instance_ids[idx],
        meta=ds.meta,
    )


# ---------------------------------------------------------------------------
# Label encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelEncoder:
    """Maps sorted class ids to the real codes 1..K and back."""
    classes: tuple

    @property
    def codes(self) -> np.ndarray:
        return np.arange(1, len(self.classes) + 1, dtype=float)

    def encode(self, class_ids) -> np.ndarray:
        class_ids = np.asarray(class_ids).ravel()
        lookup = {c: i + 1 for i, c in enumerate(self.classes)}
        try:
            return np.array([lookup[c] for c in class_ids.tolist()], dtype=float)
        except KeyError as e:
            raise DatasetError(f"unknown class id: {e.args[0]!r}") from None

    def decode(self, values) -> np.ndarray:
        """Nearest encoded value wins; exact midpoints go to the lower class."""
        values = np.asarray(values, dtype=float).ravel()
        nearest = np.abs(values[:, None] - self.codes[None, :]).argmin(axis=1)
        return np.asarray(self.classes)[nearest]


def encode_labels(class_ids) -> tuple:
    """
    Encode class ids as real labels.

    Class k (in ascending class-id order) becomes the real value k, so
    [C, A, B] over classes {A, B, C} encodes to [3, 1, 2].

    Returns:
        Tuple of (labels, encoder); the encoder decodes predictions.
    """
    class_ids = np.asarray(class_ids).ravel()
    if class_ids.size == 0:
        raise DatasetError("cannot encode an empty label vector")
    encoder = LabelEncoder(classes=tuple(np.unique(class_ids).tolist()))
    return encoder.encode(class_ids), encoder


def decode_labels(encoder: LabelEncoder, values) -> np.ndarray:
    return encoder.decode(values)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """
    Gaussian classes with uniform box outliers.

    Each class c gets per_class_count inliers ~ N(mean_c, class_std^2 I) and
    outlier_count_per_class outliers uniform in mean_c +/- outlier_box_halfwidth.
    outlier_counts, when given, overrides the per-class outlier count.
    """
    class_means: tuple = ((1.0, 1.0), (2.0, 2.0), (3.0, 3.0))
    class_std: float = 0.1
    per_class_count: int = 100
    outlier_count_per_class: int = 30
    outlier_box_halfwidth: float = 0.5
    rng_seed: int = 0
    outlier_counts: Optional[tuple] = None

    def __post_init__(self):
        means = tuple(tuple(float(v) for v in np.atleast_1d(m)) for m in self.class_means)
        if not means:
            raise DatasetError("at least one class mean is required")
        if len({len(m) for m in means}) != 1:
            raise DatasetError("all class means must share one dimension")
        object.__setattr__(self, 'class_means', means)

        if not self.class_std > 0:
            raise DatasetError(f"class_std must be positive, got {self.class_std}")
        if int(self.per_class_count) <= 0:
            raise DatasetError(f"per_class_count must be positive, got {self.per_class_count}")
        if int(self.outlier_count_per_class) < 0:
            raise DatasetError("outlier_count_per_class must be non-negative")
        if not self.outlier_box_halfwidth > 0:
            raise DatasetError("outlier_box_halfwidth must be positive")
        if self.outlier_counts is not None:
            counts = tuple(int(c) for c in self.outlier_counts)
            if len(counts) != len(means) or min(counts) < 0:
                raise DatasetError("outlier_counts needs one non-negative count per class")
            object.__setattr__(self, 'outlier_counts', counts)

    @property
    def n_classes(self) -> int:
        return len(self.class_means)

    @property
    def dim(self) -> int:
        return len(self.class_means[0])

    def outliers_for(self, c: int) -> int:
        if self.outlier_counts is not None:
            return self.outlier_counts[c]
        return int(self.outlier_count_per_class)

    @classmethod
    def three_class(cls, seed: int = 0) -> 'SyntheticConfig':
        """Three classes at (1,1), (2,2), (3,3), sigma 0.1, 100 inliers + 30 outliers each."""
        return cls(rng_seed=seed)

    @classmethod
    def diagonal(cls, n_classes: int, **kwargs) -> 'SyntheticConfig':
        """Classes at (1,1), (2,2), ... (n_classes, n_classes)."""
        means = tuple((float(c), float(c)) for c in range(1, n_classes + 1))
        return cls(class_means=means, **kwargs)

    def to_dict(self) -> dict:
        return {
            'class_means': [list(m) for m in self.class_means],
            'class_std': self.class_std,
            'per_class_count': self.per_class_count,
            'outlier_count_per_class': self.outlier_count_per_class,
            'outlier_box_halfwidth': self.outlier_box_halfwidth,
            'rng_seed': self.rng_seed,
            'outlier_counts': None if self.outlier_counts is None else list(self.outlier_counts),
        }


def split_outliers(total: int, n_classes: int) -> tuple:
    """Split a total outlier count evenly; the remainder goes to the lowest class ids."""
    base, extra = divmod(int(total), n_classes)
    return tuple(base + (1 if c < extra else 0) for c in range(n_classes))


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """
    Generate a synthetic dataset.

    All inliers come first (class by class), then all outliers (class by
    class), matching the [1-300] inliers / [301-390] outliers layout.
    The same seed always gives bit-identical output.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    sigma = float(cfg.class_std)
    half = float(cfg.outlier_box_halfwidth)

    inlier_blocks, inlier_classes = [], []
    for c, mean in enumerate(cfg.class_means):
        mean = np.asarray(mean)
        inlier_blocks.append(rng.normal(mean, sigma, size=(cfg.per_class_count, cfg.dim)))
        inlier_classes.append(np.full(cfg.per_class_count, c))

    outlier_blocks, outlier_classes = [], []
    for c, mean in enumerate(cfg.class_means):
        count = cfg.outliers_for(c)
        mean = np.asarray(mean)
        outlier_blocks.append(rng.uniform(mean - half, mean + half, size=(count, cfg.dim)))
        outlier_classes.append(np.full(count, c))

    features = np.vstack(inlier_blocks + outlier_blocks)
    class_ids = np.concatenate(inlier_classes + outlier_classes).astype(int)
    n_inliers = cfg.per_class_count * cfg.n_classes
    mask = np.zeros(len(class_ids), dtype=bool)
    mask[n_inliers:] = True

    labels, _ = encode_labels(class_ids)
    logger.debug(f"Generated {len(labels)} instances ({mask.sum()} outliers), seed={cfg.rng_seed}")
    return Dataset(
        features=features,
        labels=labels,
        class_ids=class_ids,
        outlier_mask=mask,
        meta={'seed': cfg.rng_seed, 'generator': cfg.to_dict()},
    )


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _infer_format(path: Path, fmt: Optional[str]) -> str:
    fmt = (fmt or path.suffix.lstrip('.')).lower()
    if fmt not in FORMATS:
        raise DatasetError(f"unsupported dataset format: {fmt!r} (expected one of {FORMATS})")
    return fmt


def _fmt(value: float) -> str:
    return FLOAT_FORMAT % value


def save_dataset(ds: Dataset, path, fmt: Optional[str] = None):
    """
    Write a dataset as CSV or JSON.

    CSV header is `id,f1..fp,label[,class][,outlier]`; non-empty metadata is
    written as a leading `# meta: {...}` comment line.
    """
    path = Path(path)
    fmt = _infer_format(path, fmt)
    path.parent.mkdir(parents=True, exist_ok=True)

    if fmt == 'json':
        doc = {
            'features': ds.features.tolist(),
            'labels': ds.labels.tolist(),
            'instance_ids': ds.instance_ids.tolist(),
            'meta': ds.meta,
        }
        if ds.class_ids is not None:
            doc['class_ids'] = ds.class_ids.tolist()
        if ds.outlier_mask is not None:
            doc['outlier_mask'] = ds.outlier_mask.tolist()
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + '\n')
        return

    buf = io.StringIO()
    if ds.meta:
        buf.write(f"# meta: {json.dumps(ds.meta, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator='\n')
    header = ['id'] + [f"f{j + 1}" for j in range(ds.p)] + ['label']
    if ds.class_ids is not None:
        header.append('class')
    if ds.outlier_mask is not None:
        header.append('outlier')
    writer.writerow(header)
    for i in range(ds.n):
        row = [str(ds.instance_ids[i])] + [_fmt(v) for v in ds.features[i]] + [_fmt(ds.labels[i])]
        if ds.class_ids is not None:
            row.append(str(ds.class_ids[i]))
        if ds.outlier_mask is not None:
            row.append('1' if ds.outlier_mask[i] else '0')
        writer.writerow(row)
    path.write_text(buf.getvalue())


def _parse_float(cell: str, row: int, col: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DatasetError(f"non-numeric value {cell!r} at ({row},{col})") from None
    if not np.isfinite(value):
        raise DatasetError(f"non-finite value at ({row},{col})")
    return value


def _parse_int(cell: str, row: int, col: int) -> int:
    value = _parse_float(cell, row, col)
    if value != int(value):
        raise DatasetError(f"non-integer value {cell!r} at ({row},{col})")
    return int(value)


def _load_csv(text: str) -> Dataset:
    meta = {}
    lines = []
    for line in text.splitlines():
        if line.startswith('#'):
            if line.startswith('# meta:'):
                try:
                    meta = json.loads(line[len('# meta:'):])
                except json.JSONDecodeError as e:
                    raise DatasetError(f"invalid meta line: {e}") from None
                if not isinstance(meta, dict):
                    raise DatasetError("meta line must hold a JSON object")
            continue
        if line.strip():
            lines.append(line)
    if not lines:
        raise DatasetError("empty CSV file")

    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    if 'label' not in header:
        raise DatasetError("missing label column")
    feature_cols = [j for j, h in enumerate(header) if h.startswith('f') and h[1:].isdigit()]
    if not feature_cols:
        raise DataShapeError("no feature columns (expected f1..fp)")
    id_col = header.index('id') if 'id' in header else None
    label_col = header.index('label')
    class_col = header.index('class') if 'class' in header else None
    outlier_col = header.index('outlier') if 'outlier' in header else None

    features, labels, class_ids, mask, ids = [], [], [], [], []
    for r, row in enumerate(reader):
        if len(row) != len(header):
            raise DataShapeError(
                f"row {r} has {len(row)} cells but the header declares {len(header)} columns"
            )
        features.append([_parse_float(row[j], r, j) for j in feature_cols])
        labels.append(_parse_float(row[label_col], r, label_col))
        if id_col is not None:
            ids.append(_parse_int(row[id_col], r, id_col))
        if class_col is not None:
            class_ids.append(_parse_int(row[class_col], r, class_col))
        if outlier_col is not None:
            mask.append(_parse_int(row[outlier_col], r, outlier_col) != 0)
    if not features:
        raise DatasetError("CSV file has a header but no rows")

    return Dataset(
        features=np.array(features),
        labels=np.array(labels),
        class_ids=np.array(class_ids) if class_col is not None else None,
        outlier_mask=np.array(mask) if outlier_col is not None else None,
        instance_ids=np.array(ids) if id_col is not None else None,
        meta=meta,
    )


def _load_json(text: str) -> Dataset:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetError(f"invalid JSON dataset: {e}") from None
    if not isinstance(doc, dict):
        raise DatasetError("JSON dataset must be an object")
    if 'features' not in doc:
        raise DatasetError("missing features array")
    if 'labels' not in doc:
        raise DatasetError("missing label column")

    rows = doc['features']
    if not isinstance(rows, list) or not all(isinstance(row, list) for row in rows):
        raise DatasetError("features must be a list of rows")
    if not isinstance(doc['labels'], list):
        raise DatasetError("labels must be a list")
    if not rows:
        raise DatasetError("JSON dataset has no rows")
    widths = {len(row) for row in rows}
    if len(widths) > 1:
        raise DataShapeError(f"feature rows have differing lengths: {sorted(widths)}")
    features = np.array([[_parse_float(str(v), r, j) for j, v in enumerate(row)]
                         for r, row in enumerate(rows)])
    labels = np.array([_parse_float(str(v), r, 0) for r, v in enumerate(doc['labels'])])

    meta = doc.get('meta') or {}
    if not isinstance(meta, dict):
        raise DatasetError("meta must be a JSON object")
    try:
        return Dataset(
            features=features,
            labels=labels,
            class_ids=doc.get('class_ids'),
            outlier_mask=doc.get('outlier_mask'),
            instance_ids=doc.get('instance_ids'),
            meta=meta,
        )
    except (TypeError, ValueError) as e:
        raise DatasetError(f"malformed JSON dataset: {e}") from None


def load_dataset(path, fmt: Optional[str] = None) -> Dataset:
    """Read a dataset written by save_dataset (or by hand in the same layout)."""
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    text = path.read_text()
    ds = _load_csv(text) if fmt == 'csv' else _load_json(text)
    logger.info(f"Loaded {path}: n={ds.n}, p={ds.p}, outliers={ds.n_outliers}")
    return ds
