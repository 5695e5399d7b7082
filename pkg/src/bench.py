"""
Benchmark harness for Robust Lasso.

Features:
- Path experiment on the three-class synthetic set: long-format path CSV and
  the share of true outliers among the first activations
- Outlier-ratio sweep (10% to 150% by default) with seeded repeats run in a
  worker pool
- Staged pipeline runs: raw or TDCA features, no / P-LASSO / IPOD removal,
  linear or LRW classifier, on a stratified train/test split
- JSON and CSV result export
"""

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from sklearn.model_selection import train_test_split

from src.classify import UNLABELED, accuracy, lrw_propagate, predict, train_linear
from src.dataset import Dataset, SyntheticConfig, encode_labels, generate_synthetic, split_outliers
from src.errors import ConfigError
from src.plasso import (
    design_matrix, lasso_path, order_by_activation, path_to_long_csv,
    precondition, select_outliers_count, select_outliers_cv, select_outliers_ipod,
)
from src.tdca import EmbeddingOptions, build_graph, concat_features, reduced_features, run_tdca

logger = logging.getLogger('RobustLasso.Bench')

RATIO_GRID = (0.1, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)
DETECTION_TARGET = 0.85
MAX_RATIO = 3.0


def detection_scores(selected: Sequence[int], outlier_mask) -> dict:
    """Recall and precision of a selected set against the ground-truth mask."""
    mask = np.asarray(outlier_mask, dtype=bool)
    truth = set(np.flatnonzero(mask).tolist())
    chosen = set(int(j) for j in selected)
    hits = len(truth & chosen)
    return {
        'recall': hits / len(truth) if truth else None,
        'precision': hits / len(chosen) if chosen else None,
        'true_outliers': len(truth),
        'selected': len(chosen),
        'hits': hits,
    }


# ---------------------------------------------------------------------------
# Path experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathExperimentResult:
    """
    Outcome of one path experiment.

    fraction_top is the share of true outliers among the first T ranked
    instances (T = number of true outliers); None when there are no outliers.
    """
    seed: int
    path_csv: str = field(repr=False)
    fraction_top: Optional[float]
    n_outliers: int
    n_ranked: int
    n_knots: int
    max_kkt_violation: float
    runtime_ms: float
    config_snapshot: dict = field(default_factory=dict)

    @property
    def target_met(self) -> Optional[bool]:
        if self.fraction_top is None:
            return None
        return self.fraction_top >= DETECTION_TARGET

    @property
    def ordering_metrics(self) -> dict:
        if self.fraction_top is None:
            return {'status': 'not_applicable', 'n_outliers': 0, 'n_ranked': self.n_ranked}
        return {
            'status': 'ok',
            'fraction_top': self.fraction_top,
            'n_outliers': self.n_outliers,
            'n_ranked': self.n_ranked,
            'target': DETECTION_TARGET,
            'target_met': self.target_met,
        }


def _detect_path(ds: Dataset, intercept: bool, lambda_min_ratio: float, rank_tolerance: float,
                 max_active: Optional[int] = None):
    pre = precondition(design_matrix(ds.features, intercept), rank_tolerance=rank_tolerance)
    path = lasso_path(pre, ds.labels, lambda_min_ratio=lambda_min_ratio, max_active=max_active)
    return pre, path


def run_path_experiment(seed: int = 0, cfg: Optional[SyntheticConfig] = None,
                        intercept: bool = True, lambda_min_ratio: float = 1e-6,
                        rank_tolerance: float = 1e-10) -> PathExperimentResult:
    """Generate the synthetic set, run the full path and score the ordering."""
    cfg = replace(cfg or SyntheticConfig.three_class(), rng_seed=seed)
    started = time.perf_counter()
    ds = generate_synthetic(cfg)
    pre, path = _detect_path(ds, intercept, lambda_min_ratio, rank_tolerance)
    report = order_by_activation(path)

    n_out = ds.n_outliers
    fraction = None
    if n_out:
        top = report.ranking[:n_out]
        fraction = float(np.sum(ds.outlier_mask[list(top)])) / n_out

    result = PathExperimentResult(
        seed=seed,
        path_csv=path_to_long_csv(path, ds.outlier_mask),
        fraction_top=fraction,
        n_outliers=n_out,
        n_ranked=len(report.ranking),
        n_knots=len(path),
        max_kkt_violation=max(bp.kkt_violation for bp in path.breakpoints),
        runtime_ms=(time.perf_counter() - started) * 1000,
        config_snapshot={'synthetic': cfg.to_dict(), 'intercept': intercept,
                         'lambda_min_ratio': lambda_min_ratio},
    )
    if fraction is None:
        logger.info(f"Path experiment seed={seed}: no outliers, ordering not applicable")
    else:
        logger.info(f"Path experiment seed={seed}: {fraction:.3f} of the first {n_out} are outliers "
                    f"(target {DETECTION_TARGET}: {'met' if result.target_met else 'not met'})")
    return result


# ---------------------------------------------------------------------------
# Ratio sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentResult:
    """
    Per-repeat records plus aggregates recomputable from them.

    aggregates maps a group key (ratio or pipeline name) to {metric: {mean, std, repeats}}.
    """
    name: str
    config_snapshot: dict
    records: tuple
    aggregates: dict
    runtime_ms: float
    seeds: tuple = ()
    notes: tuple = ()


def aggregate_records(records: Sequence[dict], key: str, metrics: Sequence[str]) -> dict:
    """Mean and population std (ddof=0) of each metric per group, skipping missing values."""
    groups = {}
    for rec in records:
        groups.setdefault(rec[key], []).append(rec)
    out = {}
    for group, recs in groups.items():
        out[group] = {}
        for metric in metrics:
            values = np.array([r[metric] for r in recs if r.get(metric) is not None], dtype=float)
            if values.size == 0:
                continue
            out[group][metric] = {
                'mean': float(values.mean()),
                'std': float(values.std(ddof=0)),
                'repeats': int(values.size),
            }
    return out


def cell_seed(seed: int, *key: int) -> int:
    """Independent generator seed for one sweep cell."""
    return int(np.random.SeedSequence(seed, spawn_key=tuple(key)).generate_state(1)[0])


def run_ratio_sweep(ratios: Sequence[float] = RATIO_GRID, repeats: int = 10, seed: int = 0,
                    base: Optional[SyntheticConfig] = None, workers: int = 1,
                    intercept: bool = True, lambda_min_ratio: float = 1e-6,
                    rank_tolerance: float = 1e-10) -> ExperimentResult:
    """
    Detection accuracy as the outlier ratio grows.

    For ratio rho the set keeps its inliers and gets round(rho * inliers)
    outliers split evenly across classes. Detected outliers are the first
    |truth| instances to activate; accuracy is |detected & truth| / |truth|.
    Ratios outside (0, 3] are skipped with a note.
    """
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    base = base or SyntheticConfig.three_class()
    inliers = base.per_class_count * base.n_classes
    started = time.perf_counter()

    notes, cells = [], []
    for ri, rho in enumerate(ratios):
        if not 0 < rho <= MAX_RATIO:
            notes.append(f"ratio {rho} skipped: must be in (0, {MAX_RATIO}]")
            logger.warning(notes[-1])
            continue
        for rep in range(repeats):
            cells.append((ri, float(rho), rep, cell_seed(seed, ri, rep)))

    def run_cell(cell):
        ri, rho, rep, s = cell
        counts = split_outliers(round(rho * inliers), base.n_classes)
        cfg = replace(base, rng_seed=s, outlier_counts=counts)
        ds = generate_synthetic(cfg)
        truth = ds.n_outliers
        record = {'ratio': rho, 'repeat': rep, 'seed': s, 'n_outliers': truth}
        if truth == 0:
            record.update(detection_accuracy=None, precision=None, max_kkt_violation=0.0)
            return record
        pre, path = _detect_path(ds, intercept, lambda_min_ratio, rank_tolerance, max_active=truth)
        selected = select_outliers_count(path, truth).selected
        scores = detection_scores(selected, ds.outlier_mask)
        record.update(
            detection_accuracy=scores['recall'],
            precision=scores['precision'],
            max_kkt_violation=max(bp.kkt_violation for bp in path.breakpoints),
        )
        return record

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(run_cell, cells))
    records.sort(key=lambda r: (r['ratio'], r['repeat']))

    aggregates = aggregate_records(records, 'ratio', ['detection_accuracy', 'precision'])
    for rho, agg in sorted(aggregates.items()):
        acc = agg.get('detection_accuracy')
        if acc:
            logger.info(f"ratio {rho:.2f}: detection {acc['mean']:.3f} +/- {acc['std']:.3f} "
                        f"({acc['repeats']} repeats)")

    return ExperimentResult(
        name='ratio_sweep',
        config_snapshot={'ratios': [float(r) for r in ratios], 'repeats': repeats, 'seed': seed,
                         'base': base.to_dict(), 'intercept': intercept,
                         'lambda_min_ratio': lambda_min_ratio},
        records=tuple(records),
        aggregates=aggregates,
        runtime_ms=(time.perf_counter() - started) * 1000,
        seeds=tuple(c[3] for c in cells),
        notes=tuple(notes),
    )


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LabeledView:
    """Training rows: features, class ids and (for scoring removal only) the truth mask."""
    indices: np.ndarray
    class_ids: np.ndarray
    outlier_mask: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class UnlabeledView:
    """Test rows as seen by training stages: positions only, no labels."""
    indices: np.ndarray


def stratified_split(ds: Dataset, test_fraction: float = 0.3, seed: int = 0):
    """
    Seeded stratified train/test split.

    Returns:
        (LabeledView, UnlabeledView, test class ids); the last item is only
        for scoring and never reaches a training stage.
    """
    classes = np.asarray(ds.classes())
    idx = np.arange(ds.n)
    train, test = train_test_split(idx, test_size=test_fraction, random_state=seed,
                                   stratify=classes)
    train, test = np.sort(train), np.sort(test)
    mask = None if ds.outlier_mask is None else ds.outlier_mask[train]
    return LabeledView(train, classes[train], mask), UnlabeledView(test), classes[test]


FEATURE_STAGES = ('raw', 'tdca')
REMOVAL_STAGES = ('none', 'plasso', 'ipod')
CLASSIFIER_STAGES = ('linear', 'lrw')


@dataclass(frozen=True)
class PipelineConfig:
    """
    Stage choices and parameters of one pipeline run.

    select='count' removes k instances (k=None uses the true training outlier
    count); select='cv' picks the path knot by cross-validation.
    """
    name: str = 'custom'
    features: str = 'raw'
    removal: str = 'none'
    classifier: str = 'linear'
    select: str = 'count'
    k: Optional[int] = None
    folds: int = 5
    cv_max_candidates: Optional[int] = 40
    intercept: bool = True
    lambda_min_ratio: float = 1e-6
    ipod_max_iter: int = 100
    reg_c: float = 1.0
    svm_max_iter: int = 1000
    k_neighbors: int = 10
    similarity: str = 'inner'
    normalize: bool = True
    restart_prob: float = 0.5
    dim: int = 8
    test_fraction: float = 0.3
    seed: int = 0

    ROWS = {
        'RAW': ('raw', 'none', 'linear'),
        'LRW': ('raw', 'none', 'lrw'),
        'TDCA': ('tdca', 'none', 'linear'),
        'P-LASSO': ('raw', 'plasso', 'linear'),
        'IPOD': ('raw', 'ipod', 'linear'),
        'P-LASSO-TDCA': ('tdca', 'plasso', 'linear'),
    }

    @classmethod
    def named(cls, row: str, **overrides) -> 'PipelineConfig':
        """Configuration for one of RAW, LRW, TDCA, P-LASSO, IPOD, P-LASSO-TDCA."""
        try:
            features, removal, classifier = cls.ROWS[row]
        except KeyError:
            raise ConfigError(f"unknown pipeline {row!r} (expected one of {sorted(cls.ROWS)})") from None
        return cls(name=row, features=features, removal=removal, classifier=classifier, **overrides)

    def validate(self) -> 'PipelineConfig':
        if self.features not in FEATURE_STAGES:
            raise ConfigError(f"unknown feature stage {self.features!r}")
        if self.removal not in REMOVAL_STAGES:
            raise ConfigError(f"unknown removal stage {self.removal!r}")
        if self.classifier not in CLASSIFIER_STAGES:
            raise ConfigError(f"unknown classifier {self.classifier!r}")
        if self.select not in ('count', 'cv'):
            raise ConfigError(f"unknown selection rule {self.select!r}")
        if self.classifier == 'lrw' and self.features == 'tdca':
            raise ConfigError("LRW classifies on the graph, not on features: "
                              "it cannot be combined with TDCA features")
        if self.removal == 'ipod' and self.select == 'cv':
            raise ConfigError("IPOD needs an explicit outlier count (select=count)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _remove_outliers(cfg: PipelineConfig, det_features: np.ndarray, clf_features: np.ndarray,
                     train: LabeledView):
    """Indices (positions within train) flagged as outliers, plus the selection report."""
    y, _ = encode_labels(train.class_ids)
    pre = precondition(design_matrix(det_features, cfg.intercept))
    path = lasso_path(pre, y, lambda_min_ratio=cfg.lambda_min_ratio)

    if cfg.select == 'cv':
        view = Dataset(features=clf_features, labels=y, class_ids=train.class_ids)
        report = select_outliers_cv(path, view, folds=cfg.folds, reg_c=cfg.reg_c, seed=cfg.seed,
                                    max_candidates=cfg.cv_max_candidates,
                                    classifier_opts={'max_iter': cfg.svm_max_iter})
        return report.selected, report

    k = cfg.k
    if k is None:
        if train.outlier_mask is None:
            raise ConfigError("select=count needs k when the dataset has no outlier mask")
        k = int(train.outlier_mask.sum())
    if cfg.removal == 'ipod':
        report = select_outliers_ipod(path, pre, y, k, max_iter=cfg.ipod_max_iter)
    else:
        report = select_outliers_count(path, k)
    return report.selected, report


def _run_one(ds: Dataset, cfg: PipelineConfig) -> dict:
    cfg.validate()
    train, test, test_truth = stratified_split(ds, cfg.test_fraction, cfg.seed)

    if cfg.features == 'tdca':
        # Graph spans train and test rows; labels are not used here
        _, _, emb = run_tdca(ds.features, k=cfg.k_neighbors, similarity=cfg.similarity,
                             normalize_rows=cfg.normalize, restart_prob=cfg.restart_prob,
                             opts=EmbeddingOptions(dim=cfg.dim, seed=cfg.seed))
        det_all, clf_all = reduced_features(emb), concat_features(emb)
    else:
        det_all = clf_all = np.asarray(ds.features)

    removed = ()
    record = {'pipeline': cfg.name, 'seed': cfg.seed}
    if cfg.removal != 'none':
        removed, report = _remove_outliers(cfg, det_all[train.indices], clf_all[train.indices], train)
        record['selection_rule'] = report.selection_rule
        if train.outlier_mask is not None:
            scores = detection_scores(removed, train.outlier_mask)
            record['removal_recall'] = scores['recall']
            record['removal_precision'] = scores['precision']
    keep = np.setdiff1d(np.arange(len(train.indices)), np.asarray(removed, dtype=int))
    record['removed'] = len(removed)

    if cfg.classifier == 'lrw':
        g = build_graph(ds.features, k=cfg.k_neighbors, similarity=cfg.similarity,
                        normalize_rows=cfg.normalize)
        seeds = np.full(ds.n, UNLABELED)
        seeds[train.indices[keep]] = train.class_ids[keep]
        pred = lrw_propagate(g, seeds, restart_prob=cfg.restart_prob)[test.indices]
    else:
        model = train_linear(clf_all[train.indices[keep]], train.class_ids[keep], cfg.reg_c,
                             max_iter=cfg.svm_max_iter, seed=cfg.seed)
        pred = predict(model, clf_all[test.indices])

    record['test_accuracy'] = accuracy(pred, test_truth)
    logger.info(f"Pipeline {cfg.name}: removed {record['removed']}, "
                f"test accuracy {record['test_accuracy']:.4f}")
    return record


def run_pipeline(ds: Dataset, cfg, workers: int = 1) -> ExperimentResult:
    """
    Run one or more pipeline configurations on the same split.

    Args:
        ds: dataset (class ids required)
        cfg: a PipelineConfig or a sequence of them
        workers: threads running configurations side by side
    """
    configs = [cfg] if isinstance(cfg, PipelineConfig) else list(cfg)
    for c in configs:
        c.validate()
    started = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(lambda c: _run_one(ds, c), configs))
    metrics = ['test_accuracy', 'removal_recall', 'removal_precision']
    return ExperimentResult(
        name='pipeline',
        config_snapshot={'pipelines': [c.to_dict() for c in configs], 'dataset_meta': ds.meta},
        records=tuple(records),
        aggregates=aggregate_records(records, 'pipeline', metrics),
        runtime_ms=(time.perf_counter() - started) * 1000,
        seeds=tuple(c.seed for c in configs),
    )


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def results_to_json(result) -> dict:
    """Plain-dict form of an ExperimentResult or PathExperimentResult."""
    if isinstance(result, PathExperimentResult):
        return {
            'name': 'path_experiment',
            'seed': result.seed,
            'ordering_metrics': result.ordering_metrics,
            'n_knots': result.n_knots,
            'max_kkt_violation': result.max_kkt_violation,
            'runtime_ms': result.runtime_ms,
            'config': result.config_snapshot,
        }
    return {
        'name': result.name,
        'config': result.config_snapshot,
        'records': list(result.records),
        'aggregates': {str(k): v for k, v in result.aggregates.items()},
        'runtime_ms': result.runtime_ms,
        'seeds': list(result.seeds),
        'notes': list(result.notes),
    }


def results_to_csv(result: ExperimentResult) -> str:
    """One row per record; columns are the union of record keys in first-seen order."""
    columns = []
    for rec in result.records:
        columns.extend(k for k in rec if k not in columns)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator='\n', restval='')
    writer.writeheader()
    for rec in result.records:
        writer.writerow({k: '' if v is None else v for k, v in rec.items()})
    return buf.getvalue()


def sweep_to_csv(result: ExperimentResult, metric: str = 'detection_accuracy') -> str:
    """Columns ratio, mean, std, repeats, one row per ratio."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(['ratio', 'mean', 'std', 'repeats'])
    for rho in sorted(result.aggregates):
        agg = result.aggregates[rho].get(metric)
        if agg is None:
            continue
        writer.writerow([rho, '%.17g' % agg['mean'], '%.17g' % agg['std'], agg['repeats']])
    return buf.getvalue()
