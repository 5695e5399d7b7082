#!/usr/bin/env python3
"""
Robust Lasso - outlier detection for noisy labeled data.

Architecture:
- dataset: observation model, label encoding, synthetic generator, CSV/JSON I/O
- plasso: SVD preconditioning, exact LASSO path over per-instance outlier
  variables, ordering by activation, count / CV / IPOD selection
- tdca: kNN diffusion graph, lazy random walk, softmax embedding (L-BFGS)
- classify: one-vs-rest linear SVM and random-walk label propagation
- bench: synthetic path experiment, outlier-ratio sweep, staged pipelines

Commands:
- generate: write a synthetic dataset
- embed: TDCA embedding of a dataset's features
- detect: rank and select outliers
- bench: path | sweep | pipeline experiments

Exit codes: 0 success, 2 usage/config error, 3 data-shape error, 4 numerical failure.
"""

import argparse
import json
import logging
import logging.handlers
import sys
from dataclasses import replace
from datetime import datetime
from pathlib import Path

import numpy as np

from src.bench import (
    RATIO_GRID, PipelineConfig, detection_scores, results_to_csv, results_to_json,
    run_path_experiment, run_pipeline, run_ratio_sweep, sweep_to_csv,
)
from src.config import RobustLassoConfig, load_config, thread_limit
from src.dataset import (
    FORMATS, SyntheticConfig, generate_synthetic, load_dataset, save_dataset, split_outliers,
    subset,
)
from src.errors import ConfigError, NoKernelSpaceError, RobustLassoError
from src.plasso import (
    design_matrix, lasso_path, path_to_json, path_to_long_csv, precondition,
    select_outliers_count, select_outliers_cv, select_outliers_ipod,
)
from src.tdca import (
    EmbeddingOptions, concat_features, embedding_to_csv, graph_to_edge_csv,
    reconstruct_states, reduced_features, run_tdca,
)

LOG_FORMAT = '%(asctime)s [%(levelname).1s] %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'

logger = logging.getLogger('RobustLasso')


def setup_logging(level: str = 'INFO', log_file=None):
    """Console logging on stdout plus an optional rotating log file (5MB, 3 backups)."""
    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, level.upper(), logging.INFO))

    # Remove any existing handlers to prevent duplicates
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    formatter = logging.Formatter(LOG_FORMAT, LOG_DATEFMT)
    if log_file:
        file_handler = logging.handlers.RotatingFileHandler(
            log_file,
            maxBytes=5*1024*1024,  # 5MB
            backupCount=3
        )
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)


def _timestamp() -> str:
    return datetime.now().isoformat(timespec='seconds')


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def write_json(path, doc: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + '\n')
    logger.info(f"Wrote {path}")


def write_csv(path, text: str, meta: dict = None):
    """CSV artifact, with the run metadata as a leading `# meta:` comment."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"# meta: {json.dumps(meta, sort_keys=True, default=_json_default)}\n" if meta else ''
    path.write_text(header + text)
    logger.info(f"Wrote {path}")


def _artifact_meta(config: RobustLassoConfig, seed: int, **extra) -> dict:
    meta = {'config': config.to_dict(), 'seed': seed, 'created': _timestamp()}
    meta.update(extra)
    return meta


def _parse_select(value: str):
    """'count=K' or 'cv=F' -> (rule, number)."""
    rule, sep, number = value.partition('=')
    if not sep or rule not in ('count', 'cv'):
        raise ConfigError(f"--select must be count=K or cv=F, got {value!r}")
    try:
        n = int(number)
    except ValueError:
        raise ConfigError(f"--select needs an integer, got {value!r}") from None
    if n < 0 or (rule == 'cv' and n < 2):
        raise ConfigError(f"invalid --select value {value!r}")
    return rule, n


def _parse_ratios(value: str):
    try:
        return tuple(float(v) for v in value.split(',') if v.strip())
    except ValueError:
        raise ConfigError(f"--ratios must be a comma-separated list of numbers, got {value!r}") from None


def _tdca_config(config: RobustLassoConfig, args) -> RobustLassoConfig:
    return config.with_section(
        'tdca',
        k_neighbors=getattr(args, 'k', None),
        dim=getattr(args, 'dim', None),
        similarity=getattr(args, 'similarity', None),
        restart_prob=getattr(args, 'restart_prob', None),
        normalize=False if getattr(args, 'no_normalize', False) else None,
    )


def _embed(features, config: RobustLassoConfig, workers: int):
    t = config.tdca
    return run_tdca(
        features, k=t.k_neighbors, similarity=t.similarity, normalize_rows=t.normalize,
        restart_prob=t.restart_prob, tol=t.walk_tol, max_iter=t.walk_max_iter,
        opts=EmbeddingOptions(dim=t.dim, init_std=t.init_std, memory=t.lbfgs_memory,
                              gtol=t.lbfgs_gtol, max_iter=t.lbfgs_max_iter, seed=t.seed),
        truncate_above=t.truncate_above, truncate_threshold=t.truncate_threshold,
        workers=workers,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args, config: RobustLassoConfig) -> int:
    s = config.synthetic
    if args.three_class:
        cfg = SyntheticConfig.three_class(seed=s.seed)
    else:
        cfg = SyntheticConfig(
            class_means=s.class_means, class_std=s.class_std, per_class_count=s.per_class_count,
            outlier_count_per_class=s.outlier_count_per_class,
            outlier_box_halfwidth=s.outlier_box_halfwidth, rng_seed=s.seed,
        )
    if args.classes is not None:
        if args.classes < 1:
            raise ConfigError(f"--classes must be >= 1, got {args.classes}")
        cfg = SyntheticConfig.diagonal(
            args.classes, class_std=cfg.class_std, per_class_count=cfg.per_class_count,
            outlier_count_per_class=cfg.outlier_count_per_class,
            outlier_box_halfwidth=cfg.outlier_box_halfwidth, rng_seed=cfg.rng_seed,
        )
    overrides = {
        'per_class_count': args.per_class,
        'outlier_count_per_class': args.outliers_per_class,
        'class_std': args.sigma,
        'outlier_box_halfwidth': args.halfwidth,
        'rng_seed': args.seed,
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})

    config = config.with_section('synthetic', class_means=cfg.class_means, class_std=cfg.class_std,
                                 per_class_count=cfg.per_class_count,
                                 outlier_count_per_class=cfg.outlier_count_per_class,
                                 outlier_box_halfwidth=cfg.outlier_box_halfwidth,
                                 seed=cfg.rng_seed)
    ds = generate_synthetic(cfg)
    ds = replace(ds, meta={**ds.meta, 'config': config.to_dict(), 'created': _timestamp()})
    save_dataset(ds, args.output, args.format)
    logger.info(f"Generated {ds.n}x{ds.p} dataset ({ds.n_outliers} outliers) -> {args.output}")
    return 0


def cmd_embed(args, config: RobustLassoConfig) -> int:
    config = _tdca_config(config, args)
    if args.seed is not None:
        config = config.with_section('tdca', seed=args.seed)
    ds = load_dataset(args.input)
    graph, states, emb = _embed(ds.features, config, thread_limit())
    gap = float(np.max(np.abs(reconstruct_states(emb) - states.S)))
    meta = _artifact_meta(config, config.tdca.seed, input=str(args.input),
                          final_kl=emb.final_kl, walk_converged=states.converged,
                          max_reconstruction_gap=gap)
    write_csv(args.output, embedding_to_csv(emb, ds.instance_ids), meta)
    if args.edges:
        write_csv(args.edges, graph_to_edge_csv(graph), meta)
    return 0


def cmd_detect(args, config: RobustLassoConfig) -> int:
    config = _tdca_config(config, args)
    if args.no_intercept:
        config = config.with_section('plasso', intercept=False)
    p = config.plasso
    rule, number = _parse_select(args.select)
    if args.method == 'ipod' and rule != 'count':
        raise ConfigError("--method ipod needs --select count=K")

    ds = load_dataset(args.input)
    workers = thread_limit()
    if args.features == 'tdca':
        _, _, emb = _embed(ds.features, config, workers)
        det_features, clf_features = reduced_features(emb), concat_features(emb)
    else:
        det_features = clf_features = ds.features

    pre = precondition(design_matrix(det_features, p.intercept), rank_tolerance=p.rank_tolerance)
    path = lasso_path(pre, ds.labels, lambda_min_ratio=p.lambda_min_ratio)

    if rule == 'cv':
        view = replace(ds, features=clf_features)
        report = select_outliers_cv(path, view, folds=number, reg_c=config.classify.reg_c,
                                    seed=config.classify.seed,
                                    max_candidates=p.cv_max_candidates, workers=workers,
                                    classifier_opts={'max_iter': config.classify.max_iter})
    elif args.method == 'ipod':
        report = select_outliers_ipod(path, pre, ds.labels, number, max_iter=p.ipod_max_iter)
    else:
        report = select_outliers_count(path, number)

    doc = {
        'input': str(args.input),
        'method': args.method,
        'features': args.features,
        'report': report.to_dict(),
        'path': {'lambda_max': path.lambda_max, 'knots': len(path), 'terminated': path.terminated,
                 'effective_observations': pre.effective_observations},
        'config': config.to_dict(),
        'seed': config.classify.seed,
        'created': _timestamp(),
    }
    if ds.outlier_mask is not None:
        doc['metrics'] = detection_scores(report.selected, ds.outlier_mask)
    write_json(args.output, doc)

    ranked = Path(args.output).with_suffix('.ranked.csv')
    lines = ['rank,id,activation_lambda,selected' + (',is_outlier' if ds.outlier_mask is not None else '')]
    chosen = set(report.selected)
    for rank, (j, lam) in enumerate(zip(report.ranking, report.activation_lambdas), start=1):
        line = f"{rank},{ds.instance_ids[j]},{lam:.17g},{1 if j in chosen else 0}"
        if ds.outlier_mask is not None:
            line += f",{1 if ds.outlier_mask[j] else 0}"
        lines.append(line)
    write_csv(ranked, '\n'.join(lines) + '\n', {'config': doc['config'], 'seed': doc['seed']})

    if args.path_csv:
        write_csv(args.path_csv, path_to_long_csv(path, ds.outlier_mask),
                  {'config': doc['config'], 'seed': doc['seed']})
    if args.path_json:
        write_json(args.path_json, {'breakpoints': path_to_json(path), 'config': doc['config']})
    if args.inliers_out:
        kept = np.setdiff1d(np.arange(ds.n), np.asarray(report.selected, dtype=int))
        cleaned = subset(ds, kept)
        cleaned = replace(cleaned, meta={**ds.meta, 'removed_by': report.selection_rule,
                                         'removed': len(report.selected)})
        save_dataset(cleaned, args.inliers_out)
        logger.info(f"Wrote {cleaned.n} remaining instances to {args.inliers_out}")

    recall = doc.get('metrics', {}).get('recall')
    logger.info(f"Selected {len(report.selected)} outliers ({report.selection_rule})"
                + (f", recall {recall:.3f}" if recall is not None else ''))
    return 0


def _pipeline_configs(names, config: RobustLassoConfig, seed: int):
    t, p, c, b = config.tdca, config.plasso, config.classify, config.bench
    return [
        PipelineConfig.named(
            name, folds=p.folds, cv_max_candidates=p.cv_max_candidates, intercept=p.intercept,
            lambda_min_ratio=p.lambda_min_ratio, ipod_max_iter=p.ipod_max_iter,
            reg_c=c.reg_c, svm_max_iter=c.max_iter,
            k_neighbors=t.k_neighbors, similarity=t.similarity, normalize=t.normalize,
            restart_prob=t.restart_prob, dim=t.dim, test_fraction=b.test_fraction, seed=seed,
        )
        for name in names
    ]


def cmd_bench(args, config: RobustLassoConfig) -> int:
    b = config.bench
    repeats = args.repeats if args.repeats is not None else b.repeats
    seed = args.seed if args.seed is not None else b.seed
    ratios = _parse_ratios(args.ratios) if args.ratios else (b.ratios or RATIO_GRID)
    config = config.with_section('bench', repeats=repeats, seed=seed, ratios=ratios)
    out = Path(args.out_dir)
    workers = thread_limit()
    p = config.plasso
    s = config.synthetic
    base = SyntheticConfig(class_means=s.class_means, class_std=s.class_std,
                           per_class_count=s.per_class_count,
                           outlier_count_per_class=s.outlier_count_per_class,
                           outlier_box_halfwidth=s.outlier_box_halfwidth, rng_seed=seed)
    meta = _artifact_meta(config, seed)

    if args.experiment in ('path', 'sweep'):
        if args.experiment == 'path':
            experiment = run_path_experiment(seed, base, intercept=p.intercept,
                                             lambda_min_ratio=p.lambda_min_ratio,
                                             rank_tolerance=p.rank_tolerance)
            write_csv(out / 'path_long.csv', experiment.path_csv, meta)
        sweep = run_ratio_sweep(ratios, repeats, seed, base=base, workers=workers,
                                intercept=p.intercept, lambda_min_ratio=p.lambda_min_ratio,
                                rank_tolerance=p.rank_tolerance)
        prefix = args.experiment
        write_csv(out / f'{prefix}_sweep.csv', sweep_to_csv(sweep), meta)
        write_csv(out / f'{prefix}_records.csv', results_to_csv(sweep), meta)
        doc = {'sweep': results_to_json(sweep), 'config': meta['config'], 'seed': seed,
               'created': meta['created']}
        if args.experiment == 'path':
            doc['path_experiment'] = results_to_json(experiment)
        write_json(out / f'{prefix}_results.json', doc)
        return 0

    if args.input:
        ds = load_dataset(args.input)
    else:
        # Classes on a line collapse under the squared inner product; use the heat kernel
        config = config.with_section('tdca', similarity='heat', normalize=False)
        counts = split_outliers(round(0.3 * base.per_class_count * base.n_classes), base.n_classes)
        ds = generate_synthetic(replace(base, outlier_counts=counts))
        meta = _artifact_meta(config, seed)
    names = [n.strip() for n in args.pipelines.split(',')] if args.pipelines else list(PipelineConfig.ROWS)
    result = run_pipeline(ds, _pipeline_configs(names, config, seed), workers=workers)
    write_csv(out / 'pipeline.csv', results_to_csv(result), meta)
    write_json(out / 'pipeline.json', {'pipeline': results_to_json(result), 'config': meta['config'],
                                       'seed': seed, 'created': meta['created']})
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Robust Lasso - outlier detection for noisy labeled data'
    )
    parser.add_argument(
        '--config', '-c',
        default=None,
        help='YAML configuration file (default: built-in defaults)'
    )
    parser.add_argument(
        '--log-file',
        default=None,
        help='Also log to this file (rotated at 5MB, 3 backups)'
    )
    parser.add_argument(
        '--verbose', '-v',
        action='store_true',
        help='Debug logging'
    )
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('generate', help='Write a synthetic dataset')
    gen.add_argument('--three-class', action='store_true',
                     help='Three classes at (1,1),(2,2),(3,3), sigma 0.1, 100+30 per class')
    gen.add_argument('--classes', type=int, default=None,
                     help='Number of classes placed on the diagonal')
    gen.add_argument('--per-class', type=int, default=None, help='Inliers per class')
    gen.add_argument('--outliers-per-class', type=int, default=None, help='Outliers per class')
    gen.add_argument('--sigma', type=float, default=None, help='Inlier standard deviation')
    gen.add_argument('--halfwidth', type=float, default=None, help='Outlier box halfwidth')
    gen.add_argument('--seed', type=int, default=None, help='Generator seed')
    gen.add_argument('--output', '-o', required=True, help='Output dataset file')
    gen.add_argument('--format', choices=FORMATS, default=None,
                     help='csv or json (default: from the file extension)')
    gen.set_defaults(func=cmd_generate)

    def tdca_flags(p):
        p.add_argument('--k', type=int, default=None, help='Neighbors per node')
        p.add_argument('--dim', type=int, default=None, help='Embedding dimension')
        p.add_argument('--similarity', choices=('inner', 'heat'), default=None,
                       help='Graph similarity')
        p.add_argument('--restart-prob', type=float, default=None, help='Walk restart probability')
        p.add_argument('--no-normalize', action='store_true',
                       help='Use raw rows in the similarity (no L2 normalization)')

    emb = sub.add_parser('embed', help='TDCA embedding of a dataset')
    emb.add_argument('--input', '-i', required=True, help='Input dataset file')
    emb.add_argument('--output', '-o', required=True, help='Embedding CSV')
    emb.add_argument('--edges', default=None, help='Also write the graph edge list CSV')
    emb.add_argument('--seed', type=int, default=None, help='Embedding initialization seed')
    tdca_flags(emb)
    emb.set_defaults(func=cmd_embed)

    det = sub.add_parser('detect', help='Rank and select outliers')
    det.add_argument('--input', '-i', required=True, help='Input dataset file')
    det.add_argument('--output', '-o', required=True,
                     help='Report JSON (ranked CSV is written beside it)')
    det.add_argument('--method', choices=('plasso', 'ipod'), default='plasso')
    det.add_argument('--features', choices=('raw', 'tdca'), default='raw')
    det.add_argument('--select', default='cv=5', help='count=K or cv=F (default: cv=5)')
    det.add_argument('--path-csv', default=None, help='Long-format path CSV for plotting')
    det.add_argument('--path-json', default=None, help='Path breakpoints as JSON')
    det.add_argument('--inliers-out', default=None,
                     help='Write the dataset without the selected outliers (CSV or JSON)')
    det.add_argument('--no-intercept', action='store_true', help='No intercept column in the design')
    tdca_flags(det)
    det.set_defaults(func=cmd_detect)

    bench = sub.add_parser('bench', help='Run benchmark experiments')
    bench.add_argument('experiment', choices=('path', 'sweep', 'pipeline'))
    bench.add_argument('--repeats', type=int, default=None, help='Repeats per ratio')
    bench.add_argument('--ratios', default=None, help='Comma-separated outlier ratios')
    bench.add_argument('--seed', type=int, default=None, help='Base seed')
    bench.add_argument('--out-dir', default='results', help='Output directory (default: results)')
    bench.add_argument('--input', '-i', default=None,
                       help='Dataset for pipeline runs (default: synthetic, 30%% outliers)')
    bench.add_argument('--pipelines', default=None,
                       help='Comma-separated pipeline names (default: all)')
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    setup_logging('DEBUG' if args.verbose else 'INFO', args.log_file)
    try:
        config = load_config(args.config)
        setup_logging('DEBUG' if args.verbose else config.logging.level,
                      args.log_file or config.logging.file)
        return args.func(args, config)
    except NoKernelSpaceError as e:
        logger.error(f"{e} - rerun with --features tdca")
        return e.exit_code
    except RobustLassoError as e:
        logger.error(str(e))
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
