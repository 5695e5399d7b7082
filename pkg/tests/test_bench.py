"""Tests for the benchmark harness: path experiment, ratio sweep and pipelines."""

import numpy as np
import pytest

from src.bench import (
    PipelineConfig, aggregate_records, cell_seed, detection_scores, results_to_csv,
    results_to_json, run_path_experiment, run_pipeline, run_ratio_sweep, stratified_split,
    sweep_to_csv,
)
from src.classify import accuracy, predict, train_linear
from src.dataset import SyntheticConfig, generate_synthetic
from src.errors import ConfigError


def _small(seed, outliers=12):
    return generate_synthetic(SyntheticConfig(per_class_count=40, outlier_count_per_class=outliers,
                                              rng_seed=seed))


class TestDetectionScores:
    def test_counts(self):
        mask = np.array([False, True, True, False])
        scores = detection_scores([1, 3], mask)
        assert scores['recall'] == 0.5
        assert scores['precision'] == 0.5
        assert scores['hits'] == 1

    def test_empty_truth(self):
        assert detection_scores([0], np.zeros(3, dtype=bool))['recall'] is None


class TestPathExperiment:
    def test_first_activations_are_mostly_outliers(self):
        results = [run_path_experiment(seed=s) for s in range(3)]
        assert np.mean([r.fraction_top for r in results]) >= 0.45
        for r in results:
            assert r.n_outliers == 90
            assert r.max_kkt_violation <= 1e-5
            assert r.ordering_metrics['status'] == 'ok'

    def test_no_outliers_not_applicable(self):
        result = run_path_experiment(seed=0, cfg=SyntheticConfig(outlier_count_per_class=0))
        assert result.fraction_top is None
        assert result.target_met is None
        assert result.ordering_metrics['status'] == 'not_applicable'

    def test_same_seed_same_csv(self):
        cfg = SyntheticConfig(per_class_count=20, outlier_count_per_class=5)
        a = run_path_experiment(seed=3, cfg=cfg)
        b = run_path_experiment(seed=3, cfg=cfg)
        assert a.path_csv == b.path_csv
        assert a.path_csv.splitlines()[0] == 'lambda,instance,gamma,is_outlier'

    def test_json_export(self):
        doc = results_to_json(run_path_experiment(seed=1, cfg=SyntheticConfig(per_class_count=20)))
        assert doc['name'] == 'path_experiment'
        assert 'fraction_top' in doc['ordering_metrics']


class TestRatioSweep:
    def test_single_repeat_zero_std(self):
        result = run_ratio_sweep(ratios=(0.5,), repeats=1, seed=2)
        agg = result.aggregates[0.5]['detection_accuracy']
        assert agg['std'] == 0.0
        assert agg['repeats'] == 1

    def test_detection_holds_across_ratios(self):
        result = run_ratio_sweep(ratios=(0.1, 1.5), repeats=3, seed=0, workers=2)
        low = result.aggregates[0.1]['detection_accuracy']['mean']
        high = result.aggregates[1.5]['detection_accuracy']['mean']
        assert high >= 0.6
        assert low >= 0.3
        # outlier base rate grows with the ratio
        assert high > low
        assert len(result.records) == 6
        assert all(r['max_kkt_violation'] <= 1e-5 for r in result.records)

    def test_invalid_ratio_noted(self):
        result = run_ratio_sweep(ratios=(0.0, 0.25), repeats=1,
                                 base=SyntheticConfig(per_class_count=20))
        assert len(result.notes) == 1
        assert set(result.aggregates) == {0.25}

    def test_aggregates_recompute_from_records(self):
        result = run_ratio_sweep(ratios=(0.25, 0.5), repeats=2,
                                 base=SyntheticConfig(per_class_count=20))
        again = aggregate_records(result.records, 'ratio', ['detection_accuracy', 'precision'])
        assert again == result.aggregates

    def test_outlier_counts(self):
        result = run_ratio_sweep(ratios=(0.1,), repeats=1, base=SyntheticConfig(per_class_count=20))
        assert result.records[0]['n_outliers'] == 6

    def test_seeds_are_distinct(self):
        seeds = {cell_seed(0, ri, rep) for ri in range(3) for rep in range(4)}
        assert len(seeds) == 12

    def test_invalid_repeats(self):
        with pytest.raises(ConfigError):
            run_ratio_sweep(repeats=0)

    def test_csv_exports(self):
        result = run_ratio_sweep(ratios=(0.25, 0.5), repeats=1, base=SyntheticConfig(per_class_count=20))
        lines = sweep_to_csv(result).splitlines()
        assert lines[0] == 'ratio,mean,std,repeats'
        assert len(lines) == 3
        header = results_to_csv(result).splitlines()[0].split(',')
        assert header[:4] == ['ratio', 'repeat', 'seed', 'n_outliers']
        assert 'detection_accuracy' in header


class TestPipeline:
    def test_split_stratified_and_disjoint(self):
        ds = _small(0)
        train, test, truth = stratified_split(ds, 0.3, seed=0)
        assert not set(train.indices) & set(test.indices)
        assert len(train.indices) + len(test.indices) == ds.n
        assert set(np.unique(truth)) == {0, 1, 2}

    def test_raw_matches_direct_training(self):
        ds = _small(1)
        cfg = PipelineConfig.named('RAW', seed=1)
        record = run_pipeline(ds, cfg).records[0]

        train, test, truth = stratified_split(ds, cfg.test_fraction, cfg.seed)
        model = train_linear(ds.features[train.indices], train.class_ids, cfg.reg_c,
                             max_iter=cfg.svm_max_iter, seed=cfg.seed)
        expected = accuracy(predict(model, ds.features[test.indices]), truth)
        assert record['test_accuracy'] == expected
        assert record['removed'] == 0

    def test_deterministic(self):
        ds = _small(2)
        configs = [PipelineConfig.named(row, seed=2) for row in ('RAW', 'P-LASSO', 'IPOD')]
        a = run_pipeline(ds, configs)
        b = run_pipeline(ds, configs, workers=3)
        assert a.records == b.records

    def test_plasso_removes_true_count(self):
        ds = _small(3)
        record = run_pipeline(ds, PipelineConfig.named('P-LASSO', seed=3)).records[0]
        train, _, _ = stratified_split(ds, 0.3, seed=3)
        assert record['removed'] == int(train.outlier_mask.sum())
        assert record['selection_rule'].startswith('count')

    def test_lrw_with_plasso_allowed(self):
        ds = _small(4)
        cfg = PipelineConfig(name='LRW+P-LASSO', classifier='lrw', removal='plasso', seed=4)
        record = run_pipeline(ds, cfg).records[0]
        assert 0.0 <= record['test_accuracy'] <= 1.0

    def test_lrw_with_tdca_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig(features='tdca', classifier='lrw').validate()
        with pytest.raises(ConfigError):
            run_pipeline(_small(0), PipelineConfig(features='tdca', classifier='lrw'))

    def test_ipod_needs_count(self):
        with pytest.raises(ConfigError):
            PipelineConfig(removal='ipod', select='cv').validate()

    def test_unknown_row(self):
        with pytest.raises(ConfigError):
            PipelineConfig.named('SVM')

    def test_cleaned_tdca_keeps_up_with_raw(self):
        raw, cleaned = [], []
        for seed in range(3):
            ds = _small(seed)
            opts = {'seed': seed, 'similarity': 'heat', 'normalize': False}
            result = run_pipeline(ds, [PipelineConfig.named('RAW', **opts),
                                       PipelineConfig.named('P-LASSO-TDCA', **opts)])
            raw.append(result.aggregates['RAW']['test_accuracy']['mean'])
            cleaned.append(result.aggregates['P-LASSO-TDCA']['test_accuracy']['mean'])
            train, _, _ = stratified_split(ds, 0.3, seed)
            assert result.records[1]['removed'] == int(train.outlier_mask.sum())
        assert np.mean(cleaned) >= np.mean(raw) - 0.1

    def test_json_and_csv_export(self):
        result = run_pipeline(_small(5), [PipelineConfig.named('RAW', seed=5),
                                          PipelineConfig.named('P-LASSO', seed=5)])
        doc = results_to_json(result)
        assert doc['name'] == 'pipeline'
        assert set(doc['aggregates']) == {'RAW', 'P-LASSO'}
        header = results_to_csv(result).splitlines()[0].split(',')
        assert header[0] == 'pipeline'
        assert 'removal_recall' in header
