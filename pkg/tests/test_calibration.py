"""Scale calibration: grids, fold hygiene, selection rule."""

import numpy as np
import pytest

from kernelicl.backbone import standardize
from kernelicl.calibration import (CalibrationGrid, calibrate, default_grid, fold_partition)
from kernelicl.errors import ContractViolation
from kernelicl.kernels import DOT, GAUSSIAN, KNN, KernelSpec, kernel_weights, predict
from kernelicl.priorgen import generate_toy


class TestDefaultGrids:
    def test_gaussian_grid(self):
        grid = default_grid(GAUSSIAN)
        assert len(grid.candidates) == 8
        assert grid.candidates[-1] == 1.5
        assert grid.candidates[0] == 0.01

    def test_knn_grid(self):
        grid = default_grid(KNN)
        assert len(grid.candidates) == 13
        assert grid.candidates[0] == 1 and grid.candidates[-1] == 8192

    def test_dot_grid_strictly_decreasing(self):
        grid = default_grid(DOT)
        values = np.array(grid.candidates)
        assert np.all(np.diff(values) < 0)
        np.testing.assert_allclose(values[0], 0.5)
        np.testing.assert_allclose(values[-1], 1.0 / np.sqrt(512))

    def test_empty_grid_rejected(self):
        with pytest.raises(ContractViolation):
            CalibrationGrid(GAUSSIAN, ())


class TestFoldPartition:
    def test_disjoint_cover_deterministic(self):
        labels = np.random.default_rng(0).integers(0, 2, size=53)
        folds_a = fold_partition(labels, 5, seed=4)
        folds_b = fold_partition(labels, 5, seed=4)
        combined = np.sort(np.concatenate(folds_a))
        np.testing.assert_array_equal(combined, np.arange(53))
        for fa, fb in zip(folds_a, folds_b):
            np.testing.assert_array_equal(fa, fb)

    def test_stratified_when_possible(self):
        labels = np.array([0] * 20 + [1] * 10)
        for held in fold_partition(labels, 5, seed=1):
            counts = np.bincount(labels[held], minlength=2)
            assert counts[0] == 4 and counts[1] == 2

    def test_too_few_samples(self):
        with pytest.raises(ContractViolation):
            fold_partition(np.array([0, 1]), 3, seed=0)


class TestCalibrate:
    def test_single_candidate(self):
        ds = generate_toy("moons", 60, 2, 1.0, seed=0)
        grid = CalibrationGrid(GAUSSIAN, (0.37,))
        result = calibrate(None, ds.features_train, ds.labels_train, GAUSSIAN, grid=grid)
        assert result.chosen == 0.37

    def test_knn_skip_rule(self):
        rng = np.random.default_rng(1)
        features = rng.standard_normal((100, 4))
        labels = np.arange(100) % 2
        # with 5 folds the smallest context is 80, so k > 80 is skipped
        result = calibrate(None, features, labels, KNN, folds=5, seed=0)
        skipped = {s.value for s in result.scores if s.skipped}
        assert skipped == {128.0, 256.0, 512.0, 1024.0, 2048.0, 4096.0, 8192.0}
        for s in result.scores:
            assert (s.mean_accuracy is None) == s.skipped

    def test_all_skipped_error(self):
        ds = generate_toy("linear", 30, 0, 1.0, seed=2)
        grid = CalibrationGrid(KNN, (512, 1024))
        with pytest.raises(ContractViolation):
            calibrate(None, ds.features_train, ds.labels_train, KNN, grid=grid)

    def test_calibrated_not_worse_than_default_on_same_folds(self):
        ds = generate_toy("moons", 120, 4, 1.0, seed=3)
        default = 0.25
        grid = CalibrationGrid(GAUSSIAN, (0.01, 0.1, default, 1.0, 3.0))
        result = calibrate(None, ds.features_train, ds.labels_train, GAUSSIAN, grid=grid, seed=5)
        by_value = {s.value: s.mean_accuracy for s in result.scores}
        assert by_value[result.chosen] >= by_value[default]

    def test_chosen_maximizes_exhaustive_recount(self):
        ds = generate_toy("circles", 80, 3, 1.0, seed=6)
        features, labels = ds.features_train, ds.labels_train
        result = calibrate(None, features, labels, GAUSSIAN, folds=4, seed=7)
        # independent recount: score every candidate on the recorded folds
        recount = {}
        for score in result.scores:
            accs = []
            for held in result.folds:
                train_idx = np.setdiff1d(np.arange(labels.shape[0]), held)
                keys, queries = standardize(features[train_idx], features[held])
                w = kernel_weights(KernelSpec(GAUSSIAN, score.value), queries, keys)
                pred = predict(w, labels[train_idx], 2).data.argmax(axis=1)
                accs.append(float(np.mean(pred == labels[held])))
            recount[score.value] = float(np.mean(accs))
            assert abs(recount[score.value] - score.mean_accuracy) < 1e-12
        assert recount[result.chosen] == max(recount.values())

    def test_tie_breaks_to_sparser(self):
        # two identical-scoring candidates: uniform weights for both tiny gammas
        ds = generate_toy("linear", 40, 0, 1.0, seed=8)
        grid = CalibrationGrid(GAUSSIAN, (1e-12, 1e-11))
        result = calibrate(None, ds.features_train, ds.labels_train, GAUSSIAN, grid=grid)
        assert result.chosen == 1e-11  # larger gamma is sparser

    def test_leakage_folds_exposed(self):
        ds = generate_toy("moons", 50, 0, 1.0, seed=9)
        result = calibrate(None, ds.features_train, ds.labels_train, GAUSSIAN, folds=5)
        n = ds.labels_train.shape[0]
        seen = np.concatenate(result.folds)
        assert len(seen) == n and len(np.unique(seen)) == n

    def test_model_path(self, tiny_params):
        ds = generate_toy("linear", 40, 1, 1.0, seed=10)
        grid = CalibrationGrid(GAUSSIAN, (0.1, 0.5))
        result = calibrate(tiny_params, ds.features_train, ds.labels_train, GAUSSIAN,
                           grid=grid, folds=3, seed=11)
        assert result.chosen in grid.candidates

    def test_csv_export(self, tmp_path):
        ds = generate_toy("moons", 40, 0, 1.0, seed=12)
        result = calibrate(None, ds.features_train, ds.labels_train, GAUSSIAN, folds=4)
        path = tmp_path / "calib.csv"
        result.write_csv(str(path))
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "candidate,mean_cv_accuracy,skipped"
        assert len(lines) == 9
