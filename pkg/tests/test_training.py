"""Training loop: smoke convergence, overfit capacity, determinism, reuse rule."""

import numpy as np
import pytest

from kernelicl.autodiff import Tape, backward
from kernelicl.backbone import ModelConfig, init_parameters, load_checkpoint
from kernelicl.errors import ContractViolation
from kernelicl.kernels import DOT, GAUSSIAN, KNN, default_spec
from kernelicl.priorgen import Dataset, PriorConfig, sample_prior_batch
from kernelicl.training import (TrainConfig, dataset_loss, embeddings_for_kernel, train,
                                _pool_loss)

TINY = ModelConfig(width=8, heads=2, col_layers=1, row_layers=1, icl_layers=1,
                   inducing=2, d_k=4, classes=2)
TINY_PRIOR = PriorConfig(d_min=2, d_max=5, max_total=32, datasets_per_batch=4, seed=13)


class TestTrainSmoke:
    def test_loss_decreases_over_smoke_run(self):
        config = TrainConfig(kernel=GAUSSIAN, batches=50, validation_batches=1,
                             validation_interval=10, seed=13)
        params, log = train(config, TINY_PRIOR, TINY)
        assert log.rows[-1].train_loss < log.rows[0].train_loss
        assert log.best_index == int(np.argmin([r.validation_loss for r in log.rows]))

    def test_knn_kernel_rejected_for_training(self):
        with pytest.raises(ContractViolation):
            TrainConfig(kernel=KNN)

    def test_gradient_at_init_finite_nonzero(self):
        params = init_parameters(TINY, seed=0)
        plist = params.parameters()
        batch = sample_prior_batch(TINY_PRIOR, 0)
        spec = default_spec(GAUSSIAN, TINY.d_k)
        with Tape() as tape:
            loss = dataset_loss(params, batch[0], spec, "symmetric")
        grads = backward(tape, loss, plist)
        assert all(np.all(np.isfinite(g)) for g in grads)
        assert any(np.any(g != 0.0) for g in grads)


class TestOverfitCapacity:
    def test_single_dataset_memorized(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((32, 4))
        y = (x @ rng.standard_normal(4) > 0).astype(np.intp)
        ds = Dataset(x[:22], y[:22], x[22:], y[22:], "fixed")

        config = TrainConfig(kernel=GAUSSIAN, batches=500, validation_batches=1,
                             validation_interval=500, seed=1)
        params, log = train(config, TINY_PRIOR, TINY, sampler=lambda b: [ds])
        spec = default_spec(GAUSSIAN, TINY.d_k)
        final = float(dataset_loss(params, ds, spec, "symmetric").data)
        assert final < 0.1


class TestDeterminism:
    def test_bitwise_identical_runs(self, tmp_path):
        paths = [tmp_path / "a.kicl", tmp_path / "b.kicl"]
        logs = []
        for path in paths:
            config = TrainConfig(kernel=GAUSSIAN, batches=10, validation_batches=1,
                                 validation_interval=5, seed=21, checkpoint_path=str(path))
            _, log = train(config, TINY_PRIOR, TINY)
            logs.append(log)
        assert logs[0].loss_sequence() == logs[1].loss_sequence()
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_checkpoint_round_trip_reproduces_validation_loss(self, tmp_path):
        path = tmp_path / "model.kicl"
        config = TrainConfig(kernel=GAUSSIAN, batches=8, validation_batches=1,
                             validation_interval=4, seed=3, checkpoint_path=str(path))
        params, log = train(config, TINY_PRIOR, TINY)
        loaded, extra = load_checkpoint(str(path))
        pool = [ds for k in range(config.validation_batches)
                for ds in sample_prior_batch(TINY_PRIOR, 2 ** 31 + k)]
        spec = default_spec(GAUSSIAN, TINY.d_k)
        replayed = _pool_loss(loaded, pool, spec, "symmetric")
        assert replayed == log.rows[log.best_index].validation_loss
        assert extra["best_validation_loss"] == replayed


class TestEmbeddingsForKernel:
    def test_reuse_rules(self):
        trained = {GAUSSIAN: "gs", DOT: "dt"}
        assert embeddings_for_kernel(GAUSSIAN, trained) == "gs"
        assert embeddings_for_kernel(DOT, trained) == "dt"
        assert embeddings_for_kernel(KNN, trained) == "gs"

    def test_missing_checkpoint_names_requirement(self):
        with pytest.raises(ContractViolation, match="'gaussian'"):
            embeddings_for_kernel(KNN, {DOT: "dt"})


class TestTrainLogCsv:
    def test_csv_columns(self, tmp_path):
        config = TrainConfig(kernel=GAUSSIAN, batches=4, validation_batches=1,
                             validation_interval=2, seed=5)
        _, log = train(config, TINY_PRIOR, TINY)
        path = tmp_path / "log.csv"
        log.write_csv(str(path))
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "batch,train_loss,val_loss,seconds"
        assert len(lines) == 1 + len(log.rows)


class TestReferenceScaleConfig:
    def test_paper_scale_reference_is_constructible(self):
        from kernelicl.priorgen import paper_scale_prior
        config = TrainConfig(kernel=GAUSSIAN, batches=5000, validation_batches=32,
                             validation_interval=25)
        prior = paper_scale_prior(seed=0)
        assert config.batches * prior.datasets_per_batch == 320_000
        assert config.validation_batches * prior.datasets_per_batch == 2048
